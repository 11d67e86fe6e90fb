"""Covariate structure: the stratum grid, margin indexing, and patient sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import NamedTuple

import numpy as np

PROB_SUM_TOL = 1e-12

Coords = tuple[int, ...]


class Margin(NamedTuple):
    """One covariate margin: (covariate, level), both 1-based."""

    covariate: int
    level: int

    def __str__(self) -> str:
        return f"{self.covariate};{self.level}"


@dataclass(frozen=True)
class CovariateSpec:
    """Grid of categorical covariates; covariate i has ``levels[i-1]`` levels.

    A stratum is one full covariate profile (k_1, ..., k_I) with 1-based
    coordinates; strata are also addressed by a row-major flat index in
    [0, stratum_count). The flat order is fixed so CSV output and oracle
    state encodings are stable across runs.
    """

    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if len(self.levels) < 1:
            raise ValueError("need at least one covariate")
        if any(m < 2 for m in self.levels):
            raise ValueError(f"every covariate needs at least 2 levels, got {self.levels}")

    @property
    def covariate_count(self) -> int:
        return len(self.levels)

    @property
    def stratum_count(self) -> int:
        return math.prod(self.levels)

    def enumerate_strata(self) -> list[Coords]:
        """All strata as coordinate tuples, in row-major (flat index) order."""
        return list(product(*(range(1, m + 1) for m in self.levels)))

    def validate_stratum(self, coords) -> Coords:
        coords = tuple(int(k) for k in coords)
        if len(coords) != len(self.levels) or not all(
            1 <= k <= m for k, m in zip(coords, self.levels)
        ):
            raise IndexError(f"stratum {coords} out of range for levels {self.levels}")
        return coords

    def flat_index(self, coords) -> int:
        coords = self.validate_stratum(coords)
        flat = 0
        for k, m in zip(coords, self.levels):
            flat = flat * m + (k - 1)
        return flat

    def coords_of(self, flat: int) -> Coords:
        if not 0 <= flat < self.stratum_count:
            raise IndexError(f"flat index {flat} out of range [0, {self.stratum_count})")
        out = []
        for m in reversed(self.levels):
            out.append(flat % m + 1)
            flat //= m
        return tuple(reversed(out))

    def margins_of(self, coords) -> list[Margin]:
        """The I margins a stratum belongs to; the i-th is (i, k_i)."""
        coords = self.validate_stratum(coords)
        return [Margin(i + 1, k) for i, k in enumerate(coords)]

    def margin_level_tables(self) -> tuple[np.ndarray, ...]:
        """Per covariate: lookup array mapping flat stratum index to 0-based level."""
        return _level_tables(self.levels)

    def enumerate_margins(self) -> list[Margin]:
        """All (covariate, level) margins, covariates first, levels within."""
        return [
            Margin(i + 1, k)
            for i, m in enumerate(self.levels)
            for k in range(1, m + 1)
        ]


@lru_cache(maxsize=None)
def _level_tables(levels: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    m = math.prod(levels)
    flat = np.arange(m)
    tables = []
    stride = m
    for mi in levels:
        stride //= mi
        tables.append(((flat // stride) % mi).astype(np.int64))
    return tuple(tables)


class StratumDistribution:
    """Probabilities of a new patient falling in each stratum (flat order).

    Entries must be strictly positive and sum to 1 within 1e-12; a wrong sum is
    an error rather than being silently renormalized. Dimensional agreement
    with a CovariateSpec is checked by DesignConfig, not here, so degenerate
    distributions (e.g. a single cell) remain constructible for tests.
    """

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("probs must be a non-empty 1-d array")
        if np.any(probs <= 0.0):
            raise ValueError("all stratum probabilities must be strictly positive")
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(
                f"stratum probabilities sum to {total!r}, not 1 within {PROB_SUM_TOL}; "
                "renormalize explicitly if that is intended"
            )
        self.probs = probs.copy()
        self.probs.flags.writeable = False
        self._cum = np.cumsum(self.probs)

    @classmethod
    def uniform(cls, stratum_count: int) -> "StratumDistribution":
        return cls(np.full(stratum_count, 1.0 / stratum_count))

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, StratumDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __repr__(self) -> str:
        return f"StratumDistribution({self.probs.tolist()!r})"

    def sample(self, rng: np.random.Generator) -> int:
        """Draw one stratum (flat index). Same stream state, same result."""
        return self.index_of(rng.random())

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.indices_of(rng.random(size))

    def index_of(self, u: float) -> int:
        """Map one uniform draw in [0,1) to a stratum index."""
        return int(min(np.searchsorted(self._cum, u, side="right"), len(self) - 1))

    def indices_of(self, u: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._cum, u, side="right")
        return np.minimum(idx, len(self) - 1)
