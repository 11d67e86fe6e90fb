"""Exact forward propagation of the state distribution for small designs.

Feasible only for few strata and short horizons, but then it is the ground
truth: every transition applies the stratum probabilities and the allocation
rule directly, so simulated estimates can be checked against exact moments.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .covariates import CovariateSpec
from .imbalance import WeightConfig
from .keys import MARGIN, OVERALL, STRATUM
from .policies import DesignConfig, MultiArmProbs, RANK_DECIMALS, expected_rank_probs

MAX_STRATA = 8
MAX_PATIENTS = 16
MULTI_MAX_STATES = 200_000

MASS_TOL = 1e-10


class StateSpaceError(ValueError):
    """The requested propagation would exceed the small-instance guard."""


@dataclass(frozen=True)
class Statistic:
    """One exact-moment target: kind plus whatever index it needs.

    kinds: abs_overall, abs_margin (covariate, level), abs_stratum and
    square_stratum (flat stratum). treatment is set for multi-arm designs.
    """

    kind: str
    covariate: int | None = None
    level: int | None = None
    stratum: int | None = None
    treatment: int | None = None

    KINDS = ("abs_overall", "abs_margin", "abs_stratum", "square_stratum")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown statistic {self.kind!r}; expected one of {self.KINDS}")

    def label(self, spec: CovariateSpec | None = None) -> str:
        parts = []
        if self.treatment is not None:
            parts.append(f"t{self.treatment}")
        if self.kind == "abs_margin":
            parts += [str(self.covariate), str(self.level)]
        elif self.kind in ("abs_stratum", "square_stratum"):
            if spec is not None:
                parts += [str(k) for k in spec.coords_of(self.stratum)]
            else:
                parts.append(str(self.stratum))
        return self.kind + (":" + ";".join(parts) if parts else "")


def parse_statistic(text: str, spec: CovariateSpec, arms: int = 2) -> Statistic:
    """Parse "abs_margin:2;1" / "abs_stratum:1;2" / "abs_overall" (+ "t1;" prefix)."""
    kind, _, rest = text.partition(":")
    parts = [p for p in rest.split(";") if p] if rest else []
    treatment = None
    if parts and parts[0].startswith("t"):
        treatment = int(parts.pop(0)[1:])
        if not 1 <= treatment <= arms:
            raise ValueError(f"treatment out of range in {text!r}")
    elif arms > 2:
        raise ValueError(f"multi-arm statistic needs a t<N>; prefix: {text!r}")
    if kind == "abs_overall":
        if parts:
            raise ValueError(f"abs_overall takes no index: {text!r}")
        return Statistic("abs_overall", treatment=treatment)
    if kind == "abs_margin":
        if len(parts) != 2:
            raise ValueError(f"abs_margin needs covariate;level: {text!r}")
        covariate, level = int(parts[0]), int(parts[1])
        if not (1 <= covariate <= spec.covariate_count and 1 <= level <= spec.levels[covariate - 1]):
            raise ValueError(f"margin out of range in {text!r}")
        return Statistic("abs_margin", covariate=covariate, level=level, treatment=treatment)
    if kind in ("abs_stratum", "square_stratum"):
        if len(parts) != spec.covariate_count:
            raise ValueError(f"stratum statistic needs {spec.covariate_count} coordinates: {text!r}")
        flat = spec.flat_index(tuple(int(p) for p in parts))
        return Statistic(kind, stratum=flat, treatment=treatment)
    raise ValueError(f"unknown statistic {text!r}")


class StateDistribution:
    """Probability mass over encoded states after n patients."""

    def __init__(self, design: DesignConfig, n: int, masses: dict[bytes, float], track_counts: bool):
        self.design = design
        self.n = n
        self.masses = masses
        self.track_counts = track_counts

    @property
    def arms(self) -> int:
        return self.design.arms

    def total_mass(self) -> float:
        return math.fsum(self.masses.values())

    def support_size(self) -> int:
        return len(self.masses)

    def _decode(self, key: bytes):
        arr = np.frombuffer(key, dtype="<i2").astype(np.int64)
        m = self.design.spec.stratum_count
        if self.design.is_multiarm:
            return arr.reshape(self.arms, m), None
        if self.track_counts:
            return arr[:m], arr[m:]
        return arr, None

    def items(self):
        """Yield (diffs_or_counts, counts_or_None, probability) decoded states."""
        for key, mass in self.masses.items():
            main, counts = self._decode(key)
            yield main, counts, mass

    def probability_of(self, diffs, counts=None) -> float:
        key = encode_state(np.asarray(diffs), counts if self.track_counts else None)
        return self.masses.get(key, 0.0)


def encode_state(main: np.ndarray, counts: np.ndarray | None = None) -> bytes:
    out = main.astype("<i2").tobytes()
    if counts is not None:
        out += counts.astype("<i2").tobytes()
    return out


def _guard_two_arm(design: DesignConfig, n_max: int) -> None:
    m = design.spec.stratum_count
    if m > MAX_STRATA or n_max > MAX_PATIENTS:
        # Loose upper bound on reachable difference vectors: L1 ball of radius n.
        est = math.comb(n_max + m, m) * 2**min(m, n_max)
        raise StateSpaceError(
            f"two-arm propagation guarded to m <= {MAX_STRATA} strata and "
            f"n <= {MAX_PATIENTS}; got m={m}, n={n_max} "
            f"(roughly {est:.2g} states)"
        )


def _guard_multiarm(design: DesignConfig, n_max: int) -> None:
    cells = design.arms * design.spec.stratum_count
    est = math.comb(n_max + cells - 1, cells - 1)
    if est > MULTI_MAX_STATES or n_max > MAX_PATIENTS:
        raise StateSpaceError(
            f"multi-arm propagation would reach about {est:.3g} states "
            f"({design.arms} arms x {design.spec.stratum_count} strata, "
            f"n={n_max}); guard is {MULTI_MAX_STATES:.0g} states and n <= {MAX_PATIENTS}"
        )


def propagate(
    design: DesignConfig, n_max: int, *, track_counts: bool = False
) -> list[StateDistribution]:
    """Distributions of the imbalance state for n = 0..n_max.

    Multi-arm designs use the tie-averaged allocation probabilities so the
    propagation stays a finite deterministic map.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    if design.is_multiarm:
        _guard_multiarm(design, n_max)
        return _propagate_multiarm(design, n_max)
    _guard_two_arm(design, n_max)
    return _propagate_two_arm(design, n_max, track_counts)


def _propagate_two_arm(design, n_max, track_counts):
    spec, w, coin = design.spec, design.weights, design.policy
    m = spec.stratum_count
    tables = spec.margin_level_tables()
    p = design.dist.probs

    zero = np.zeros(m, dtype=np.int64)
    start = {encode_state(zero, zero if track_counts else None): 1.0}
    dists = [StateDistribution(design, 0, start, track_counts)]

    masses = start
    for n in range(1, n_max + 1):
        states = list(masses.keys())
        weights_vec = np.array([masses[key] for key in states])
        decoded = [dists[-1]._decode(key) for key in states]
        diff_mat = np.stack([d for d, _ in decoded])  # (S, m)
        count_mat = np.stack([c for _, c in decoded]) if track_counts else None

        lam = _lam_table(diff_mat, spec, w, tables)
        prob_one = coin(4.0 * lam)  # (S, m)

        new: dict[bytes, float] = defaultdict(float)
        for s in range(len(states)):
            diffs = diff_mat[s]
            counts = count_mat[s] if track_counts else None
            for k in range(m):
                base = weights_vec[s] * p[k]
                if counts is not None:
                    counts2 = counts.copy()
                    counts2[k] += 1
                else:
                    counts2 = None
                for delta, pr in ((1, prob_one[s, k]), (-1, 1.0 - prob_one[s, k])):
                    diffs2 = diffs.copy()
                    diffs2[k] += delta
                    new[encode_state(diffs2, counts2)] += base * pr
        masses = dict(new)
        dists.append(StateDistribution(design, n, masses, track_counts))
    return dists


def _lam_table(diff_mat: np.ndarray, spec, w: WeightConfig, tables) -> np.ndarray:
    """Per-state, per-stratum weighted imbalance; same term order as the engine."""
    S, m = diff_mat.shape
    lam = np.repeat((w.overall * diff_mat.sum(axis=1))[:, None], m, axis=1)
    rows = np.arange(S)[:, None]
    for i, table in enumerate(tables):
        msum = np.zeros((S, spec.levels[i]), dtype=np.int64)
        np.add.at(msum, (rows, np.broadcast_to(table, (S, m))), diff_mat)
        lam = lam + w.margins[i] * msum[rows, np.broadcast_to(table, (S, m))]
    lam = lam + w.stratum * diff_mat
    return lam


def _propagate_multiarm(design, n_max):
    spec, w = design.spec, design.weights
    probs: MultiArmProbs = design.policy
    T = probs.arms
    m = spec.stratum_count
    tables = spec.margin_level_tables()
    p = design.dist.probs

    zero = np.zeros((T, m), dtype=np.int64)
    masses = {encode_state(zero): 1.0}
    dists = [StateDistribution(design, 0, masses, False)]

    for n in range(1, n_max + 1):
        new: dict[bytes, float] = defaultdict(float)
        for key, mass in masses.items():
            counts = np.frombuffer(key, dtype="<i2").astype(np.int64).reshape(T, m)
            lam = _multi_lam_table(counts, spec, w, tables, T)
            for k in range(m):
                q = expected_rank_probs(lam[:, k], probs)
                for t in range(T):
                    counts2 = counts.copy()
                    counts2[t, k] += 1
                    new[encode_state(counts2)] += mass * p[k] * q[t]
        masses = dict(new)
        dists.append(StateDistribution(design, n, masses, False))
    return dists


def _multi_lam_table(counts: np.ndarray, spec, w: WeightConfig, tables, T: int) -> np.ndarray:
    """(T, m) weighted imbalances from a multi-arm count matrix."""
    m = counts.shape[1]
    stratum_num = T * counts - counts.sum(axis=0, keepdims=True)
    overall_num = T * counts.sum(axis=1) - counts.sum()
    lam = np.repeat((w.overall * overall_num.astype(float))[:, None], m, axis=1)
    for i, table in enumerate(tables):
        per_arm = np.zeros((T, spec.levels[i]), dtype=np.int64)
        for t in range(T):
            np.add.at(per_arm[t], table, counts[t])
        margin_num = T * per_arm - per_arm.sum(axis=0, keepdims=True)
        lam = lam + w.margins[i] * margin_num[:, table]
    lam = lam + w.stratum * stratum_num
    return np.round(lam / T, RANK_DECIMALS)


def exact_moment(dist: StateDistribution, statistic: Statistic, r: float) -> float:
    """Sum over the support of probability times |statistic|^r."""
    if r < 0:
        raise ValueError("moment order r must be nonnegative")
    design = dist.design
    spec = design.spec
    total = 0.0
    if design.is_multiarm:
        if statistic.treatment is None:
            raise ValueError("multi-arm statistics need a treatment")
        T = design.arms
        t = statistic.treatment - 1
        table = (
            spec.margin_level_tables()[statistic.covariate - 1]
            if statistic.kind == "abs_margin"
            else None
        )
        for counts, _, mass in dist.items():
            value = _multi_stat_value(counts, statistic, t, T, table)
            total += mass * value**r
        return total
    for diffs, _, mass in dist.items():
        value = _two_arm_stat_value(diffs, statistic, spec)
        total += mass * value**r
    return total


def _two_arm_stat_value(diffs: np.ndarray, statistic: Statistic, spec) -> float:
    if statistic.kind == "abs_overall":
        return abs(int(diffs.sum()))
    if statistic.kind == "abs_margin":
        table = spec.margin_level_tables()[statistic.covariate - 1]
        return abs(int(diffs[table == statistic.level - 1].sum()))
    if statistic.kind == "abs_stratum":
        return abs(int(diffs[statistic.stratum]))
    return int(diffs[statistic.stratum]) ** 2  # square_stratum


def _multi_stat_value(counts: np.ndarray, statistic: Statistic, t: int, T: int, table) -> float:
    if statistic.kind == "abs_overall":
        num = T * counts[t].sum() - counts.sum()
        return abs(int(num)) / T
    if statistic.kind == "abs_margin":
        sel = table == statistic.level - 1
        num = T * counts[t, sel].sum() - counts[:, sel].sum()
        return abs(int(num)) / T
    num = T * counts[t, statistic.stratum] - counts[:, statistic.stratum].sum()
    if statistic.kind == "abs_stratum":
        return abs(int(num)) / T
    return (int(num) / T) ** 2  # square_stratum


def moment_for_cell(dist: StateDistribution, scope: str, index, r: float) -> float:
    """Exact E|value|^r for a summary-style (scope, index) cell."""
    design = dist.design
    treatment = None
    idx = tuple(index)
    if design.is_multiarm:
        treatment, *rest = idx
        idx = tuple(rest)
    if scope == OVERALL:
        stat = Statistic("abs_overall", treatment=treatment)
    elif scope == MARGIN:
        stat = Statistic("abs_margin", covariate=idx[0], level=idx[1], treatment=treatment)
    elif scope == STRATUM:
        stat = Statistic("abs_stratum", stratum=idx[0], treatment=treatment)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return exact_moment(dist, stat, r)
