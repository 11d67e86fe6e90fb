"""Treatment-difference bookkeeping at overall, margin, and stratum scope.

Two-arm differences are "assigned to 1 minus assigned to 2". Multi-arm
differences compare each treatment's count with the across-treatment average;
they are kept as integer numerators over the number of arms so that the
zero-sum and mod-T identities hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .covariates import CovariateSpec

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class WeightConfig:
    """Nonnegative weights on the overall, per-margin and stratum imbalances.

    Must sum to 1 within 1e-12 (normalizing is the caller's job; a wrong sum
    is treated as a config bug).
    """

    overall: float
    margins: tuple[float, ...]
    stratum: float

    def __post_init__(self):
        object.__setattr__(self, "overall", float(self.overall))
        object.__setattr__(self, "margins", tuple(float(v) for v in self.margins))
        object.__setattr__(self, "stratum", float(self.stratum))
        vals = (self.overall, *self.margins, self.stratum)
        if any(v < 0.0 for v in vals):
            raise ValueError(f"weights must be nonnegative, got {vals}")
        total = math.fsum(vals)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(
                f"weights sum to {total!r}, not 1 within {WEIGHT_SUM_TOL}: "
                f"w_o={self.overall}, w_m={self.margins}, w_s={self.stratum}"
            )


class TwoArmState:
    """Running counts and arm-1-minus-arm-2 differences for one two-arm trial.

    Updates are in place and O(I) per assignment; `undo_assignment` reverses
    one step so branch exploration never needs copies.
    """

    def __init__(self, spec: CovariateSpec):
        self.spec = spec
        m = spec.stratum_count
        self.n = 0
        self.counts = np.zeros(m, dtype=np.int64)
        self.stratum_diffs = np.zeros(m, dtype=np.int64)
        self.margin_diffs = [np.zeros(mi, dtype=np.int64) for mi in spec.levels]
        self.overall_diff = 0

    @classmethod
    def from_stratum_diffs(cls, spec, stratum_diffs, counts=None) -> "TwoArmState":
        """Build a state from per-stratum differences (margins/overall derived).

        counts defaults to |diff| per stratum, the minimal consistent choice.
        """
        state = cls(spec)
        diffs = np.asarray(stratum_diffs, dtype=np.int64)
        if diffs.shape != (spec.stratum_count,):
            raise ValueError(f"expected {spec.stratum_count} stratum differences")
        if counts is None:
            counts = np.abs(diffs)
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < np.abs(diffs)) or np.any((counts - diffs) % 2 != 0):
            raise ValueError("counts must dominate |diffs| and match their parity")
        state.stratum_diffs = diffs.copy()
        state.counts = counts.copy()
        state.n = int(counts.sum())
        state.overall_diff = int(diffs.sum())
        for i, table in enumerate(spec.margin_level_tables()):
            np.add.at(state.margin_diffs[i], table, diffs)
        return state

    def apply_assignment(self, stratum: int, arm: int) -> "TwoArmState":
        """Record one patient in `stratum` (flat index) on `arm` (1 or 2)."""
        step = self._step(arm)
        self.counts[stratum] += 1
        self.stratum_diffs[stratum] += step
        for i, table in enumerate(self.spec.margin_level_tables()):
            self.margin_diffs[i][table[stratum]] += step
        self.overall_diff += step
        self.n += 1
        return self

    def undo_assignment(self, stratum: int, arm: int) -> "TwoArmState":
        """Reverse a previous apply_assignment with the same arguments."""
        step = self._step(arm)
        self.counts[stratum] -= 1
        self.stratum_diffs[stratum] -= step
        for i, table in enumerate(self.spec.margin_level_tables()):
            self.margin_diffs[i][table[stratum]] -= step
        self.overall_diff -= step
        self.n -= 1
        return self

    @staticmethod
    def _step(arm: int) -> int:
        if arm not in (1, 2):
            raise ValueError(f"arm must be 1 or 2, got {arm}")
        return 1 if arm == 1 else -1

    def margin_diff(self, covariate: int, level: int) -> int:
        """Difference on margin (covariate, level), both 1-based."""
        return int(self.margin_diffs[covariate - 1][level - 1])

    def weighted_imbalance(self, weights: WeightConfig, stratum: int) -> float:
        """Weighted average of current imbalances seen from `stratum`."""
        x = weights.overall * self.overall_diff
        for i, table in enumerate(self.spec.margin_level_tables()):
            x += weights.margins[i] * self.margin_diffs[i][table[stratum]]
        return float(x + weights.stratum * self.stratum_diffs[stratum])

    def weighted_imbalances(self, weights: WeightConfig) -> np.ndarray:
        """The per-stratum weighted-imbalance view (length m)."""
        out = np.full(self.spec.stratum_count, weights.overall * self.overall_diff)
        for i, table in enumerate(self.spec.margin_level_tables()):
            out += weights.margins[i] * self.margin_diffs[i][table]
        out += weights.stratum * self.stratum_diffs
        return out

    def reconstruct_check(self) -> bool:
        """True iff stored margin/overall fields equal sums recomputed from strata."""
        if self.overall_diff != int(self.stratum_diffs.sum()):
            return False
        if self.n != int(self.counts.sum()):
            return False
        for i, table in enumerate(self.spec.margin_level_tables()):
            fresh = np.zeros_like(self.margin_diffs[i])
            np.add.at(fresh, table, self.stratum_diffs)
            if not np.array_equal(fresh, self.margin_diffs[i]):
                return False
        return True

    def check_invariants(self) -> None:
        """Raise if any structural invariant is violated (debug/test hook)."""
        if not self.reconstruct_check():
            raise AssertionError("margin/overall fields inconsistent with stratum diffs")
        if np.any(np.abs(self.stratum_diffs) > self.counts):
            raise AssertionError("|stratum diff| exceeds stratum count")
        if np.any((self.stratum_diffs - self.counts) % 2 != 0):
            raise AssertionError("stratum diff/count parity violated")
        if (self.overall_diff - self.n) % 2 != 0:
            raise AssertionError("overall diff/n parity violated")

    def to_csv(self, fileobj) -> None:
        """State snapshot: header block, then one row per stratum."""
        fileobj.write(f"# n={self.n}\n")
        fileobj.write(f"# d_overall={self.overall_diff}\n")
        for margin in self.spec.enumerate_margins():
            fileobj.write(f"# margin {margin}={self.margin_diff(*margin)}\n")
        fileobj.write("flat_index,coords,count,d_stratum\n")
        for flat in range(self.spec.stratum_count):
            coords = ";".join(str(k) for k in self.spec.coords_of(flat))
            fileobj.write(
                f"{flat},{coords},{self.counts[flat]},{self.stratum_diffs[flat]}\n"
            )


class MultiArmState:
    """Per-treatment counts for T arms; differences vs the treatment average.

    diff = count - (total / T) for each scope, held as integer numerators
    (T * diff) so invariants are exact: numerators sum to 0 across treatments,
    and numerator + total is divisible by T everywhere.
    """

    def __init__(self, spec: CovariateSpec, arms: int):
        if arms < 2:
            raise ValueError("need at least 2 arms")
        self.spec = spec
        self.arms = int(arms)
        self.n = 0
        self.counts = np.zeros((self.arms, spec.stratum_count), dtype=np.int64)

    @property
    def stratum_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def stratum_diff_numerators(self) -> np.ndarray:
        """(T, m) integers: arms * stratum diff per treatment."""
        return self.arms * self.counts - self.stratum_counts[None, :]

    def margin_diff_numerators(self) -> list[np.ndarray]:
        out = []
        for i, table in enumerate(self.spec.margin_level_tables()):
            per_arm = np.zeros((self.arms, self.spec.levels[i]), dtype=np.int64)
            for t in range(self.arms):
                np.add.at(per_arm[t], table, self.counts[t])
            out.append(self.arms * per_arm - per_arm.sum(axis=0, keepdims=True))
        return out

    def overall_diff_numerators(self) -> np.ndarray:
        per_arm = self.counts.sum(axis=1)
        return self.arms * per_arm - self.n

    def stratum_diffs(self) -> np.ndarray:
        return self.stratum_diff_numerators() / self.arms

    def apply_assignment(self, stratum: int, treatment: int) -> "MultiArmState":
        """Record one patient in `stratum` (flat index) on `treatment` (1..T)."""
        self._validate_treatment(treatment)
        self.counts[treatment - 1, stratum] += 1
        self.n += 1
        return self

    def undo_assignment(self, stratum: int, treatment: int) -> "MultiArmState":
        self._validate_treatment(treatment)
        self.counts[treatment - 1, stratum] -= 1
        self.n -= 1
        return self

    def _validate_treatment(self, treatment: int) -> None:
        if not 1 <= treatment <= self.arms:
            raise ValueError(f"treatment must be in 1..{self.arms}, got {treatment}")

    def weighted_imbalance(self, weights: WeightConfig, stratum: int) -> np.ndarray:
        """(T,) weighted-imbalance values seen from `stratum`, one per treatment."""
        num = weights.overall * self.overall_diff_numerators().astype(float)
        tables = self.spec.margin_level_tables()
        margin_nums = self.margin_diff_numerators()
        for i, table in enumerate(tables):
            num += weights.margins[i] * margin_nums[i][:, table[stratum]]
        num += weights.stratum * self.stratum_diff_numerators()[:, stratum]
        return num / self.arms

    def weighted_imbalances(self, weights: WeightConfig) -> np.ndarray:
        """(T, m) weighted-imbalance view across all strata."""
        m = self.spec.stratum_count
        num = np.tile(
            weights.overall * self.overall_diff_numerators().astype(float)[:, None],
            (1, m),
        )
        margin_nums = self.margin_diff_numerators()
        for i, table in enumerate(self.spec.margin_level_tables()):
            num += weights.margins[i] * margin_nums[i][:, table]
        num += weights.stratum * self.stratum_diff_numerators()
        return num / self.arms

    def check_invariants(self) -> None:
        if np.any(self.counts < 0):
            raise AssertionError("negative treatment count")
        if int(self.counts.sum()) != self.n:
            raise AssertionError("counts do not sum to n")
        nums = self.stratum_diff_numerators()
        if np.any(nums.sum(axis=0) != 0):
            raise AssertionError("per-stratum diffs do not sum to 0 over treatments")
        if np.any((nums + self.stratum_counts[None, :]) % self.arms != 0):
            raise AssertionError("mod-T identity violated")
