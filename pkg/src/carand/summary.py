"""Mergeable replication statistics.

Two-arm imbalances are integers and multi-arm ones are integers over T, so
every (checkpoint, scope, index) cell keeps an exact integer histogram of
numerators (a Counter). All moments, quantiles and distribution distances are
derived from it; merging two summaries is plain counter addition, which makes
the result exactly independent of worker count and merge order.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import keys as K


class SimulationSummary:
    """Per-cell histograms over replications at each checkpoint."""

    def __init__(
        self,
        *,
        design_digest: str,
        master_seed: int,
        checkpoints: tuple[int, ...],
        arms: int = 2,
        retained_strata=None,
    ):
        self.design_digest = design_digest
        self.master_seed = master_seed
        self.checkpoints = tuple(int(c) for c in checkpoints)
        self.arms = int(arms)
        self.denominator = 1 if self.arms == 2 else self.arms
        self.retained_strata = (
            None if retained_strata is None else tuple(int(s) for s in retained_strata)
        )
        self.replications = 0
        self.cells: dict[tuple, Counter] = {}

    # -- accumulation ------------------------------------------------------

    def add_block(self, snapshots: dict) -> None:
        """Fold a block of replication snapshots (one per checkpoint) in."""
        first = next(iter(snapshots.values()))
        block_reps = int(np.shape(first.overall)[0])
        for n, snap in snapshots.items():
            for scope, index, column in self._columns(snap):
                self._bump((int(n), scope, index), column)
        self.replications += block_reps

    def _columns(self, snap):
        multi = self.arms > 2
        if multi:
            for t in range(self.arms):
                yield K.OVERALL, (t + 1,), snap.overall[:, t]
            for i, arr in enumerate(snap.margins):
                for t in range(self.arms):
                    for level in range(arr.shape[2]):
                        yield K.MARGIN, (t + 1, i + 1, level + 1), arr[:, t, level]
            if snap.strata is not None:
                for t in range(self.arms):
                    for flat in self._strata(snap.strata.shape[2]):
                        yield K.STRATUM, (t + 1, flat), snap.strata[:, t, flat]
        else:
            yield K.OVERALL, (), snap.overall
            for i, arr in enumerate(snap.margins):
                for level in range(arr.shape[1]):
                    yield K.MARGIN, (i + 1, level + 1), arr[:, level]
            if snap.strata is not None:
                for flat in self._strata(snap.strata.shape[1]):
                    yield K.STRATUM, (flat,), snap.strata[:, flat]

    def _strata(self, m: int):
        return range(m) if self.retained_strata is None else self.retained_strata

    def _bump(self, key, column) -> None:
        values, counts = np.unique(np.asarray(column), return_counts=True)
        cell = self.cells.setdefault(key, Counter())
        for v, c in zip(values.tolist(), counts.tolist()):
            cell[int(v)] += int(c)

    # -- merging -----------------------------------------------------------

    def merge(self, other: "SimulationSummary") -> "SimulationSummary":
        """Exact combination of two summaries over disjoint replication sets."""
        for attr in ("design_digest", "master_seed", "checkpoints", "arms", "retained_strata"):
            if getattr(self, attr) != getattr(other, attr):
                raise ValueError(f"cannot merge summaries with different {attr}")
        out = SimulationSummary(
            design_digest=self.design_digest,
            master_seed=self.master_seed,
            checkpoints=self.checkpoints,
            arms=self.arms,
            retained_strata=self.retained_strata,
        )
        out.replications = self.replications + other.replications
        for key in set(self.cells) | set(other.cells):
            out.cells[key] = self.cells.get(key, Counter()) + other.cells.get(key, Counter())
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimulationSummary):
            return NotImplemented
        return (
            self.design_digest == other.design_digest
            and self.master_seed == other.master_seed
            and self.checkpoints == other.checkpoints
            and self.arms == other.arms
            and self.replications == other.replications
            and self.cells == other.cells
        )

    # -- derived statistics --------------------------------------------------

    def cell(self, n: int, scope: str, index) -> Counter:
        try:
            return self.cells[(int(n), scope, tuple(index))]
        except KeyError:
            raise KeyError(f"no data for checkpoint {n}, {scope} {tuple(index)}") from None

    def count(self, n, scope, index) -> int:
        return sum(self.cell(n, scope, index).values())

    def mean(self, n, scope, index) -> float:
        cell = self.cell(n, scope, index)
        total = sum(v * c for v, c in cell.items())
        return total / (sum(cell.values()) * self.denominator)

    def abs_moment(self, n, scope, index, r: float) -> float:
        """Mean of |value|^r, exact for integer r."""
        cell = self.cell(n, scope, index)
        count = sum(cell.values())
        if float(r).is_integer():
            total = sum(abs(v) ** int(r) * c for v, c in cell.items())
            return total / (count * self.denominator ** int(r))
        total = sum(abs(v) ** r * c for v, c in cell.items())
        return total / (count * self.denominator**r)

    def mean_sq(self, n, scope, index) -> float:
        return self.abs_moment(n, scope, index, 2)

    def abs_moment_se(self, n, scope, index, r: float) -> float:
        """Standard error of the empirical mean of |value|^r."""
        m1 = self.abs_moment(n, scope, index, r)
        m2 = self.abs_moment(n, scope, index, 2 * r)
        var = max(m2 - m1 * m1, 0.0)
        return float(np.sqrt(var / self.count(n, scope, index)))

    def histogram(self, n, scope, index) -> tuple[np.ndarray, np.ndarray]:
        """Sorted (values, counts); values on the real scale (numerator / T)."""
        cell = self.cell(n, scope, index)
        values = np.array(sorted(cell))
        counts = np.array([cell[v] for v in values.tolist()])
        return values / self.denominator, counts

    def quantile(self, n, scope, index, q: float) -> float:
        values, counts = self.histogram(n, scope, index)
        target = q * counts.sum()
        cum = np.cumsum(counts)
        return float(values[int(np.searchsorted(cum, target, side="left"))])

    def keys_at(self, n: int):
        for key in sorted(self.cells):
            if key[0] == n:
                yield key[1], key[2]


def write_summary_csv(summary: SimulationSummary, fileobj) -> None:
    fileobj.write(
        f"# design={summary.design_digest} seed={summary.master_seed} "
        f"replications={summary.replications}\n"
    )
    fileobj.write("checkpoint_n,scope,index,count,mean,mean_abs,mean_sq,q50,q90,q99\n")
    for n in summary.checkpoints:
        for scope, index in summary.keys_at(n):
            label = K.index_label(scope, index, summary.arms)
            row = [
                str(n),
                scope,
                label,
                str(summary.count(n, scope, index)),
                f"{summary.mean(n, scope, index):.10g}",
                f"{summary.abs_moment(n, scope, index, 1):.10g}",
                f"{summary.mean_sq(n, scope, index):.10g}",
                f"{summary.quantile(n, scope, index, 0.5):.10g}",
                f"{summary.quantile(n, scope, index, 0.9):.10g}",
                f"{summary.quantile(n, scope, index, 0.99):.10g}",
            ]
            fileobj.write(",".join(row) + "\n")
