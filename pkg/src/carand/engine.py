"""Sequential trial runner.

Two interchangeable paths produce identical trajectories from the same uniform
draws: a vectorized kernel that steps a whole block of replications in
lockstep (the Monte Carlo workhorse), and a scalar reference path built from
the state/policy operations (slow, used for debug checks and as an independent
cross-check in tests).

Per-patient draw layout, fixed for stream alignment:
  two-arm:   u[j, 0] stratum, u[j, 1] assignment coin
  multi-arm: u[j, 0] stratum, u[j, 1:T+1] tie keys, u[j, T+1] assignment coin
The first patient goes through the same rule as everyone else; at the zero
state it is exactly a fair coin (1/2, or 1/T via the full tie).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imbalance import MultiArmState, TwoArmState
from .keys import index_label
from .policies import (
    DesignConfig,
    MultiArmProbs,
    RANK_DECIMALS,
    rank_treatment_probs,
    treatment_one_prob,
)


class InvariantError(RuntimeError):
    """A structural state invariant failed during a checked run."""


def draws_per_patient(design: DesignConfig) -> int:
    return design.arms + 2 if design.is_multiarm else 2


@dataclass
class BlockSnapshot:
    """State of a block of replications after `n` patients.

    Two-arm shapes: overall (B,), margins [(B, m_i)], strata (B, m),
    stratum_counts (B, m). Multi-arm diffs are integer numerators over T with
    shapes (B, T), [(B, T, m_i)], (B, T, m).
    """

    n: int
    overall: np.ndarray
    margins: list[np.ndarray]
    strata: np.ndarray | None
    stratum_counts: np.ndarray | None


@dataclass
class CheckpointSnapshot:
    """One replication's state at a checkpoint (numerators for multi-arm)."""

    n: int
    overall: int | np.ndarray
    margins: list[np.ndarray]
    strata: np.ndarray | None
    stratum_counts: np.ndarray | None


@dataclass
class Trajectory:
    """Checkpointed imbalance snapshots of a single trial."""

    arms: int
    denominator: int
    snapshots: list[CheckpointSnapshot] = field(default_factory=list)
    master_seed: int | None = None
    replication_id: int | None = None

    @property
    def checkpoints(self) -> list[int]:
        return [s.n for s in self.snapshots]


def validate_checkpoints(n: int, checkpoints) -> tuple[int, ...]:
    cps = tuple(int(c) for c in checkpoints)
    if not cps:
        raise ValueError("need at least one checkpoint")
    if any(b <= a for a, b in zip(cps, cps[1:])):
        raise ValueError(f"checkpoints must be strictly ascending, got {cps}")
    if cps[0] < 1 or cps[-1] > n:
        raise ValueError(f"checkpoints must lie in [1, {n}], got {cps}")
    return cps


def run_trial(
    design: DesignConfig,
    n: int,
    checkpoints,
    rng: np.random.Generator,
    *,
    keep_strata: bool = True,
    debug_checks: bool = False,
    master_seed: int | None = None,
    replication_id: int | None = None,
) -> Trajectory:
    """Run one sequential trial of n patients; deterministic given the stream.

    With debug_checks the scalar reference path is used and every step is
    revalidated against the stratum-difference array.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    cps = validate_checkpoints(n, checkpoints)
    uniforms = rng.random((1, n, draws_per_patient(design)))
    if debug_checks:
        snaps = _reference_block(design, n, cps, uniforms, debug_checks=True)
    else:
        snaps = simulate_block(design, n, cps, uniforms, keep_strata=keep_strata)
    trajectory = Trajectory(
        arms=design.arms,
        denominator=design.arms if design.is_multiarm else 1,
        master_seed=master_seed,
        replication_id=replication_id,
    )
    for c in cps:
        b = snaps[c]
        trajectory.snapshots.append(
            CheckpointSnapshot(
                n=c,
                overall=b.overall[0].copy() if design.is_multiarm else int(b.overall[0]),
                margins=[a[0].copy() for a in b.margins],
                strata=None if b.strata is None else b.strata[0].copy(),
                stratum_counts=(
                    None if b.stratum_counts is None else b.stratum_counts[0].copy()
                ),
            )
        )
    return trajectory


def simulate_block(
    design: DesignConfig,
    n: int,
    checkpoints,
    uniforms: np.ndarray,
    *,
    keep_strata: bool = True,
    check_invariants: bool = False,
) -> dict[int, BlockSnapshot]:
    """Step a block of replications in lockstep; uniforms is (B, n, draws)."""
    cps = validate_checkpoints(n, checkpoints)
    if uniforms.shape[1] < n or uniforms.shape[2] != draws_per_patient(design):
        raise ValueError(f"uniforms shaped {uniforms.shape} do not cover the run")
    if design.is_multiarm:
        return _block_multiarm(design, n, cps, uniforms, keep_strata, check_invariants)
    return _block_twoarm(design, n, cps, uniforms, keep_strata, check_invariants)


def _block_twoarm(design, n, cps, uniforms, keep_strata, check):
    spec, dist, w = design.spec, design.dist, design.weights
    coin = design.policy
    m = spec.stratum_count
    tables = spec.margin_level_tables()
    wm = w.margins
    B = uniforms.shape[0]
    rows = np.arange(B)

    overall = np.zeros(B, dtype=np.int64)
    strata = np.zeros((B, m), dtype=np.int64)
    margins = [np.zeros((B, mi), dtype=np.int64) for mi in spec.levels]
    counts = np.zeros((B, m), dtype=np.int64)

    want = set(cps)
    out: dict[int, BlockSnapshot] = {}
    for j in range(n):
        k = dist.indices_of(uniforms[:, j, 0])
        lam = w.overall * overall
        levels = []
        for i, table in enumerate(tables):
            li = table[k]
            levels.append(li)
            lam = lam + wm[i] * margins[i][rows, li]
        lam = lam + w.stratum * strata[rows, k]
        p_one = coin(4.0 * lam)
        delta = np.where(uniforms[:, j, 1] < p_one, 1, -1).astype(np.int64)
        overall += delta
        strata[rows, k] += delta
        counts[rows, k] += 1
        for i, li in enumerate(levels):
            margins[i][rows, li] += delta
        if j + 1 in want:
            if check:
                _check_twoarm(j + 1, overall, strata, margins, counts, tables)
            out[j + 1] = BlockSnapshot(
                n=j + 1,
                overall=overall.copy(),
                margins=[a.copy() for a in margins],
                strata=strata.copy() if keep_strata else None,
                stratum_counts=counts.copy() if keep_strata else None,
            )
    return out


def _check_twoarm(n, overall, strata, margins, counts, tables):
    if np.any((overall - n) % 2 != 0):
        raise InvariantError("overall diff/n parity violated")
    if np.any(strata.sum(axis=1) != overall):
        raise InvariantError("overall diff inconsistent with stratum diffs")
    if np.any((strata - counts) % 2 != 0) or np.any(np.abs(strata) > counts):
        raise InvariantError("stratum diff/count invariant violated")
    for i, table in enumerate(tables):
        fresh = np.zeros_like(margins[i])
        np.add.at(fresh.T, table, strata.T)
        if not np.array_equal(fresh, margins[i]):
            raise InvariantError("margin diffs inconsistent with stratum diffs")


def _block_multiarm(design, n, cps, uniforms, keep_strata, check):
    spec, dist, w = design.spec, design.dist, design.weights
    probs: MultiArmProbs = design.policy
    T = probs.arms
    m = spec.stratum_count
    tables = spec.margin_level_tables()
    wm = w.margins
    cum = probs.cumulative()
    B = uniforms.shape[0]
    rows = np.arange(B)

    # Numerator layout (B, cells, T) keeps the per-step gather a plain fancy index.
    overall = np.zeros((B, T), dtype=np.int64)
    strata = np.zeros((B, m, T), dtype=np.int64)
    margins = [np.zeros((B, mi, T), dtype=np.int64) for mi in spec.levels]
    stratum_counts = np.zeros((B, m), dtype=np.int64)

    want = set(cps)
    out: dict[int, BlockSnapshot] = {}
    for j in range(n):
        k = dist.indices_of(uniforms[:, j, 0])
        lam = w.overall * overall
        levels = []
        for i, table in enumerate(tables):
            li = table[k]
            levels.append(li)
            lam = lam + wm[i] * margins[i][rows, li]
        lam = lam + w.stratum * strata[rows, k]
        lam = np.round(lam / T, RANK_DECIMALS)

        tie = uniforms[:, j, 1 : T + 1]
        by_key = np.argsort(tie, axis=1, kind="stable")
        lam_keyed = np.take_along_axis(lam, by_key, axis=1)
        order = np.take_along_axis(
            by_key, np.argsort(lam_keyed, axis=1, kind="stable"), axis=1
        )
        rank = np.minimum(
            np.searchsorted(cum, uniforms[:, j, T + 1], side="right"), T - 1
        )
        chosen = order[rows, rank]

        overall -= 1
        overall[rows, chosen] += T
        strata[rows, k] -= 1
        strata[rows, k, chosen] += T
        for i, li in enumerate(levels):
            margins[i][rows, li] -= 1
            margins[i][rows, li, chosen] += T
        stratum_counts[rows, k] += 1

        if j + 1 in want:
            if check:
                _check_multiarm(strata, stratum_counts, T)
            out[j + 1] = BlockSnapshot(
                n=j + 1,
                overall=overall.copy(),
                margins=[a.transpose(0, 2, 1).copy() for a in margins],
                strata=strata.transpose(0, 2, 1).copy() if keep_strata else None,
                stratum_counts=stratum_counts.copy() if keep_strata else None,
            )
    return out


def _check_multiarm(strata, stratum_counts, T):
    if np.any(strata.sum(axis=2) != 0):
        raise InvariantError("per-stratum diffs do not sum to 0 over treatments")
    if np.any((strata + stratum_counts[:, :, None]) % T != 0):
        raise InvariantError("mod-T identity violated")


def _reference_block(design, n, cps, uniforms, *, debug_checks=False):
    """Scalar path over the state/policy operations; same draws, same results."""
    B = uniforms.shape[0]
    out: dict[int, BlockSnapshot] = {}
    snaps_by_rep: list[dict[int, CheckpointSnapshot]] = []
    for b in range(B):
        snaps_by_rep.append(
            _reference_single(design, n, cps, uniforms[b], debug_checks)
        )
    for c in cps:
        per = [s[c] for s in snaps_by_rep]
        out[c] = BlockSnapshot(
            n=c,
            overall=np.array([p.overall for p in per]),
            margins=[
                np.stack([p.margins[i] for p in per])
                for i in range(design.spec.covariate_count)
            ],
            strata=np.stack([p.strata for p in per]),
            stratum_counts=np.stack([p.stratum_counts for p in per]),
        )
    return out


def _reference_single(design, n, cps, u, debug_checks):
    spec, dist, w = design.spec, design.dist, design.weights
    state = design.new_state()
    multi = design.is_multiarm
    out: dict[int, CheckpointSnapshot] = {}
    for j in range(n):
        k = dist.index_of(u[j, 0])
        if multi:
            probs: MultiArmProbs = design.policy
            T = probs.arms
            lam = state.weighted_imbalance(w, k)
            order, _ = rank_treatment_probs(lam, probs, u[j, 1 : T + 1])
            rank = min(
                int(np.searchsorted(probs.cumulative(), u[j, T + 1], side="right")),
                T - 1,
            )
            state.apply_assignment(k, int(order[rank]) + 1)
        else:
            p_one = treatment_one_prob(state, w, design.policy, k)
            state.apply_assignment(k, 1 if u[j, 1] < p_one else 2)
        if debug_checks:
            if multi:
                state.check_invariants()
            elif not state.reconstruct_check():
                raise InvariantError(f"reconstruct_check failed after patient {j + 1}")
        if j + 1 in cps:
            if multi:
                out[j + 1] = CheckpointSnapshot(
                    n=j + 1,
                    overall=state.overall_diff_numerators(),
                    margins=state.margin_diff_numerators(),
                    strata=state.stratum_diff_numerators(),
                    stratum_counts=state.stratum_counts.copy(),
                )
            else:
                out[j + 1] = CheckpointSnapshot(
                    n=j + 1,
                    overall=state.overall_diff,
                    margins=[a.copy() for a in state.margin_diffs],
                    strata=state.stratum_diffs.copy(),
                    stratum_counts=state.counts.copy(),
                )
    return out


def write_trajectories_csv(
    trajectories, fileobj, *, digest: str | None = None, seed: int | None = None
) -> None:
    """Trajectory export: (replication, checkpoint_n, scope, index, value)."""
    if digest is not None:
        tail = "" if seed is None else f" seed={seed}"
        fileobj.write(f"# design={digest}{tail}\n")
    fileobj.write("replication,checkpoint_n,scope,index,value\n")
    for traj in trajectories:
        rep = traj.replication_id if traj.replication_id is not None else ""
        den = traj.denominator
        for snap in traj.snapshots:
            for scope, index, value in _snapshot_cells(snap, traj.arms):
                label = index_label(scope, index, traj.arms)
                out = value / den if den != 1 else value
                fileobj.write(f"{rep},{snap.n},{scope},{label},{out}\n")


def _snapshot_cells(snap: CheckpointSnapshot, arms: int):
    if arms == 2:
        yield "overall", (), snap.overall
        for i, arr in enumerate(snap.margins):
            for level, value in enumerate(arr):
                yield "margin", (i + 1, level + 1), int(value)
        if snap.strata is not None:
            for flat, value in enumerate(snap.strata):
                yield "stratum", (flat,), int(value)
    else:
        for t in range(arms):
            yield "overall", (t + 1,), int(snap.overall[t])
        for i, arr in enumerate(snap.margins):
            for t in range(arms):
                for level, value in enumerate(arr[t]):
                    yield "margin", (t + 1, i + 1, level + 1), int(value)
        if snap.strata is not None:
            for t in range(arms):
                for flat, value in enumerate(snap.strata[t]):
                    yield "stratum", (t + 1, flat), int(value)
