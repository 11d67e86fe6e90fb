"""Replicated simulation and verification of the balance dichotomy.

Each imbalance scope either stays stochastically bounded or its second moment
grows linearly with the sample size. classify_regimes predicts which from the
zero pattern of the weights alone; simulate_many produces the evidence; and
build_report checks the two against each other with explicit tolerance bands.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from . import keys as K
from .engine import draws_per_patient, simulate_block
from .imbalance import TwoArmState, WeightConfig
from .policies import BiasedCoin, DesignConfig
from .summary import SimulationSummary

BOUNDED = "bounded"
SQRT_N = "sqrt_n"

# Justification tags for regime predictions (one per classification rule).
TAG_STRATUM_WEIGHTED = "stratum-weight-positive"
TAG_STRATUM_IS_MARGIN = "single-covariate-stratum-is-margin"
TAG_STRATUM_GROWS = "strata-unweighted-grow"
TAG_MARGIN_WEIGHTED = "margin-weight-positive"
TAG_MARGIN_GROWS = "margin-unweighted-grows"
TAG_OVERALL = "overall-always-bounded"

# Memory budget for a block's pregenerated uniforms (bytes).
_BLOCK_BYTES = 2 * 10**8


def derive_stream(master_seed: int, replication_id: int) -> np.random.Generator:
    """Independent stream for one replication; order-free in replication id."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, replication_id)))


def simulate_many(
    design: DesignConfig,
    n_grid,
    replications: int,
    master_seed: int,
    workers: int = 1,
    *,
    rep_start: int = 0,
    block_size: int = 2048,
    retained_strata=None,
    check_invariants: bool = False,
) -> SimulationSummary:
    """Run `replications` independent trials and fold them into one summary.

    Replication r uses the stream derived from (master_seed, rep_start + r),
    so the result is exactly independent of worker count, block size, and
    merge order; disjoint rep ranges merge to the same summary as one big run.
    """
    if replications < 1:
        raise ValueError("need at least one replication")
    n_grid = tuple(int(c) for c in n_grid)
    n = n_grid[-1]
    per_rep = draws_per_patient(design) * n * 8
    cap = max(1, _BLOCK_BYTES // per_rep)
    block = max(1, min(block_size, cap))

    tasks = [
        (design, n_grid, start, min(block, rep_start + replications - start),
         master_seed, retained_strata, check_invariants)
        for start in range(rep_start, rep_start + replications, block)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_block_summary, tasks))
    else:
        partials = [_block_summary(t) for t in tasks]
    out = partials[0]
    for part in partials[1:]:
        out = out.merge(part)
    return out


def _block_summary(task) -> SimulationSummary:
    design, n_grid, start, size, master_seed, retained, check = task
    n = n_grid[-1]
    d = draws_per_patient(design)
    uniforms = np.empty((size, n, d))
    for b in range(size):
        uniforms[b] = derive_stream(master_seed, start + b).random((n, d))
    snaps = simulate_block(
        design, n, n_grid, uniforms, keep_strata=True, check_invariants=check
    )
    summary = SimulationSummary(
        design_digest=design.digest(),
        master_seed=master_seed,
        checkpoints=n_grid,
        arms=design.arms,
        retained_strata=retained,
    )
    summary.add_block(snaps)
    return summary


# -- regime classification ---------------------------------------------------


class Prediction(NamedTuple):
    label: str
    tag: str


@dataclass
class RegimePrediction:
    """Predicted growth regime for every scope/index of a design."""

    arms: int
    entries: dict[K.CellKey, Prediction]

    def __getitem__(self, key: K.CellKey) -> Prediction:
        return self.entries[key]


def classify_regimes(design: DesignConfig) -> RegimePrediction:
    """Bounded vs sqrt-n prediction from the zero pattern of the weights.

    Strata are bounded exactly when the stratum weight is positive; margins
    when their own or the stratum weight is; the overall imbalance always is.
    With a single covariate the stratum IS that covariate's margin, so the
    margin rule applies to it.
    """
    w = design.weights
    single = design.spec.covariate_count == 1
    entries: dict[K.CellKey, Prediction] = {}
    for scope, index in K.cell_keys(design.spec, design.arms):
        if scope == K.OVERALL:
            entries[(scope, index)] = Prediction(BOUNDED, TAG_OVERALL)
        elif scope == K.MARGIN:
            covariate = index[-2]
            if w.stratum + w.margins[covariate - 1] > 0.0:
                entries[(scope, index)] = Prediction(BOUNDED, TAG_MARGIN_WEIGHTED)
            else:
                entries[(scope, index)] = Prediction(SQRT_N, TAG_MARGIN_GROWS)
        else:
            if w.stratum > 0.0:
                entries[(scope, index)] = Prediction(BOUNDED, TAG_STRATUM_WEIGHTED)
            elif single and w.margins[0] > 0.0:
                entries[(scope, index)] = Prediction(BOUNDED, TAG_STRATUM_IS_MARGIN)
            else:
                entries[(scope, index)] = Prediction(SQRT_N, TAG_STRATUM_GROWS)
    return RegimePrediction(arms=design.arms, entries=entries)


# -- estimators ---------------------------------------------------------------


class Sigma2Estimate(NamedTuple):
    sigma2: float
    flatness_ratio: float
    sigma2_se: float


def estimate_sigma2(
    summary: SimulationSummary, scope: str, index, n_pair: tuple[int, int]
) -> Sigma2Estimate:
    """Linear-growth rate of the second moment between two checkpoints.

    sigma2 is the difference quotient of E[value^2]; flatness_ratio near 1
    signals a bounded scope, near n_b/n_a a linearly growing one. The standard
    error treats the two checkpoints as independent, which overstates the
    variance of the difference (their correlation is positive), so the
    "positive at z sigma" test is conservative.
    """
    n_a, n_b = int(n_pair[0]), int(n_pair[1])
    if n_a not in summary.checkpoints or n_b not in summary.checkpoints:
        raise ValueError(f"checkpoints {n_pair} not in summary grid {summary.checkpoints}")
    if n_b < 2 * n_a:
        raise ValueError(f"need n_b >= 2*n_a for a usable growth signal, got {n_pair}")
    m2a = summary.mean_sq(n_a, scope, index)
    m2b = summary.mean_sq(n_b, scope, index)
    if m2a == 0.0:
        ratio = math.inf if m2b > 0.0 else 1.0
    else:
        ratio = m2b / m2a
    se = math.hypot(
        summary.abs_moment_se(n_a, scope, index, 2),
        summary.abs_moment_se(n_b, scope, index, 2),
    ) / (n_b - n_a)
    return Sigma2Estimate((m2b - m2a) / (n_b - n_a), ratio, se)


def ks_normality(
    summary: SimulationSummary, n: int, scope: str, index, sigma2: float
) -> float | None:
    """KS distance of value/sqrt(sigma2*n) from the standard normal.

    None when sigma2 is not positive (the scaling is undefined there).
    Computed exactly from the histogram: the supremum over jump points of the
    empirical distribution function.
    """
    if sigma2 <= 0.0:
        return None
    values, counts = summary.histogram(n, scope, index)
    z = values / math.sqrt(sigma2 * n)
    cdf = norm.cdf(z)
    ecdf_hi = np.cumsum(counts) / counts.sum()
    ecdf_lo = ecdf_hi - counts / counts.sum()
    return float(max(np.max(ecdf_hi - cdf), np.max(cdf - ecdf_lo)))


# -- drift diagnostics --------------------------------------------------------


class DriftDiagnostic(NamedTuple):
    potential: float       # weighted sum of squared imbalances
    pull: float            # nonnegative restoring term
    expected_change: float  # 1 - 4 * pull


def weighted_squared_imbalance(state: TwoArmState, weights: WeightConfig) -> float:
    """Weighted sum of squared imbalances over all scopes (the potential)."""
    v = weights.stratum * float(np.sum(state.stratum_diffs.astype(float) ** 2))
    for i, margin in enumerate(state.margin_diffs):
        v += weights.margins[i] * float(np.sum(margin.astype(float) ** 2))
    v += weights.overall * float(state.overall_diff) ** 2
    return v


def drift_diagnostic(
    state: TwoArmState, weights: WeightConfig, coin: BiasedCoin, dist
) -> DriftDiagnostic:
    """Potential, restoring pull, and expected one-step change of the potential.

    The pull sums |weighted imbalance| * (1/2 - g(4|imbalance|)) * p(stratum);
    one patient changes the potential by exactly 1 - 4*pull in expectation,
    which expected_next_potential verifies by brute force.
    """
    lam = state.weighted_imbalances(weights)
    mag = np.abs(lam)
    pull = float(np.sum(mag * (0.5 - coin(4.0 * mag)) * dist.probs))
    return DriftDiagnostic(
        potential=weighted_squared_imbalance(state, weights),
        pull=pull,
        expected_change=1.0 - 4.0 * pull,
    )


def expected_next_potential(
    state: TwoArmState, weights: WeightConfig, coin: BiasedCoin, dist
) -> float:
    """Brute-force E[potential after one patient | state] over all 2m branches."""
    total = 0.0
    for k in range(state.spec.stratum_count):
        p_one = float(coin(4.0 * state.weighted_imbalance(weights, k)))
        for arm, pr in ((1, p_one), (2, 1.0 - p_one)):
            state.apply_assignment(k, arm)
            total += dist.probs[k] * pr * weighted_squared_imbalance(state, weights)
            state.undo_assignment(k, arm)
    return total


# -- verification report ------------------------------------------------------


@dataclass(frozen=True)
class Tolerances:
    """Acceptance bands; growth band is factor times the checkpoint ratio."""

    bounded_band: tuple[float, float] = (0.5, 2.0)
    growth_band_factor: tuple[float, float] = (0.7, 1.425)
    ks_threshold: float = 0.03
    sigma2_z: float = 3.0


@dataclass
class ReportRow:
    scope: str
    index: tuple
    label: str
    prediction: str
    flatness_ratio: float | None
    sigma2: float | None
    sigma2_se: float | None
    ks: float | None
    verdict: str
    note: str = ""


@dataclass
class VerificationReport:
    rows: list[ReportRow]
    n_pair: tuple[int, int] | None
    tolerances: Tolerances

    @property
    def passed(self) -> bool:
        return all(row.verdict == "pass" for row in self.rows)

    def to_csv(self, fileobj, *, digest: str | None = None, seed=None) -> None:
        if digest is not None:
            fileobj.write(f"# design={digest} seed={seed}\n")
        fileobj.write("scope,index,prediction,flatness_ratio,sigma2_hat,ks,verdict\n")
        for r in self.rows:
            flat = "" if r.flatness_ratio is None else f"{r.flatness_ratio:.6g}"
            s2 = "" if r.sigma2 is None else f"{r.sigma2:.6g}"
            ks = "" if r.ks is None else f"{r.ks:.6g}"
            fileobj.write(
                f"{r.scope},{r.label},{r.prediction},{flat},{s2},{ks},{r.verdict}\n"
            )

    def format_text(self) -> str:
        lines = [
            f"{'scope':8} {'index':12} {'predicted':9} {'flatness':>9} "
            f"{'sigma2':>10} {'ks':>8}  verdict"
        ]
        for r in self.rows:
            flat = "-" if r.flatness_ratio is None else f"{r.flatness_ratio:9.3f}"
            s2 = "-" if r.sigma2 is None else f"{r.sigma2:10.4f}"
            ks = "-" if r.ks is None else f"{r.ks:8.4f}"
            note = f"  ({r.note})" if r.note else ""
            lines.append(
                f"{r.scope:8} {r.label or '-':12} {r.prediction:9} {flat:>9} "
                f"{s2:>10} {ks:>8}  {r.verdict}{note}"
            )
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"overall: {status}")
        return "\n".join(lines)


def build_report(
    design: DesignConfig,
    summary: SimulationSummary,
    prediction: RegimePrediction,
    tolerances: Tolerances | None = None,
) -> VerificationReport:
    """Check every predicted regime against the simulated evidence.

    Bounded scopes must keep the second moment flat within the bounded band;
    growing scopes must match the linear-growth band, show sigma2 positive at
    the configured z, and (strata only) pass the KS normality check at the
    final checkpoint. Cells without data are marked insufficient, never
    passed.
    """
    tol = tolerances or Tolerances()
    grid = summary.checkpoints
    usable = len(grid) >= 2 and grid[-1] >= 2 * grid[0]
    n_pair = (grid[0], grid[-1]) if usable else None

    rows: list[ReportRow] = []
    for (scope, index), pred in prediction.entries.items():
        label = K.index_label(scope, index, summary.arms)
        if not usable:
            rows.append(
                ReportRow(scope, index, label, pred.label, None, None, None, None,
                          "insufficient", "need two checkpoints with ratio >= 2")
            )
            continue
        try:
            est = estimate_sigma2(summary, scope, index, n_pair)
        except KeyError:
            rows.append(
                ReportRow(scope, index, label, pred.label, None, None, None, None,
                          "insufficient", "no data for this cell")
            )
            continue
        ks = None
        notes = []
        if pred.label == BOUNDED:
            ok = tol.bounded_band[0] <= est.flatness_ratio <= tol.bounded_band[1]
            if not ok:
                notes.append(f"flatness {est.flatness_ratio:.3g} outside bounded band")
        else:
            ratio = n_pair[1] / n_pair[0]
            lo, hi = tol.growth_band_factor[0] * ratio, tol.growth_band_factor[1] * ratio
            ok = lo <= est.flatness_ratio <= hi
            if not ok:
                notes.append(f"flatness {est.flatness_ratio:.3g} outside growth band")
            if not est.sigma2 > tol.sigma2_z * est.sigma2_se:
                ok = False
                notes.append("sigma2 not positive at z sigma")
            if scope == K.STRATUM:
                ks = ks_normality(summary, n_pair[1], scope, index, est.sigma2)
                if ks is None or ks >= tol.ks_threshold:
                    ok = False
                    notes.append("KS normality check failed")
        rows.append(
            ReportRow(
                scope, index, label, pred.label, est.flatness_ratio,
                est.sigma2, est.sigma2_se, ks,
                "pass" if ok else "fail", "; ".join(notes),
            )
        )
    return VerificationReport(rows=rows, n_pair=n_pair, tolerances=tol)
