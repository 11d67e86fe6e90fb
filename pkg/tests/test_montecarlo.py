import numpy as np
import pytest
import scipy.stats

from carand.covariates import StratumDistribution
from carand.imbalance import TwoArmState, WeightConfig
from carand.montecarlo import (
    BOUNDED,
    SQRT_N,
    Tolerances,
    build_report,
    classify_regimes,
    drift_diagnostic,
    estimate_sigma2,
    expected_next_potential,
    ks_normality,
    simulate_many,
    weighted_squared_imbalance,
)
from carand.policies import EfronCoin
from carand.summary import SimulationSummary

from conftest import make_design, make_multiarm_design, random_two_arm_state


class TestClassifyRegimes:
    def test_pocock_simon(self):
        design = make_design(weights=(0.0, (0.5, 0.5), 0.0))
        pred = classify_regimes(design)
        assert pred[("overall", ())].label == BOUNDED
        for i in (1, 2):
            for k in (1, 2):
                assert pred[("margin", (i, k))].label == BOUNDED
        for flat in range(4):
            assert pred[("stratum", (flat,))].label == SQRT_N

    def test_positive_stratum_weight_bounds_everything(self):
        pred = classify_regimes(make_design())  # w_s = 0.3
        assert all(p.label == BOUNDED for p in pred.entries.values())

    def test_overall_only_grows_elsewhere(self):
        design = make_design(weights=(1.0, (0.0, 0.0), 0.0))
        pred = classify_regimes(design)
        assert pred[("overall", ())].label == BOUNDED
        assert all(
            p.label == SQRT_N
            for (scope, _), p in pred.entries.items()
            if scope != "overall"
        )

    def test_depends_only_on_zero_pattern(self):
        small = make_design(weights=(0.001, (0.001, 0.001), 0.997))
        large = make_design(weights=(0.3, (0.3, 0.2), 0.2))
        a = classify_regimes(small)
        b = classify_regimes(large)
        assert {k: p.label for k, p in a.entries.items()} == {
            k: p.label for k, p in b.entries.items()
        }

    def test_single_covariate_stratum_is_margin(self):
        design = make_design(levels=(2,), weights=(0.0, (1.0,), 0.0))
        pred = classify_regimes(design)
        assert pred[("stratum", (0,))].label == BOUNDED
        assert pred[("stratum", (0,))].tag == "single-covariate-stratum-is-margin"
        # and empirically the strata really do stay flat
        summary = simulate_many(design, (400, 1600), 2000, 97)
        est = estimate_sigma2(summary, "stratum", (0,), (400, 1600))
        assert est.flatness_ratio < 2.0

    def test_multiarm_total_coverage(self):
        design = make_multiarm_design()
        pred = classify_regimes(design)
        assert len(pred.entries) == 3 * (1 + 4 + 4)
        assert all(
            p.label == (SQRT_N if scope == "stratum" else BOUNDED)
            for (scope, _), p in pred.entries.items()
        )


class TestEstimateSigma2:
    def test_checkpoint_validation(self):
        design = make_design()
        summary = simulate_many(design, (100, 150), 50, 1)
        with pytest.raises(ValueError, match="n_b >= 2"):
            estimate_sigma2(summary, "overall", (), (100, 150))
        with pytest.raises(ValueError, match="grid"):
            estimate_sigma2(summary, "overall", (), (100, 400))

    def test_zero_samples_give_zero_sigma(self):
        summary = SimulationSummary(
            design_digest="x", master_seed=0, checkpoints=(10, 40)
        )
        from collections import Counter

        summary.cells[(10, "stratum", (0,))] = Counter({0: 5})
        summary.cells[(40, "stratum", (0,))] = Counter({0: 5})
        est = estimate_sigma2(summary, "stratum", (0,), (10, 40))
        assert est.sigma2 == 0.0
        assert est.flatness_ratio == 1.0
        assert est.sigma2_se == 0.0


class TestKsNormality:
    def test_true_normal_passes_null_bound(self):
        # 99th percentile of the KS null at R = 1e4 is about 1.63/sqrt(R)
        rng = np.random.default_rng(8)
        n, sigma2 = 400, 1.0
        summary = SimulationSummary(design_digest="x", master_seed=0, checkpoints=(n,))
        from collections import Counter

        samples = np.round(rng.standard_normal(10_000) * np.sqrt(sigma2 * n))
        summary.cells[(n, "stratum", (0,))] = Counter(
            {int(v): int(c) for v, c in zip(*np.unique(samples, return_counts=True))}
        )
        ks = ks_normality(summary, n, "stratum", (0,), sigma2)
        assert ks < 0.02

    def test_matches_scipy_on_expanded_samples(self):
        design = make_design(weights=(0.0, (0.5, 0.5), 0.0))
        summary = simulate_many(design, (100, 400), 2000, 21)
        est = estimate_sigma2(summary, "stratum", (0,), (100, 400))
        ks = ks_normality(summary, 400, "stratum", (0,), est.sigma2)
        values, counts = summary.histogram(400, "stratum", (0,))
        expanded = np.repeat(values, counts) / np.sqrt(est.sigma2 * 400)
        ref = scipy.stats.kstest(expanded, "norm").statistic
        assert ks == pytest.approx(ref, abs=1e-12)

    def test_not_applicable_when_sigma_zero(self):
        summary = SimulationSummary(design_digest="x", master_seed=0, checkpoints=(1,))
        assert ks_normality(summary, 1, "stratum", (0,), 0.0) is None

    def test_degenerate_samples_fail_hard(self):
        summary = SimulationSummary(design_digest="x", master_seed=0, checkpoints=(100,))
        from collections import Counter

        summary.cells[(100, "stratum", (0,))] = Counter({0: 10_000})
        ks = ks_normality(summary, 100, "stratum", (0,), 1.0)
        assert ks == pytest.approx(0.5, abs=0.01)


class TestDriftDiagnostics:
    DESIGN = make_design(weights=(0.2, (0.3, 0.2), 0.3), probs=[0.1, 0.2, 0.3, 0.4])

    def test_zero_state(self):
        d = self.DESIGN
        diag = drift_diagnostic(TwoArmState(d.spec), d.weights, d.policy, d.dist)
        assert diag.potential == 0.0
        assert diag.pull == 0.0
        assert diag.expected_change == 1.0

    def test_efron_pull_closed_form(self, rng):
        # with the step coin at p = 0.75 the pull is 0.25 * sum |lam| * p(k)
        d = self.DESIGN
        state = random_two_arm_state(rng, d.spec)
        lam = state.weighted_imbalances(d.weights)
        mask = np.abs(lam) > 1e-9
        expect = 0.25 * np.sum(np.abs(lam[mask]) * d.dist.probs[mask])
        diag = drift_diagnostic(state, d.weights, d.policy, d.dist)
        assert diag.pull == pytest.approx(expect, abs=1e-12)

    def test_one_step_identity(self, rng):
        d = self.DESIGN
        for _ in range(100):
            state = random_two_arm_state(rng, d.spec)
            diag = drift_diagnostic(state, d.weights, d.policy, d.dist)
            brute = expected_next_potential(state, d.weights, d.policy, d.dist)
            assert brute == pytest.approx(diag.potential + diag.expected_change, abs=1e-9)

    def test_far_from_balance_drifts_down(self):
        d = self.DESIGN
        state = TwoArmState.from_stratum_diffs(d.spec, np.array([10, 10, 10, 10]))
        diag = drift_diagnostic(state, d.weights, d.policy, d.dist)
        assert diag.expected_change < 0.0

    def test_sandwich_bound(self, rng):
        # (p - 1/2) * min_k p(k) * sum|lam| <= pull <= sum|lam| for the step coin
        d = self.DESIGN
        coin: EfronCoin = d.policy
        for _ in range(100):
            state = random_two_arm_state(rng, d.spec)
            lam_sum = float(np.sum(np.abs(state.weighted_imbalances(d.weights))))
            pull = drift_diagnostic(state, d.weights, coin, d.dist).pull
            lower = (coin.p - 0.5) * d.dist.probs.min() * lam_sum
            assert lower - 1e-12 <= pull <= lam_sum + 1e-12


class TestBuildReport:
    def test_catalog_design_passes(self):
        design = make_design(weights=(0.0, (0.5, 0.5), 0.0))
        summary = simulate_many(design, (500, 2000), 4000, 33)
        report = build_report(design, summary, classify_regimes(design))
        assert report.passed

    def test_mislabeled_prediction_fails(self):
        design = make_design(weights=(0.0, (0.5, 0.5), 0.0))
        summary = simulate_many(design, (500, 2000), 4000, 33)
        pred = classify_regimes(design)
        # deliberately claim the strata are bounded
        for key, p in list(pred.entries.items()):
            if key[0] == "stratum":
                pred.entries[key] = p._replace(label=BOUNDED)
        report = build_report(design, summary, pred)
        assert not report.passed
        failed = {r.scope for r in report.rows if r.verdict == "fail"}
        assert failed == {"stratum"}

    def test_empty_summary_marks_insufficient(self):
        design = make_design()
        summary = SimulationSummary(
            design_digest=design.digest(), master_seed=0, checkpoints=(1000, 4000)
        )
        report = build_report(design, summary, classify_regimes(design))
        assert not report.passed
        assert all(r.verdict == "insufficient" for r in report.rows)

    def test_unusable_grid_marks_insufficient(self):
        design = make_design()
        summary = simulate_many(design, (100, 150), 50, 1)
        report = build_report(design, summary, classify_regimes(design))
        assert all(r.verdict == "insufficient" for r in report.rows)

    def test_csv_columns(self, tmp_path):
        design = make_design()
        summary = simulate_many(design, (100, 400), 200, 2)
        report = build_report(design, summary, classify_regimes(design))
        path = tmp_path / "report.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            report.to_csv(f, digest=design.digest(), seed=2)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# design=")
        assert lines[1] == "scope,index,prediction,flatness_ratio,sigma2_hat,ks,verdict"
        assert len(lines) == 2 + 9


def test_simulate_many_rejects_bad_args():
    design = make_design()
    with pytest.raises(ValueError):
        simulate_many(design, (10,), 0, 1)
