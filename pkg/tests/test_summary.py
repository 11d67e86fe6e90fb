import numpy as np
import pytest

from carand.montecarlo import derive_stream, simulate_many
from carand.engine import run_trial
from carand.summary import write_summary_csv

from conftest import make_design, make_multiarm_design

GRID = (20, 60)


@pytest.fixture(scope="module")
def base_summary():
    return simulate_many(make_design(), GRID, 400, 123)


class TestMergeContract:
    def test_split_equals_whole(self):
        design = make_design()
        a = simulate_many(design, GRID, 250, 123, rep_start=0)
        b = simulate_many(design, GRID, 150, 123, rep_start=250)
        whole = simulate_many(design, GRID, 400, 123)
        assert a.merge(b) == whole

    def test_commutative_and_associative(self):
        design = make_design()
        parts = [
            simulate_many(design, GRID, 100, 123, rep_start=start)
            for start in (0, 100, 200)
        ]
        left = parts[0].merge(parts[1]).merge(parts[2])
        right = parts[0].merge(parts[1].merge(parts[2]))
        swapped = parts[2].merge(parts[0]).merge(parts[1])
        assert left == right == swapped

    def test_block_size_and_workers_do_not_matter(self):
        design = make_design()
        fine = simulate_many(design, GRID, 300, 123, block_size=32)
        coarse = simulate_many(design, GRID, 300, 123, block_size=4096)
        para = simulate_many(design, GRID, 300, 123, workers=2, block_size=64)
        assert fine == coarse == para

    def test_incompatible_summaries_refuse(self):
        design = make_design()
        a = simulate_many(design, GRID, 50, 123)
        b = simulate_many(design, GRID, 50, 124)
        with pytest.raises(ValueError, match="master_seed"):
            a.merge(b)


class TestSingleReplication:
    def test_summary_equals_trajectory_stats(self):
        design = make_design()
        summary = simulate_many(design, GRID, 1, 9)
        traj = run_trial(design, GRID[-1], GRID, derive_stream(9, 0))
        for snap in traj.snapshots:
            assert summary.count(snap.n, "overall", ()) == 1
            assert summary.mean(snap.n, "overall", ()) == snap.overall
            for flat, d in enumerate(snap.strata):
                assert summary.mean(snap.n, "stratum", (flat,)) == d
                assert summary.mean_sq(snap.n, "stratum", (flat,)) == d**2


class TestDerivedStatistics:
    def test_moments_match_expanded_values(self, base_summary):
        values, counts = base_summary.histogram(60, "stratum", (0,))
        expanded = np.repeat(values, counts)
        assert base_summary.count(60, "stratum", (0,)) == expanded.size
        assert base_summary.mean(60, "stratum", (0,)) == pytest.approx(expanded.mean())
        assert base_summary.mean_sq(60, "stratum", (0,)) == pytest.approx(
            np.mean(expanded**2)
        )
        assert base_summary.abs_moment(60, "stratum", (0,), 1) == pytest.approx(
            np.mean(np.abs(expanded))
        )
        assert base_summary.abs_moment(60, "stratum", (0,), 1.5) == pytest.approx(
            np.mean(np.abs(expanded) ** 1.5)
        )

    def test_quantiles_match_expanded_values(self, base_summary):
        values, counts = base_summary.histogram(60, "overall", ())
        expanded = np.repeat(values, counts)
        for q in (0.1, 0.5, 0.9):
            lo = np.quantile(expanded, q, method="inverted_cdf")
            assert base_summary.quantile(60, "overall", (), q) == pytest.approx(lo)

    def test_missing_cell_raises(self, base_summary):
        with pytest.raises(KeyError):
            base_summary.mean(60, "stratum", (99,))

    def test_multiarm_denominator(self):
        design = make_multiarm_design()
        summary = simulate_many(design, (30,), 50, 5)
        values, _ = summary.histogram(30, "stratum", (1, 0))
        assert np.all(np.abs(values * 3 - np.round(values * 3)) < 1e-12)


class TestRetainedStrata:
    def test_only_requested_strata_kept(self):
        design = make_design()
        summary = simulate_many(design, GRID, 40, 3, retained_strata=(0, 2))
        assert summary.count(60, "stratum", (0,)) == 40
        with pytest.raises(KeyError):
            summary.count(60, "stratum", (1,))
        # margins and overall are always kept
        assert summary.count(60, "margin", (1, 1)) == 40


def test_summary_csv_contains_digest_and_header(tmp_path, base_summary):
    path = tmp_path / "summary.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        write_summary_csv(base_summary, f)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# design=") and "seed=123" in lines[0]
    assert lines[1] == "checkpoint_n,scope,index,count,mean,mean_abs,mean_sq,q50,q90,q99"
    assert len(lines) == 2 + 2 * 9
