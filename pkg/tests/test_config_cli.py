import json
import os

import numpy as np
import pytest

from carand.cli import main
from carand.config import (
    ConfigError,
    config_from_dict,
    config_to_dict,
    load_config,
    preset,
    save_config,
)
from carand.policies import EfronCoin, MultiArmProbs

MINIMAL = {
    "design": {
        "covariates": {"levels": [2, 2]},
        "weights": {"w_o": 0.0, "w_m": [0.5, 0.5], "w_s": 0.0},
    }
}


class TestConfigParsing:
    def test_minimal_config_fills_defaults(self):
        cfg = config_from_dict(MINIMAL)
        assert cfg.n_grid == (1000, 4000)
        assert cfg.replications == 10_000
        assert cfg.workers == 1
        assert isinstance(cfg.design.policy, EfronCoin)
        assert np.allclose(cfg.design.dist.probs, 0.25)

    def test_weight_sum_error_names_constraint(self):
        doc = {
            "design": {
                "covariates": {"levels": [2, 2]},
                "weights": {"w_o": 0.0, "w_m": [0.5, 0.4], "w_s": 0.0},
            }
        }
        with pytest.raises(ConfigError, match="design.weights.*sum"):
            config_from_dict(doc)

    def test_all_errors_collected(self):
        doc = {
            "design": {
                "covariates": {"levels": [2, 1], "probs": [0.5, 0.5, 0.1]},
                "weights": {"w_o": 0.5, "w_m": [0.2], "w_s": 0.0},
                "policy": {"type": "wat"},
            },
            "simulation": {"n_grid": [400, 200], "R": 0},
        }
        with pytest.raises(ConfigError) as err:
            config_from_dict(doc)
        text = "\n".join(err.value.errors)
        assert "design.covariates.levels" in text
        assert "design.weights" in text
        assert "design.policy.type" in text
        assert "simulation.n_grid" in text
        assert "simulation.R" in text

    def test_multiarm_policy(self):
        doc = {
            "design": {
                "covariates": {"levels": [2, 2]},
                "weights": {"w_o": 0.0, "w_m": [0.5, 0.5], "w_s": 0.0},
                "policy": {"type": "multiarm", "probs": [0.6, 0.3, 0.1], "arms": 3},
            }
        }
        cfg = config_from_dict(doc)
        assert isinstance(cfg.design.policy, MultiArmProbs)
        assert cfg.design.arms == 3

    def test_roundtrip_identity(self):
        cfg = preset("hu-hu")
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_save_load_roundtrip(self, tmp_path):
        cfg = preset("multiarm-ps", levels=(2, 3))
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_parse_error_has_line_context(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "design": }\n', encoding="utf-8")
        with pytest.raises(ConfigError, match=r":2:"):
            load_config(path)


class TestPresets:
    def test_pocock_simon_2x2(self):
        cfg = preset("pocock-simon", (2, 2))
        w = cfg.design.weights
        assert w.stratum == 0.0 and w.overall == 0.0
        assert w.margins == (0.5, 0.5)
        assert cfg.design.policy == EfronCoin(0.75)

    def test_hu_hu_has_positive_stratum_weight(self):
        w = preset("hu-hu").design.weights
        assert w.stratum == pytest.approx(0.3)
        assert w.margins == (0.3, 0.3)
        assert w.overall == pytest.approx(0.1)

    def test_stratified_and_efron_overall(self):
        assert preset("stratified").design.weights.stratum == 1.0
        assert preset("efron-overall").design.weights.overall == 1.0

    def test_multiarm_preset(self):
        cfg = preset("multiarm-ps")
        assert cfg.design.arms == 3
        assert cfg.design.policy.probs == (0.6, 0.3, 0.1)
        assert cfg.replications == 5000

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("nope")


@pytest.fixture
def small_config(tmp_path):
    doc = {
        "design": {
            "covariates": {"levels": [2, 2]},
            "weights": {"w_o": 0.1, "w_m": [0.3, 0.3], "w_s": 0.3},
            "policy": {"type": "efron", "p": 0.75},
        },
        "simulation": {"n_grid": [50, 200], "R": 300, "seed": 6, "trajectory_reps": 2},
        "output": {"out_dir": str(tmp_path / "out")},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path, tmp_path / "out"


class TestCli:
    def test_classify_prints_prediction_table(self, capsys):
        code = main(["classify", "--preset", "pocock-simon", "--out-dir", "/tmp/carand-test-cls"])
        out = capsys.readouterr().out
        assert code == 0
        assert "sqrt_n" in out and "bounded" in out
        rows = [line for line in out.splitlines() if line.startswith("stratum")]
        assert len(rows) == 4 and all("sqrt_n" in r for r in rows)

    def test_oracle_prints_csv_table(self, capsys, tmp_path):
        code = main([
            "oracle", "--preset", "efron-overall", "--n", "3",
            "--stat", "abs_overall", "--r", "1", "--out-dir", str(tmp_path),
        ])
        out = capsys.readouterr().out.splitlines()
        assert code == 0
        assert out[0] == "n,stat,r,value"
        assert out[2].startswith("2,abs_overall,1,0.5")
        assert out[3].startswith("3,abs_overall,1,1.125")
        assert (tmp_path / "oracle.csv").exists()

    def test_oracle_guard_violation_fails_cleanly(self, capsys):
        code = main([
            "oracle", "--preset", "pocock-simon", "--levels", "3,3",
            "--n", "4", "--stat", "abs_overall",
        ])
        assert code == 2
        assert "guard" in capsys.readouterr().err

    def test_simulate_writes_csvs(self, small_config, capsys):
        path, out_dir = small_config
        assert main(["simulate", "--config", str(path)]) == 0
        summary = (out_dir / "summary.csv").read_text(encoding="utf-8")
        assert summary.startswith("# design=")
        assert "seed=6" in summary.splitlines()[0]
        traj = (out_dir / "trajectories.csv").read_text(encoding="utf-8").splitlines()
        assert traj[1] == "replication,checkpoint_n,scope,index,value"

    def test_seed_override_changes_output(self, small_config):
        path, out_dir = small_config
        main(["simulate", "--config", str(path), "--seed", "42"])
        assert "seed=42" in (out_dir / "summary.csv").read_text().splitlines()[0]

    def test_verify_exit_zero_on_sound_design(self, small_config, capsys):
        path, _ = small_config
        assert main(["verify", "--config", str(path)]) == 0
        assert "overall: PASS" in capsys.readouterr().out

    def test_verify_exit_one_on_failing_tolerances(self, small_config, tmp_path, capsys):
        path, _ = small_config
        doc = json.loads(path.read_text())
        doc["verification"] = {"bounded_band": [0.999999, 1.000001]}
        strict = tmp_path / "strict.json"
        strict.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["verify", "--config", str(strict)]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_verify_rejects_flat_grid(self, tmp_path, capsys):
        doc = dict(MINIMAL)
        doc["simulation"] = {"n_grid": [100, 150]}
        path = tmp_path / "flat.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["verify", "--config", str(path)]) == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_config_and_preset(self, capsys):
        assert main(["classify"]) == 2
        assert "config" in capsys.readouterr().err

    def test_workers_env_fallback(self, small_config, monkeypatch):
        path, out_dir = small_config
        monkeypatch.setenv("CARAND_WORKERS", "2")
        assert main(["simulate", "--config", str(path)]) == 0

    def test_config_and_preset_conflict(self, small_config, capsys):
        path, _ = small_config
        assert main(["classify", "--config", str(path), "--preset", "hu-hu"]) == 2
