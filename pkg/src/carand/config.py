"""Run configuration: JSON schema, validation, and design presets.

The config file is one JSON document with sections design / simulation /
verification / output. Validation collects every error it can find before
raising, so a broken file reports all problems at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .covariates import CovariateSpec, StratumDistribution
from .imbalance import WeightConfig
from .montecarlo import Tolerances
from .policies import (
    DesignConfig,
    EfronCoin,
    HeavyTailCoin,
    LogisticCoin,
    MultiArmProbs,
)

SIMULATION_DEFAULTS = {
    "R": 10_000,
    "n_grid": (1000, 4000),
    "seed": 20260810,
    "workers": 1,
    "trajectory_reps": 8,
}

PRESET_NAMES = ("pocock-simon", "hu-hu", "stratified", "efron-overall", "multiarm-ps")


class ConfigError(ValueError):
    """Carries every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class RunConfig:
    design: DesignConfig
    n_grid: tuple[int, ...] = SIMULATION_DEFAULTS["n_grid"]
    replications: int = SIMULATION_DEFAULTS["R"]
    seed: int = SIMULATION_DEFAULTS["seed"]
    workers: int = SIMULATION_DEFAULTS["workers"]
    retained_strata: tuple[int, ...] | None = None
    tolerances: Tolerances = field(default_factory=Tolerances)
    out_dir: str = "out"
    trajectory_reps: int = SIMULATION_DEFAULTS["trajectory_reps"]


def _get(doc: dict, path: str, default=None):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _policy_from_dict(section: dict, errors: list[str]):
    ptype = section.get("type", "efron")
    try:
        if ptype == "efron":
            return EfronCoin(p=float(section.get("p", 0.75)))
        if ptype == "logistic":
            return LogisticCoin(beta=float(section.get("beta", 1.0)))
        if ptype == "heavytail":
            return HeavyTailCoin(
                a=float(section.get("a", 2.0)), q_min=float(section.get("q_min", 0.25))
            )
        if ptype == "multiarm":
            if "probs" not in section:
                errors.append("design.policy: multiarm policy needs `probs`")
                return None
            probs = MultiArmProbs(tuple(float(v) for v in section["probs"]))
            arms = section.get("arms")
            if arms is not None and int(arms) != probs.arms:
                errors.append(
                    f"design.policy: arms={arms} but probs has {probs.arms} entries"
                )
            return probs
        errors.append(
            f"design.policy.type: unknown type {ptype!r} "
            "(expected efron|logistic|heavytail|multiarm)"
        )
    except (TypeError, ValueError) as exc:
        errors.append(f"design.policy: {exc}")
    return None


def design_from_dict(doc: dict, errors: list[str]) -> DesignConfig | None:
    spec = None
    levels = _get(doc, "covariates.levels")
    if levels is None:
        errors.append("design.covariates.levels: required")
    else:
        try:
            spec = CovariateSpec(tuple(levels))
        except (TypeError, ValueError) as exc:
            errors.append(f"design.covariates.levels: {exc}")

    dist = None
    probs = _get(doc, "covariates.probs", "uniform")
    if spec is not None:
        try:
            if probs == "uniform":
                dist = StratumDistribution.uniform(spec.stratum_count)
            else:
                dist = StratumDistribution(probs)
        except (TypeError, ValueError) as exc:
            errors.append(f"design.covariates.probs: {exc}")

    weights = None
    wsec = doc.get("weights")
    if wsec is None:
        errors.append("design.weights: required (keys w_o, w_m, w_s)")
    else:
        try:
            weights = WeightConfig(
                overall=wsec.get("w_o", 0.0),
                margins=tuple(wsec.get("w_m", ())),
                stratum=wsec.get("w_s", 0.0),
            )
        except (TypeError, ValueError) as exc:
            errors.append(f"design.weights: {exc}")

    policy = _policy_from_dict(doc.get("policy", {}), errors)

    if None in (spec, dist, weights, policy):
        return None
    try:
        return DesignConfig(spec=spec, dist=dist, weights=weights, policy=policy)
    except ValueError as exc:
        errors.append(f"design: {exc}")
        return None


def config_from_dict(doc: dict) -> RunConfig:
    errors: list[str] = []
    design = None
    if "design" not in doc:
        errors.append("design: required section")
    else:
        design = design_from_dict(doc["design"], errors)

    sim = doc.get("simulation", {})
    n_grid = tuple(int(v) for v in sim.get("n_grid", SIMULATION_DEFAULTS["n_grid"]))
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])) or (n_grid and n_grid[0] < 1):
        errors.append(f"simulation.n_grid: must be ascending positive, got {list(n_grid)}")
    replications = int(sim.get("R", SIMULATION_DEFAULTS["R"]))
    if replications < 1:
        errors.append("simulation.R: must be at least 1")
    seed = int(sim.get("seed", SIMULATION_DEFAULTS["seed"]))
    workers = int(sim.get("workers", SIMULATION_DEFAULTS["workers"]))
    if workers < 1:
        errors.append("simulation.workers: must be at least 1")
    trajectory_reps = int(
        sim.get("trajectory_reps", SIMULATION_DEFAULTS["trajectory_reps"])
    )

    retained = sim.get("retained_strata")
    if retained is not None:
        retained = tuple(int(v) for v in retained)
        if design is not None and any(
            not 0 <= s < design.spec.stratum_count for s in retained
        ):
            errors.append(
                f"simulation.retained_strata: indices out of range "
                f"[0, {design.spec.stratum_count})"
            )

    ver = doc.get("verification", {})
    tolerances = Tolerances(
        bounded_band=tuple(ver.get("bounded_band", Tolerances.bounded_band)),
        growth_band_factor=tuple(
            ver.get("growth_band_factor", Tolerances.growth_band_factor)
        ),
        ks_threshold=float(ver.get("ks_threshold", Tolerances.ks_threshold)),
        sigma2_z=float(ver.get("sigma2_z", Tolerances.sigma2_z)),
    )

    out_dir = str(_get(doc, "output.out_dir", "out"))

    if errors or design is None:
        raise ConfigError(errors or ["design: could not be built"])
    return RunConfig(
        design=design,
        n_grid=n_grid,
        replications=replications,
        seed=seed,
        workers=workers,
        retained_strata=retained,
        tolerances=tolerances,
        out_dir=out_dir,
        trajectory_reps=trajectory_reps,
    )


def config_to_dict(cfg: RunConfig) -> dict:
    design = cfg.design
    policy = design.policy
    if isinstance(policy, EfronCoin):
        pol = {"type": "efron", "p": policy.p}
    elif isinstance(policy, LogisticCoin):
        pol = {"type": "logistic", "beta": policy.beta}
    elif isinstance(policy, HeavyTailCoin):
        pol = {"type": "heavytail", "a": policy.a, "q_min": policy.q_min}
    else:
        pol = {"type": "multiarm", "probs": list(policy.probs), "arms": policy.arms}
    return {
        "design": {
            "covariates": {
                "levels": list(design.spec.levels),
                "probs": design.dist.probs.tolist(),
            },
            "weights": {
                "w_o": design.weights.overall,
                "w_m": list(design.weights.margins),
                "w_s": design.weights.stratum,
            },
            "policy": pol,
        },
        "simulation": {
            "n_grid": list(cfg.n_grid),
            "R": cfg.replications,
            "seed": cfg.seed,
            "workers": cfg.workers,
            "retained_strata": (
                None if cfg.retained_strata is None else list(cfg.retained_strata)
            ),
            "trajectory_reps": cfg.trajectory_reps,
        },
        "verification": {
            "bounded_band": list(cfg.tolerances.bounded_band),
            "growth_band_factor": list(cfg.tolerances.growth_band_factor),
            "ks_threshold": cfg.tolerances.ks_threshold,
            "sigma2_z": cfg.tolerances.sigma2_z,
        },
        "output": {"out_dir": cfg.out_dir},
    }


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file; reports every problem found."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8"
    )


def preset(name: str, levels=(2, 2)) -> RunConfig:
    """Named design presets on a given covariate grid (uniform strata).

    pocock-simon  marginal-only weights, Efron coin
    hu-hu         mixed weights with positive stratum weight (0.1/0.6/0.3 split)
    stratified    all weight within-stratum
    efron-overall all weight on the overall difference
    multiarm-ps   3-arm marginal-only design, rank probabilities (0.6, 0.3, 0.1)
    """
    spec = CovariateSpec(tuple(levels))
    ncov = spec.covariate_count
    dist = StratumDistribution.uniform(spec.stratum_count)
    coin = EfronCoin(p=0.75)
    extra: dict = {}
    if name == "pocock-simon":
        weights = WeightConfig(0.0, (1.0 / ncov,) * ncov, 0.0)
        policy = coin
    elif name == "hu-hu":
        weights = WeightConfig(0.1, (0.6 / ncov,) * ncov, 0.3)
        policy = coin
    elif name == "stratified":
        weights = WeightConfig(0.0, (0.0,) * ncov, 1.0)
        policy = coin
    elif name == "efron-overall":
        weights = WeightConfig(1.0, (0.0,) * ncov, 0.0)
        policy = coin
    elif name == "multiarm-ps":
        weights = WeightConfig(0.0, (1.0 / ncov,) * ncov, 0.0)
        policy = MultiArmProbs((0.6, 0.3, 0.1))
        extra["replications"] = 5000
    else:
        raise ConfigError(
            [f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}"]
        )
    design = DesignConfig(spec=spec, dist=dist, weights=weights, policy=policy)
    return RunConfig(design=design, **extra)
