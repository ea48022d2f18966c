"""Desk-scale scenarios shared by the CLI ``repro`` commands, scripts and tests.

Each scenario is a frozen dataclass of knobs plus a ``run_*`` function that
takes a seed and returns plain numbers, so callers can aggregate trials
however they like.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks, nn
from .data import DataBundle, Dataset
from .evaluation import (attack_success_rate, auprc, filter_and_retrain, ranking_from_scores,
                         target_id_baselines)
from .fit import cross_class_scores, identify_targets
from .influence import GAS, EstimatorConfig, LissaConfig, batch_influence
from .mitigation import MitigationConfig, mitigate
from .trainer import TrainConfig, derive_seed, train

TOY_ESTIMATORS = (
    EstimatorConfig("if", "none"), EstimatorConfig("if", "global"),
    EstimatorConfig("rp", "none"), EstimatorConfig("rp", "global"),
    EstimatorConfig("tracin", "none"), EstimatorConfig("tracin", "global"),
    EstimatorConfig("tracincp", "none"), EstimatorConfig("tracincp", "global"),
)


@dataclass(frozen=True)
class ToyRenormConfig:
    """Two overlapping Gaussian classes plus a far-off cluster labeled ``y_adv``."""

    n_clean: int = 200
    m: int = 20
    dim: int = 10
    separation: float = 1.0
    y_adv: int = 1
    model: nn.ModelSpec = nn.ModelSpec("mlp", 10, 2, (16,), "relu", 1e-3)
    train: TrainConfig = TrainConfig("adam", 0.01, "constant", 16, 20, 1, 0, record_batches=True)
    lissa: LissaConfig = LissaConfig()
    estimators: tuple[EstimatorConfig, ...] = TOY_ESTIMATORS

    def to_dict(self) -> dict:
        return {"n_clean": self.n_clean, "m": self.m, "dim": self.dim, "separation": self.separation,
                "y_adv": self.y_adv, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "lissa": asdict(self.lissa), "estimators": [e.label for e in self.estimators]}


def toy_bundle(cfg: ToyRenormConfig, seed: int) -> DataBundle:
    spec = attacks.DataSpec("gaussian_blobs", 2, cfg.dim, cfg.separation, cfg.n_clean)
    clean = attacks.make_clean_dataset(spec, derive_seed(seed, 0))
    return attacks.group_flip_attack(clean, cfg.m, cfg.y_adv, derive_seed(seed, 1), n_targets=1)


def run_toy_renorm(cfg: ToyRenormConfig, seed: int) -> dict[str, float]:
    """Adversarial-set AUPRC of every estimator for one attacked model and its target."""
    bundle = toy_bundle(cfg, seed)
    _, store, log = train(cfg.model, bundle.train, cfg.train.with_seed(derive_seed(seed, 2)))
    x, tid = bundle.targets.X[:1], bundle.targets.ids[:1]
    out = {}
    for est in cfg.estimators:
        if est.estimator == "if":
            est = replace(est, lissa=replace(cfg.lissa, seed=derive_seed(seed, 3)))
        v = batch_influence(store, bundle.train, x, tid, est, log)[0].values
        out[est.label] = auprc(v, bundle.train.is_adversarial).auprc
    return out


def summarize(trials: list[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation per key, in first-trial key order."""
    out = {}
    for key in trials[0]:
        vals = np.array([t[key] for t in trials], dtype=np.float64)
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = (float(vals.mean()), sd)
    return out


@dataclass(frozen=True)
class BackdoorConfig:
    """Two-class 8x8 images with a corner-pixel backdoor."""

    n: int = 1000
    n_test: int = 400
    noise: float = 0.1
    jitter: float = 0.75
    keepout: float = 2.5
    min_separation: float = 1.5
    bump_width: tuple[float, float] = (0.5, 0.9)
    trigger: attacks.TriggerSpec = attacks.TriggerSpec("four_pixel", 2.0)
    rate: float = 0.015
    y_targ: int = 0
    y_adv: int = 1
    n_targets: int = 10
    n_analyzed: int = 100
    kappa: int = 5
    model: nn.ModelSpec = nn.ModelSpec("mlp", 64, 2, (32,), "relu", 1e-3)
    # plain SGD: adaptive steps make the poison gradients swing between checkpoints
    train: TrainConfig = TrainConfig("sgd", 0.1, "constant", 32, 20, 1, 0)
    estimator: EstimatorConfig = GAS
    mitigation: MitigationConfig = field(default_factory=lambda: MitigationConfig(initial_cutoff=2.0))

    def to_dict(self) -> dict:
        m = self.mitigation
        return {"n": self.n, "n_test": self.n_test, "noise": self.noise, "jitter": self.jitter,
                "keepout": self.keepout, "min_separation": self.min_separation,
                "bump_width": list(self.bump_width), "trigger": self.trigger.to_dict(),
                "rate": self.rate, "y_targ": self.y_targ, "y_adv": self.y_adv, "n_targets": self.n_targets,
                "n_analyzed": self.n_analyzed, "kappa": self.kappa, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "estimator": self.estimator.to_dict(),
                "mitigation": {"initial_cutoff": m.initial_cutoff, "anneal_step": m.anneal_step,
                               "anneal_step_count": m.anneal_step_count,
                               "max_removed_fraction": m.max_removed_fraction,
                               "max_iterations": m.max_iterations}}


def _grid_spec(cfg: BackdoorConfig) -> attacks.DataSpec:
    return attacks.DataSpec("grid_images", 2, n=cfg.n, n_test=cfg.n_test, noise=cfg.noise, jitter=cfg.jitter,
                            keepout=cfg.keepout, min_separation=cfg.min_separation,
                            bump_width=tuple(cfg.bump_width), height=cfg.trigger.height, width=cfg.trigger.width)


@dataclass
class BackdoorRun:
    bundle: DataBundle
    trigger: attacks.TriggerSpec
    store: object
    batch_log: object
    params: np.ndarray
    analysis_X: np.ndarray
    analysis_ids: np.ndarray
    is_target: np.ndarray


def backdoor_run(cfg: BackdoorConfig, seed: int) -> BackdoorRun:
    """Build the attacked data, train on it and assemble the analysis set.

    Three times ``n_targets`` triggered candidates are drawn; the analysis
    set holds ``n_targets`` of them, preferring those the attacked model
    actually predicts as ``y_adv`` (in id order), followed by the first
    ``n_analyzed - n_targets`` clean test instances.
    """
    clean = attacks.make_clean_dataset(_grid_spec(cfg), derive_seed(seed, 0))
    trig = replace(cfg.trigger, noise_seed=derive_seed(seed, 1))
    bundle = attacks.backdoor_attack(clean, trig, cfg.rate, cfg.y_targ, cfg.y_adv, derive_seed(seed, 2),
                                     3 * cfg.n_targets)
    params, store, log = train(cfg.model, bundle.train, cfg.train.with_seed(derive_seed(seed, 3)))
    hit = nn.predict(cfg.model, params, bundle.targets.X) == cfg.y_adv
    pick = np.sort(np.r_[np.flatnonzero(hit), np.flatnonzero(~hit)][:cfg.n_targets])
    bundle = replace(bundle, targets=bundle.targets.subset(pick))
    k_clean = cfg.n_analyzed - cfg.n_targets
    X = np.vstack([bundle.targets.X, bundle.test.X[:k_clean]])
    ids = np.concatenate([bundle.targets.ids, bundle.test.ids[:k_clean]])
    is_target = np.r_[np.ones(cfg.n_targets, bool), np.zeros(k_clean, bool)]
    return BackdoorRun(bundle, trig, store, log, params.values, X, ids, is_target)


def unanalyzed_triggered(cfg: BackdoorConfig, run: BackdoorRun):
    """Triggered copies of every y_targ test instance outside the analysis set."""
    k_clean = cfg.n_analyzed - cfg.n_targets
    rest = replace(run.bundle, test=run.bundle.test.subset(np.arange(k_clean, len(run.bundle.test))))
    return attacks.triggered(rest, run.trigger, cfg.y_targ)


def run_target_id(cfg: BackdoorConfig, seed: int, run: BackdoorRun | None = None) -> dict[str, float]:
    """Target-identification AUPRC of FIT and the four baselines, plus the attack's success rates."""
    run = run or backdoor_run(cfg, seed)
    report = identify_targets(run.store, run.bundle.train, run.analysis_X, run.analysis_ids, cfg.estimator,
                              cfg.kappa)
    out = {"FIT-" + cfg.estimator.label: auprc(cross_class_scores(report, run.analysis_ids), run.is_target).auprc}
    base = target_id_baselines(run.store, run.bundle.train, run.analysis_X, cfg.kappa, derive_seed(seed, 4))
    for name, s in base.items():
        out[name] = auprc(s, run.is_target).auprc
    out["target_asr"] = attack_success_rate(cfg.model, run.params, run.bundle.targets)
    out["overall_asr"] = attack_success_rate(cfg.model, run.params, unanalyzed_triggered(cfg, run))
    return out


def run_mitigation(cfg: BackdoorConfig, seed: int, run: BackdoorRun | None = None) -> dict:
    """Sanitize against one randomly chosen target of the attack."""
    run = run or backdoor_run(cfg, seed)
    train_set = run.bundle.train
    rng = np.random.default_rng(derive_seed(seed, 5))
    k = int(rng.integers(len(run.bundle.targets)))
    x, tid = run.bundle.targets.X[k], int(run.bundle.targets.ids[k])
    mcfg = replace(cfg.mitigation, estimator=cfg.estimator, train=cfg.train.with_seed(derive_seed(seed, 6)))
    outcome = mitigate(run.store, train_set, x, mcfg, batch_log=run.batch_log)
    removed = np.isin(train_set.ids, outcome.removed_ids)
    adv = train_set.is_adversarial
    rest = unanalyzed_triggered(cfg, run)
    return {
        "status": outcome.status,
        "iterations": outcome.iterations,
        "analyzed_target": tid,
        "adv_removed": float(removed[adv].mean()),
        "clean_removed": float(removed[~adv].mean()),
        "target_pred": int(nn.predict(cfg.model, outcome.final_params, x)[0]),
        "adversarial_label": outcome.adversarial_label,
        "overall_asr_before": attack_success_rate(cfg.model, run.params, rest),
        "overall_asr_after": attack_success_rate(cfg.model, outcome.final_params, rest),
        "outcome": outcome,
    }


def availability_setup(cfg: BackdoorConfig, seed: int) -> tuple[Dataset, np.ndarray, object, object]:
    """A clean model and a triggered y_adv test instance it predicts as y_adv.

    Returns (training set, target features, store, batch log).
    """
    clean = attacks.make_clean_dataset(_grid_spec(cfg), derive_seed(seed, 0))
    trig = replace(cfg.trigger, noise_seed=derive_seed(seed, 1))
    bundle = attacks.availability_attack(clean, trig, cfg.y_adv, derive_seed(seed, 2), cfg.n_targets)
    _, store, log = train(cfg.model, bundle.train, cfg.train.with_seed(derive_seed(seed, 3)))
    preds = nn.predict(cfg.model, store.final, bundle.targets.X)
    x = bundle.targets.X[int(np.flatnonzero(preds == cfg.y_adv)[0])]
    return bundle.train, x, store, log


@dataclass(frozen=True)
class FilteringConfig:
    """Remove the training instances most supportive of a test point and watch it flip."""

    n: int = 200
    dim: int = 5
    separation: float = 2.0
    percentages: tuple[float, ...] = (0.0, 5.0, 10.0, 20.0, 30.0)
    retrain_count: int = 5
    model: nn.ModelSpec = nn.ModelSpec("linear", 5, 2, (), "relu", 1e-2)
    train: TrainConfig = TrainConfig("sgd", 0.1, "constant", 16, 10, 1, 0)
    estimators: tuple[EstimatorConfig, ...] = (
        EstimatorConfig("tracincp", "none"), EstimatorConfig("tracincp", "global"))

    def to_dict(self) -> dict:
        return {"n": self.n, "dim": self.dim, "separation": self.separation,
                "percentages": list(self.percentages), "retrain_count": self.retrain_count,
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "estimators": [e.label for e in self.estimators]}


def run_filtering(cfg: FilteringConfig, seed: int, jobs: int = 1) -> dict[str, dict[float, float]]:
    """Misclassification rate of one correctly classified test point per removal percentage."""
    spec = attacks.DataSpec("gaussian_blobs", 2, cfg.dim, cfg.separation, cfg.n, n_test=50)
    bundle = attacks.make_clean_dataset(spec, derive_seed(seed, 0))
    ds = bundle.train
    tcfg = cfg.train.with_seed(derive_seed(seed, 1))
    params, store, _ = train(cfg.model, ds, tcfg)
    test = bundle.test
    pred = nn.predict(cfg.model, params, test.X)
    j = int(np.flatnonzero(pred == test.y)[0])
    z = (test.X[j], int(test.y[j]))
    out = {}
    rng = np.random.default_rng(derive_seed(seed, 2))
    rankings = {"random": rng.permutation(ds.ids)}
    for est in cfg.estimators:
        v = batch_influence(store, ds, test.X[j:j + 1], test.ids[j:j + 1], est)[0].values
        rankings[est.label] = ranking_from_scores(v, ds.ids)
    for name, ranking in rankings.items():
        out[name] = filter_and_retrain(cfg.model, ds, ranking, cfg.percentages, cfg.retrain_count, z, tcfg, jobs)
    return out
