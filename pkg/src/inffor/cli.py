"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(divergence, degenerate robust scale), 4 mitigation safeguard tripped.
Set ``INFFOR_LOG`` (e.g. ``INFO``) for progress logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, experiments, nn
from .config import RunConfig, load_run_config
from .data import DataBundle, load_bundle, save_bundle
from .errors import ConfigError, InfforError, NumericalError
from .evaluation import attack_success_rate, auprc, target_id_baselines
from .fit import cross_class_scores, identify_targets
from .influence import EstimatorConfig, batch_influence
from .mitigation import SAFEGUARD_TRIPPED, mitigate
from .trainer import derive_seed, load_batch_log, load_checkpoints, save_checkpoints, train

log = logging.getLogger("inffor")

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SAFEGUARD = 2, 3, 4

_ESTIMATOR_ALIASES = {"gas": ("tracincp", "global"), "gas-l": ("tracincp", "layerwise")}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None)
    if not out:
        raise ConfigError("out: an output directory is required (--out or the config's 'out')")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(args) -> RunConfig:
    """Config file plus command-line overrides."""
    path = args.config
    if path is None and getattr(args, "ckpts", None):
        path = Path(args.ckpts) / "config.json"
    if path is None:
        raise ConfigError("config: --config is required")
    cfg = load_run_config(path)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    est = cfg.estimator
    if getattr(args, "estimator", None):
        name, renorm = _ESTIMATOR_ALIASES.get(args.estimator, (args.estimator, est.renorm))
        est = replace(est, estimator=name, renorm=renorm)
    if getattr(args, "renorm", None):
        est = replace(est, renorm=args.renorm)
    cfg = replace(cfg, estimator=EstimatorConfig.from_dict(est.to_dict()))
    if getattr(args, "kappa", None) is not None:
        cfg = replace(cfg, kappa=args.kappa)
    return cfg


def _clean_bundle(cfg: RunConfig) -> DataBundle:
    return attacks.make_clean_dataset(cfg.data, derive_seed(cfg.seed, 0))


def _attacked_bundle(cfg: RunConfig, clean: DataBundle) -> DataBundle:
    a = cfg.attack
    seed = derive_seed(cfg.seed, 1)
    if a.kind == "none":
        return clean
    if a.kind == "group_flip":
        return attacks.group_flip_attack(clean, a.m, a.y_adv, seed, a.n_targets)
    if a.kind == "backdoor":
        return attacks.backdoor_attack(clean, a.trigger, a.rate, a.y_targ, a.y_adv, seed, a.n_targets)
    if a.kind == "availability":
        return attacks.availability_attack(clean, a.trigger, a.y_adv, seed, a.n_targets)
    if clean.test is None or not len(clean.test):
        raise ConfigError("attack: single_target_poison takes its target from the test split, which is empty")
    idx = int(np.flatnonzero(clean.test.y == a.y_targ)[0])
    return attacks.single_target_poison(clean, clean.test.X[idx], a.m, a.y_adv, a.noise, seed, y_targ=a.y_targ,
                                        check=(cfg.model, cfg.train))


def _load_run(args):
    cfg = _resolve(args)
    ckpts = Path(args.ckpts)
    store = load_checkpoints(ckpts)
    batch_log = load_batch_log(ckpts)
    bundle = load_bundle(Path(args.data) if getattr(args, "data", None) else ckpts / "data")
    return cfg, store, batch_log, bundle


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    save_bundle(_clean_bundle(cfg), out)
    cfg.dump(out / "config.json")
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    clean = load_bundle(args.data) if args.data else _clean_bundle(cfg)
    save_bundle(_attacked_bundle(cfg, clean), out)
    cfg.dump(out / "config.json")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    bundle = load_bundle(args.data) if args.data else _attacked_bundle(cfg, _clean_bundle(cfg))
    tcfg = cfg.train.with_seed(derive_seed(cfg.seed, 2))
    params, store, batch_log = train(cfg.model, bundle.train, tcfg)
    save_checkpoints(store, out, batch_log)
    save_bundle(bundle, out / "data")
    cfg.dump(out / "config.json")
    test = bundle.test
    summary = {"train_size": len(bundle.train), "checkpoints": len(store),
               "test_accuracy": None if test is None or not len(test)
               else float(np.mean(nn.predict(cfg.model, params, test.X) == test.y))}
    _write_json(out / "train_summary.json", summary)
    return 0


def cmd_influence(args) -> int:
    if args.test_id is None:
        raise ConfigError("test_id: --test-id is required")
    cfg, store, batch_log, bundle = _load_run(args)
    x = bundle.lookup(args.test_id)
    iv = batch_influence(store, bundle.train, x[None, :], [args.test_id], cfg.estimator, batch_log, args.jobs)[0]
    if args.out:
        out = _out_dir(args)
        iv.to_csv(out / f"influence_{args.test_id}.csv")
        cfg.dump(out / "config.json")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["train_id", "value"])
        for i, v in zip(iv.train_ids, iv.values):
            w.writerow([int(i), repr(float(v))])
    return 0


def cmd_identify(args) -> int:
    cfg, store, batch_log, bundle = _load_run(args)
    out = _out_dir(args)
    X, ids = bundle.analysis_set()
    report = identify_targets(store, bundle.train, X, ids, cfg.estimator, cfg.kappa, batch_log=batch_log,
                              jobs=args.jobs)
    report.to_csv(out / "targets.csv")
    report.to_json(out / "targets.json")
    cfg.dump(out / "config.json")
    return 0


def _default_target(bundle: DataBundle, store) -> int:
    """First attack target the trained model predicts as y_adv, else the first target."""
    t = bundle.targets
    if t is None or not len(t):
        raise ConfigError("test_id: no --test-id given and the dataset has no attack targets")
    hit = np.flatnonzero(nn.predict(store.spec, store.final, t.X) == t.y_adv)
    return int(t.ids[hit[0] if hit.size else 0])


def cmd_mitigate(args) -> int:
    cfg, store, batch_log, bundle = _load_run(args)
    out = _out_dir(args)
    tid = args.test_id if args.test_id is not None else _default_target(bundle, store)
    mcfg = cfg.mitigation_config()
    mcfg = replace(mcfg, train=mcfg.train.with_seed(derive_seed(cfg.seed, 2)))
    outcome = mitigate(store, bundle.train, bundle.lookup(tid), mcfg, batch_log=batch_log)
    doc = outcome.to_dict()
    doc["test_id"] = int(tid)
    _write_json(out / "mitigation.json", doc)
    cfg.dump(out / "config.json")
    if outcome.status == SAFEGUARD_TRIPPED:
        print(f"safeguard tripped: removing {len(outcome.attempted_ids)} more instances would exceed "
              f"{cfg.mitigation.max_removed_fraction} of the training set", file=sys.stderr)
        return EXIT_SAFEGUARD
    return 0


def cmd_evaluate(args) -> int:
    cfg, store, batch_log, bundle = _load_run(args)
    out = _out_dir(args)
    spec, theta = store.spec, store.final
    metrics: dict = {"estimator": cfg.estimator.label}
    if bundle.test is not None and len(bundle.test):
        metrics["test_accuracy"] = float(np.mean(nn.predict(spec, theta, bundle.test.X) == bundle.test.y))
    if bundle.targets is not None and len(bundle.targets):
        metrics["target_asr"] = attack_success_rate(spec, theta, bundle.targets)
    adv = bundle.train.is_adversarial
    if adv.any() and not adv.all() and bundle.targets is not None:
        tid = args.test_id if args.test_id is not None else _default_target(bundle, store)
        iv = batch_influence(store, bundle.train, bundle.lookup(tid)[None, :], [tid], cfg.estimator, batch_log,
                             args.jobs)[0]
        curve = auprc(iv.values, adv)
        curve.to_csv(out / "adv_pr_curve.csv")
        metrics["adv_auprc"] = {"test_id": int(tid), "value": curve.auprc}
    if bundle.targets is not None and bundle.test is not None and len(bundle.test):
        X, ids = bundle.analysis_set()
        is_target = np.isin(ids, bundle.targets.ids)
        report = identify_targets(store, bundle.train, X, ids, cfg.estimator, cfg.kappa, batch_log=batch_log,
                                  jobs=args.jobs)
        scores = {"FIT-" + cfg.estimator.label: cross_class_scores(report, ids)}
        scores.update(target_id_baselines(store, bundle.train, X, cfg.kappa, derive_seed(cfg.seed, 4)))
        metrics["target_auprc"] = {name: auprc(s, is_target).auprc for name, s in scores.items()}
    _write_json(out / "metrics.json", metrics)
    cfg.dump(out / "config.json")
    return 0


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _trial_seeds(args) -> list[int]:
    base = 0 if args.seed is None else args.seed
    return [derive_seed(base, t) for t in range(args.trials)]


def cmd_repro(args) -> int:
    if args.trials < 1:
        raise ConfigError("trials: must be >= 1")
    out = _out_dir(args)
    seeds = _trial_seeds(args)
    snapshot = {"scenario": args.scenario, "seed": 0 if args.seed is None else args.seed, "trials": args.trials}
    if args.scenario == "toy-renorm":
        cfg = experiments.ToyRenormConfig()
        trials = []
        for s in seeds:
            trials.append(experiments.run_toy_renorm(cfg, s))
            log.info("toy-renorm trial %d/%d done", len(trials), len(seeds))
        summary = experiments.summarize(trials)
        _write_table(out / "auprc.csv", ["estimator", "mean_auprc", "std_auprc", "trials"],
                     [[k, m, sd, len(trials)] for k, (m, sd) in summary.items()])
        _write_table(out / "trials.csv", ["seed", *trials[0].keys()], [[s, *t.values()] for s, t in zip(seeds, trials)])
    elif args.scenario == "target-id":
        cfg = experiments.BackdoorConfig()
        trials = [experiments.run_target_id(cfg, s) for s in seeds]
        summary = experiments.summarize(trials)
        _write_table(out / "target_auprc.csv", ["method", "mean", "std", "trials"],
                     [[k, m, sd, len(trials)] for k, (m, sd) in summary.items()])
    elif args.scenario == "mitigation":
        cfg = experiments.BackdoorConfig()
        rows = []
        for s in seeds:
            r = experiments.run_mitigation(cfg, s)
            r.pop("outcome")
            rows.append([s, *r.values()])
        _write_table(out / "mitigation.csv", ["seed", *r.keys()], rows)
    else:
        cfg = experiments.FilteringConfig()
        rows = []
        for s in seeds:
            for name, curve in experiments.run_filtering(cfg, s, args.jobs).items():
                rows.extend([s, name, p, rate] for p, rate in curve.items())
        _write_table(out / "filtering.csv", ["seed", "ranking", "percent_removed", "misclassification_rate"], rows)
    snapshot["config"] = cfg.to_dict()
    _write_json(out / "config.json", snapshot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inffor", description="Influence estimation, target identification and sanitization.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpts=False, est=False):
        sp.add_argument("--config", help="run config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config's master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for influence and retraining")
        if ckpts:
            sp.add_argument("--ckpts", required=True, help="checkpoint directory written by `train`")
            sp.add_argument("--data", help="dataset directory (default: <ckpts>/data)")
        if est:
            sp.add_argument("--estimator", choices=["if", "rp", "tracin", "tracincp", "gas", "gas-l"])
            sp.add_argument("--renorm", choices=["none", "global", "layerwise"])
            sp.add_argument("--kappa", type=int)
            sp.add_argument("--test-id", type=int, dest="test_id")
        return sp

    common(sub.add_parser("gen-data", help="generate a clean dataset")).set_defaults(func=cmd_gen_data)
    sp = common(sub.add_parser("attack", help="apply the configured attack"))
    sp.add_argument("--data", help="clean dataset directory (default: generate from the config)")
    sp.set_defaults(func=cmd_attack)
    sp = common(sub.add_parser("train", help="train and checkpoint a model"))
    sp.add_argument("--data", help="dataset directory (default: generate and attack from the config)")
    sp.set_defaults(func=cmd_train)
    common(sub.add_parser("influence", help="influence vector of one test instance"), True, True) \
        .set_defaults(func=cmd_influence)
    common(sub.add_parser("identify", help="rank the analysis set by tail heaviness"), True, True) \
        .set_defaults(func=cmd_identify)
    common(sub.add_parser("mitigate", help="sanitize the training set against one target"), True, True) \
        .set_defaults(func=cmd_mitigate)
    common(sub.add_parser("evaluate", help="accuracy, ASR and AUPRC metrics"), True, True) \
        .set_defaults(func=cmd_evaluate)
    sp = common(sub.add_parser("repro", help="run a desk-scale experiment"))
    sp.add_argument("scenario", choices=["toy-renorm", "filtering", "mitigation", "target-id"])
    sp.add_argument("--trials", type=int, default=30)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    level = os.environ.get("INFFOR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InfforError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
