"""Target identification by anomalous upper-tail influence.

For each analyzed test instance: compute its influence vector, standardize
it with median/Q over the training instances carrying its predicted label
(or over all training instances), take the kappa-th largest anomaly score
as its tail heaviness, and rank instances of the same predicted class by
heaviness, heaviest first.  Ties go to the smaller test id.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DegenerateScaleError
from .influence import EstimatorConfig, InfluenceVector, batch_influence
from .robust import anomaly_scores, median, q_estimator, tail_heaviness
from .trainer import BatchLog, CheckpointStore


@dataclass
class TargetScore:
    test_id: int
    predicted_label: int
    tail_heaviness: float
    rank: int = 0
    top_ids: list[int] = field(default_factory=list)
    top_scores: list[float] = field(default_factory=list)
    phase: int = 2


@dataclass
class TargetReport:
    estimator: str
    kappa: int
    per_class: bool
    entries: list[TargetScore]  # heaviest first, ties by smaller test id

    def by_id(self) -> dict[int, TargetScore]:
        return {e.test_id: e for e in self.entries}

    def heaviness(self, test_ids) -> np.ndarray:
        lookup = self.by_id()
        return np.array([lookup[int(i)].tail_heaviness for i in test_ids])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["test_id", "pred_label", "tail_heaviness", "rank", "estimator"])
            for e in self.entries:
                w.writerow([e.test_id, e.predicted_label, repr(float(e.tail_heaviness)), e.rank, self.estimator])

    def to_json(self, path) -> None:
        doc = {"estimator": self.estimator, "kappa": self.kappa, "per_class": self.per_class,
               "entries": [asdict(e) for e in self.entries]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def score_vector(iv: InfluenceVector, dataset: Dataset, kappa: int, per_class: bool) -> TargetScore:
    mask = dataset.y == iv.predicted_label if per_class else np.ones(len(dataset), bool)
    label = iv.predicted_label if per_class else None
    try:
        sc = anomaly_scores(iv.values, mask, class_label=label)
    except DegenerateScaleError as exc:
        raise DegenerateScaleError(exc.subset, f"test instance {iv.test_id}: {exc}") from exc
    if kappa > sc.scores.size:
        raise ConfigError(f"kappa: {kappa} exceeds the {sc.scores.size} training instances scored")
    ids = dataset.ids[sc.index]
    order = np.lexsort((ids, -sc.scores))[:kappa]
    return TargetScore(iv.test_id, iv.predicted_label, tail_heaviness(sc.scores, kappa),
                       top_ids=[int(i) for i in ids[order]], top_scores=[float(s) for s in sc.scores[order]])


def _assign_ranks(entries: list[TargetScore], per_class: bool) -> None:
    seen: dict = {}
    for e in entries:
        key = e.predicted_label if per_class else None
        seen[key] = seen.get(key, 0) + 1
        e.rank = seen[key]


def _ordered(entries):
    return sorted(entries, key=lambda e: (-e.tail_heaviness, e.test_id))


def identify_targets(store: CheckpointStore, dataset: Dataset, test_X, test_ids, cfg: EstimatorConfig,
                     kappa: int, per_class: bool = True, batch_log: BatchLog | None = None,
                     jobs: int = 1) -> TargetReport:
    if kappa < 1:
        raise ConfigError("kappa: must be >= 1")
    ivs = batch_influence(store, dataset, test_X, test_ids, cfg, batch_log, jobs)
    entries = _ordered([score_vector(iv, dataset, kappa, per_class) for iv in ivs])
    _assign_ranks(entries, per_class)
    return TargetReport(cfg.label, kappa, per_class, entries)


def two_phase_identify(store: CheckpointStore, dataset: Dataset, test_X, test_ids, coarse_iterations,
                       keep_fraction: float, cfg: EstimatorConfig, kappa: int, per_class: bool = True,
                       batch_log: BatchLog | None = None, jobs: int = 1) -> TargetReport:
    """Rank everything on a few checkpoints, then re-rank the heaviest fraction on all of them.

    Instances dropped after phase 1 follow the retained ones in phase-1
    order and keep their phase-1 heaviness (``phase == 1``).
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigError("keep_fraction: must be in (0, 1]")
    coarse_iterations = list(coarse_iterations or [])
    if not coarse_iterations:
        raise ConfigError("coarse_iterations: phase 1 needs at least one checkpoint")
    test_X = np.atleast_2d(np.asarray(test_X, dtype=np.float64))
    test_ids = np.asarray(test_ids, dtype=np.int64)
    coarse = identify_targets(store, dataset, test_X, test_ids, cfg.with_iterations(coarse_iterations),
                              kappa, per_class, batch_log, jobs)
    keep = math.ceil(keep_fraction * len(test_ids))
    kept_ids = [e.test_id for e in coarse.entries[:keep]]
    pos = {int(i): k for k, i in enumerate(test_ids)}
    rows = [pos[i] for i in kept_ids]
    fine = identify_targets(store, dataset, test_X[rows], test_ids[rows], cfg, kappa, per_class, batch_log, jobs)
    dropped = coarse.entries[keep:]
    for e in dropped:
        e.phase = 1
    entries = fine.entries + dropped
    _assign_ranks(entries, per_class)
    return TargetReport(cfg.label, kappa, per_class, entries)


def cross_class_scores(report: TargetReport, test_ids) -> np.ndarray:
    """One score per test id that orders instances across predicted classes.

    Tail heaviness is only comparable among test instances sharing a
    predicted label, so each class's heaviness values are standardized
    with their own median and Q.  A class with a single member, or with
    zero spread, is only centered.
    """
    entries = report.by_id()
    rows = [entries[int(i)] for i in test_ids]
    h = np.array([e.tail_heaviness for e in rows])
    labels = np.array([e.predicted_label for e in rows])
    out = np.empty_like(h)
    for c in np.unique(labels):
        m = labels == c
        q = q_estimator(h[m]) if m.sum() > 1 else 0.0
        out[m] = (h[m] - median(h[m])) / (q if q > 0 else 1.0)
    return out
