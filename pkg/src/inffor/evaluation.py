"""Metrics and baselines for adversarial-set and target identification."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset, TargetSet
from .errors import ConfigError
from .influence import EstimatorConfig, batch_influence
from .trainer import CheckpointStore, TrainConfig, derive_seed, train


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    auprc: float
    positives: int
    total: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall", "precision"])
            for r, p in zip(self.recall, self.precision):
                w.writerow([repr(float(r)), repr(float(p))])


def auprc(scores, positive_flags) -> PRCurve:
    """Average precision: sum over tied score groups of (R_k - R_{k-1}) * P_k, highest scores first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positive_flags, dtype=bool).ravel()
    if s.shape != pos.shape:
        raise ValueError("scores and flags differ in length")
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == pos.size:
        raise ValueError("auprc needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    # last index of every group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(pos)[ends]
    recall = tp / n_pos
    precision = tp / (ends + 1)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(recall, precision, ap, n_pos, pos.size)


def median_norm_ratio(adv_norms, clean_norms) -> float:
    num = float(np.median(adv_norms))
    den = float(np.median(clean_norms))
    if den == 0:
        raise ZeroDivisionError("clean set median gradient norm is zero")
    return num / den


def gradient_norm_ratio(spec: nn.ModelSpec, params, adv: Dataset, clean: Dataset) -> float:
    """Median adversarial gradient norm over median clean gradient norm."""
    if not len(adv) or not len(clean):
        raise ValueError("both sets must be nonempty")
    na = np.linalg.norm(nn.per_example_grads(spec, params, adv.X, adv.y), axis=1)
    nc = np.linalg.norm(nn.per_example_grads(spec, params, clean.X, clean.y), axis=1)
    return median_norm_ratio(na, nc)


def _knn(F_query, F_ref, k, exclude_self=False):
    d2 = (np.einsum("ij,ij->i", F_query, F_query)[:, None] - 2.0 * F_query @ F_ref.T
          + np.einsum("ij,ij->i", F_ref, F_ref)[None, :])
    np.maximum(d2, 0.0, out=d2)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.sqrt(np.take_along_axis(d2, order, axis=1))


def deep_knn_scores(store: CheckpointStore, dataset: Dataset, k: int) -> np.ndarray:
    """Plurality count minus same-label count among each instance's k nearest neighbours.

    Neighbours are other training instances under l2 distance in the final
    model's penultimate features.  0 means the neighbourhood agrees; k
    means no neighbour shares the label.
    """
    n = len(dataset)
    if not 1 <= k < n:
        raise ConfigError(f"k: must satisfy 1 <= k < n={n}")
    F = nn.penultimate_features(store.spec, store.final, dataset.X)
    nbrs, _ = _knn(F, F, k, exclude_self=True)
    labels = dataset.y[nbrs]
    counts = np.stack([(labels == c).sum(axis=1) for c in range(dataset.num_classes)], axis=1)
    same = counts[np.arange(n), dataset.y]
    return (counts.max(axis=1) - same).astype(np.float64)


def target_id_baselines(store: CheckpointStore, dataset: Dataset, test_X, kappa: int, seed: int = 0) -> dict:
    """Suspicion scores (higher = ranked earlier) for the non-influence target-ID baselines."""
    test_X = np.atleast_2d(np.asarray(test_X, dtype=np.float64))
    if not 1 <= kappa < len(dataset):
        raise ConfigError(f"kappa: must satisfy 1 <= kappa < n={len(dataset)}")
    spec, theta = store.spec, store.final
    F_tr = nn.penultimate_features(spec, theta, dataset.X)
    F_te = nn.penultimate_features(spec, theta, test_X)
    _, dist = _knn(F_te, F_tr, kappa)
    kth = dist[:, kappa - 1]
    pred = nn.predict(spec, theta, test_X)
    loss = nn.losses(nn.forward_batch(spec, theta, test_X), pred, spec.loss_kind)
    rng = np.random.default_rng(seed)
    return {
        "max_knn": kth,
        "min_knn": -kth,
        "most_certain": -loss,
        "least_certain": loss,
        "random": rng.permutation(test_X.shape[0]).astype(np.float64),
    }


def ranking_from_scores(scores, ids) -> np.ndarray:
    """Ids ordered by descending score, ties by smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    return ids[np.lexsort((ids, -scores))]


def filter_and_retrain(spec: nn.ModelSpec, dataset: Dataset, ranking, percentages, retrain_count: int,
                       z_filt, train_config: TrainConfig, jobs: int = 1) -> dict:
    """Misclassification rate of ``z_filt = (x, y)`` after removing each top-p% of ``ranking``."""
    ranking = np.asarray(ranking, dtype=np.int64)
    if set(ranking.tolist()) != set(dataset.ids.tolist()) or ranking.size != len(dataset):
        raise ConfigError("ranking: must order every training id exactly once")
    x, y = z_filt
    out = {}
    for p in percentages:
        if not 0 <= p < 100:
            raise ConfigError(f"percentages: {p} outside [0, 100)")
        cut = int(math.floor(p / 100.0 * len(dataset)))
        kept = dataset.without_ids(ranking[:cut])

        def one(r, kept=kept):
            cfg = train_config.with_seed(derive_seed(train_config.seed, r))
            params, _, _ = train(spec, kept, cfg)
            return int(nn.predict(spec, params, x)[0] != y)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                wrong = list(pool.map(one, range(retrain_count)))
        else:
            wrong = [one(r) for r in range(retrain_count)]
        out[p] = sum(wrong) / retrain_count
    return out


def attack_success_rate(spec: nn.ModelSpec, params, targets: TargetSet) -> float:
    if not len(targets):
        raise ValueError("target set is empty")
    return float(np.mean(nn.predict(spec, params, targets.X) == targets.y_adv))


def average_influence(stores, dataset: Dataset, test_X, test_ids, cfg: EstimatorConfig) -> np.ndarray:
    """Mean influence over independently trained models, one row per test instance."""
    acc = None
    for st in stores:
        vals = np.array([iv.values for iv in batch_influence(st, dataset, test_X, test_ids, cfg)])
        acc = vals if acc is None else acc + vals
    return acc / len(stores)
