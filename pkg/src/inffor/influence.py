"""Training-data influence estimators and their renormalized variants.

Every estimator yields one length-n vector per test instance, aligned with
the training set order.  Test gradients always use the label predicted by
the final model, at every checkpoint.

Renormalization replaces a gradient by its unit vector (``global``) or
normalizes each layer's sub-vector independently (``layerwise``).  A zero
(sub-)vector normalizes to zero and so contributes nothing.

  estimator  renorm     common name
  ---------  ---------  -----------
  if         none       influence functions
  if         global     IF-Rn (training gradient only)
  rp         none       representer point
  rp         global     RP-Rn (signum of the loss derivative)
  tracin     none       TracIn
  tracin     global     TracIn-Rn
  tracincp   none       TracInCP
  tracincp   global     GAS
  tracincp   layerwise  GAS-L
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError
from .trainer import BatchLog, CheckpointStore, derive_seed

log = logging.getLogger(__name__)

ESTIMATORS = ("if", "rp", "tracin", "tracincp")
RENORMS = ("none", "global", "layerwise")

_LABELS = {
    ("if", "none"): "IF", ("if", "global"): "IF-Rn", ("if", "layerwise"): "IF-Rn-L",
    ("rp", "none"): "RP", ("rp", "global"): "RP-Rn", ("rp", "layerwise"): "RP-Rn",
    ("tracin", "none"): "TracIn", ("tracin", "global"): "TracIn-Rn", ("tracin", "layerwise"): "TracIn-Rn-L",
    ("tracincp", "none"): "TracInCP", ("tracincp", "global"): "GAS", ("tracincp", "layerwise"): "GAS-L",
}


@dataclass(frozen=True)
class LissaConfig:
    # image-classifier defaults; very large scale keeps the recursion contractive
    damp: float = 0.01
    scale: float = 3e7
    depth: int = 1000
    repeats: int = 10
    batch_size: int = 1
    seed: int = 0


@dataclass(frozen=True)
class EstimatorConfig:
    estimator: str = "tracincp"
    renorm: str = "global"
    lissa: LissaConfig = field(default_factory=LissaConfig)
    hessian: str = "lissa"  # or "exact": dense solve, small models only
    iterations: tuple[int, ...] | None = None  # checkpoint subset; None = all

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator: expected one of {ESTIMATORS}, got {self.estimator!r}")
        if self.renorm not in RENORMS:
            raise ConfigError(f"renorm: expected one of {RENORMS}, got {self.renorm!r}")
        if self.hessian not in ("lissa", "exact"):
            raise ConfigError(f"hessian: expected lissa or exact, got {self.hessian!r}")
        if self.iterations is not None:
            object.__setattr__(self, "iterations", tuple(int(i) for i in self.iterations))

    @property
    def label(self) -> str:
        return _LABELS[(self.estimator, self.renorm)]

    def with_iterations(self, iterations) -> "EstimatorConfig":
        return replace(self, iterations=None if iterations is None else tuple(iterations))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iterations"] = None if self.iterations is None else list(self.iterations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        d = dict(d)
        if "lissa" in d:
            d["lissa"] = LissaConfig(**d["lissa"])
        return cls(**d)


GAS = EstimatorConfig("tracincp", "global")
GAS_L = EstimatorConfig("tracincp", "layerwise")


@dataclass
class InfluenceVector:
    test_id: int
    estimator: str
    renorm: str
    values: np.ndarray
    predicted_label: int
    train_ids: np.ndarray

    @property
    def label(self) -> str:
        return _LABELS[(self.estimator, self.renorm)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["train_id", "value"])
            for i, v in zip(self.train_ids, self.values):
                w.writerow([int(i), repr(float(v))])

    def save(self, prefix) -> None:
        """Binary little-endian float64 block plus a JSON sidecar."""
        prefix = Path(prefix)
        prefix.with_suffix(".bin").write_bytes(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        meta = {"test_id": int(self.test_id), "estimator": self.estimator, "renorm": self.renorm,
                "predicted_label": int(self.predicted_label), "length": int(self.values.size),
                "train_ids": [int(i) for i in self.train_ids]}
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, prefix) -> "InfluenceVector":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        values = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
        if values.size != meta["length"]:
            raise ValueError(f"{prefix}: expected {meta['length']} values, found {values.size}")
        return cls(meta["test_id"], meta["estimator"], meta["renorm"], values,
                   meta["predicted_label"], np.asarray(meta["train_ids"], dtype=np.int64))


def predict_label(spec: nn.ModelSpec, params, x) -> int:
    """Argmax of the final activations; ties (and a binary logit of 0) go to the smaller class."""
    return int(nn.predict(spec, params, x)[0])


def renormalize(G: np.ndarray, spans, renorm: str) -> np.ndarray:
    """Row-wise unit (or per-layer unit) vectors; zero rows stay zero."""
    if renorm == "none":
        return G
    G = np.atleast_2d(G)
    out = np.zeros_like(G)
    blocks = [(0, G.shape[1])] if renorm == "global" else [(s, e) for _, s, e in spans]
    for s, e in blocks:
        block = G[:, s:e]
        norms = np.sqrt(np.einsum("ij,ij->i", block, block))
        ok = norms > 0
        out[ok, s:e] = block[ok] / norms[ok, None]
    return out


def similarity(G: np.ndarray, g: np.ndarray, spans, renorm: str) -> np.ndarray:
    """<G_i, g> for every row, summed layer by layer (ascending) when layerwise."""
    if renorm != "layerwise":
        return G @ g
    out = np.zeros(G.shape[0])
    for _, s, e in spans:
        out += G[:, s:e] @ g[s:e]
    return out


def aggregate(train_grads, test_grads, weights, spans, renorm: str) -> np.ndarray:
    """sum_t w_t <ren(G_t)_i, ren(g_t)> over checkpoints: the TracInCP/GAS kernel.

    ``train_grads`` is a sequence of (n, P) arrays and ``test_grads`` a
    sequence of length-P test gradients, one per checkpoint.
    """
    v = None
    for G, g, w in zip(train_grads, test_grads, weights):
        c = w * similarity(renormalize(G, spans, renorm), renormalize(g[None, :], spans, renorm)[0], spans, renorm)
        v = c if v is None else v + c
    return v


def _membership_counts(store: CheckpointStore, batch_log: BatchLog, dataset: Dataset, entries) -> dict:
    """Per selected checkpoint, how often each example appears in the batches attributed to it.

    Iterations between two selected checkpoints are attributed to the later
    one; iterations after the last selected checkpoint are not attributed.
    """
    index = {int(i): k for k, i in enumerate(dataset.ids)}
    counts = {}
    prev = 0
    for k in entries:
        t = store.entries[k].iteration
        c = np.zeros(len(dataset))
        for s in range(prev + 1, t + 1):
            for i in batch_log.batches[s - 1]:
                try:
                    c[index[int(i)]] += 1
                except KeyError as exc:
                    raise ConfigError(f"batch_log: id {int(i)} at iteration {s} is not in the dataset") from exc
        counts[k] = c
        prev = t
    return counts


def _map(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def batch_influence(store: CheckpointStore, dataset: Dataset, test_X, test_ids, cfg: EstimatorConfig,
                    batch_log: BatchLog | None = None, jobs: int = 1) -> list[InfluenceVector]:
    """Influence vectors for many test instances, sharing training gradients.

    Each test instance is processed exactly as a single-instance call would
    be, so results do not depend on batch composition or order.
    """
    spec = store.spec
    test_X = nn._check_X(spec, test_X)
    test_ids = np.asarray(test_ids, dtype=np.int64)
    if test_ids.shape != (test_X.shape[0],):
        raise ValueError("one test id per test row is required")
    final = store.final
    preds = [predict_label(spec, final, x) for x in test_X]
    spans = spec.layer_spans()
    n = len(dataset)
    k_test = range(test_X.shape[0])

    if cfg.estimator == "if":
        values = _influence_functions(store, dataset, test_X, test_ids, preds, cfg, jobs)
    elif cfg.estimator == "rp":
        values = _representer_point(store, dataset, test_X, preds, cfg.renorm)
    else:
        entries = list(range(len(store))) if cfg.iterations is None else store.select(cfg.iterations)
        if cfg.estimator == "tracin":
            if batch_log is None:
                raise ConfigError("batch_log: tracin needs the recorded batch membership (train with record_batches)")
            counts = _membership_counts(store, batch_log, dataset, entries)
        values = [np.zeros(n) for _ in k_test]
        for k in entries:
            ckpt = store.entries[k]
            if cfg.estimator == "tracin" and not counts[k].any():
                continue
            w = ckpt.learning_rate / store.batch_size
            G = renormalize(nn.per_example_grads(spec, ckpt.params, dataset.X, dataset.y), spans, cfg.renorm)

            def one(j, G=G, ckpt=ckpt, w=w, k=k):
                g = nn.per_example_grads(spec, ckpt.params, test_X[j], [preds[j]])
                g = renormalize(g, spans, cfg.renorm)[0]
                c = w * similarity(G, g, spans, cfg.renorm)
                if cfg.estimator == "tracin":
                    c = c * counts[k]
                return c

            for j, c in zip(k_test, _map(one, list(k_test), jobs)):
                values[j] = values[j] + c
    return [InfluenceVector(int(test_ids[j]), cfg.estimator, cfg.renorm, values[j], preds[j], dataset.ids.copy())
            for j in k_test]


def _influence_functions(store, dataset, test_X, test_ids, preds, cfg, jobs):
    spec = store.spec
    theta = store.final
    n = len(dataset)
    G = renormalize(nn.per_example_grads(spec, theta, dataset.X, dataset.y), spec.layer_spans(), cfg.renorm)
    H = None
    if cfg.hessian == "exact":
        H = nn.dense_hessian(spec, theta, dataset.X, dataset.y)

    def one(j):
        g = nn.per_example_grads(spec, theta, test_X[j], [preds[j]])[0]
        if H is not None:
            s = np.linalg.solve(H, g)
        else:
            lc = cfg.lissa
            s = nn.lissa_inverse_hvp(spec, theta, dataset.X, dataset.y, g, lc.damp, lc.scale, lc.depth,
                                     lc.repeats, rng=derive_seed(lc.seed, int(test_ids[j])),
                                     batch_size=lc.batch_size)
        return (G @ s) / n

    return _map(one, list(range(test_X.shape[0])), jobs)


def representer_coefficients(spec: nn.ModelSpec, params, X, y) -> np.ndarray:
    """dl/da_{y_i} for every training example.

    In binary single-logit mode this is the derivative with respect to the
    signed margin (2y-1)*a, which matches the y_i-th logit of the
    equivalent two-class softmax: sigma(a)-1 for y=1 and -sigma(a) for y=0.
    """
    A = nn.forward_batch(spec, params, X)
    y = np.asarray(y, dtype=np.int64)
    D = nn.dloss_da(A, y, spec.loss_kind)
    if spec.binary:
        return D[:, 0] * (2 * y - 1)
    return D[np.arange(len(y)), y]


def _representer_point(store, dataset, test_X, preds, renorm):
    spec = store.spec
    lam = spec.weight_decay
    if lam <= 0:
        raise ConfigError("weight_decay: representer point needs weight_decay > 0")
    theta = store.final
    n = len(dataset)
    coef = representer_coefficients(spec, theta, dataset.X, dataset.y)
    if renorm != "none":
        coef = np.sign(coef)
    F = nn.penultimate_features(spec, theta, dataset.X)
    out = []
    for x in test_X:
        f = nn.penultimate_features(spec, theta, x)[0]
        out.append(-(1.0 / (2.0 * lam * n)) * coef * (F @ f))
    return out


def _single(store, dataset, x_te, cfg, test_id, batch_log=None):
    return batch_influence(store, dataset, np.atleast_2d(x_te), [test_id], cfg, batch_log)[0]


def influence_functions(store, dataset, x_te, lissa: LissaConfig = LissaConfig(), renorm="none",
                        test_id=0, hessian="lissa") -> InfluenceVector:
    return _single(store, dataset, x_te, EstimatorConfig("if", renorm, lissa, hessian), test_id)


def representer_point(store, dataset, x_te, renorm="none", test_id=0) -> InfluenceVector:
    return _single(store, dataset, x_te, EstimatorConfig("rp", renorm), test_id)


def tracin(store, batch_log, dataset, x_te, renorm="none", test_id=0, iterations=None) -> InfluenceVector:
    return _single(store, dataset, x_te, EstimatorConfig("tracin", renorm, iterations=iterations), test_id, batch_log)


def tracincp(store, dataset, x_te, test_id=0, iterations=None) -> InfluenceVector:
    return _single(store, dataset, x_te, EstimatorConfig("tracincp", "none", iterations=iterations), test_id)


def gas(store, dataset, x_te, layerwise=False, test_id=0, iterations=None) -> InfluenceVector:
    cfg = EstimatorConfig("tracincp", "layerwise" if layerwise else "global", iterations=iterations)
    return _single(store, dataset, x_te, cfg, test_id)
