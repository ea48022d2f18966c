"""Mini-batch training with checkpoint capture.

Iterations are numbered 1..N.  Before iteration ``t`` runs, the parameters
are ``theta_{t-1}``; a checkpoint recorded at ``t`` stores exactly those,
together with the learning rate ``eta_t`` that iteration uses.  Entry 0 is
always ``(0, eta_1, theta_0)``.  Within each epoch of ``m`` iterations the
``omega`` checkpoints sit at ``ceil((j+1) m / omega)``, so the last one of
an epoch is its final iteration.  The parameters after the last iteration
are kept separately as ``CheckpointStore.final``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .errors import CheckpointFormatError, CheckpointVersionError, ConfigError, TrainingDivergenceError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    lr_schedule: str = "constant"
    batch_size: int = 32
    epochs: int = 10
    subepoch_checkpoints: int = 1
    seed: int = 0
    record_batches: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer: expected sgd or adam, got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "one_cycle"):
            raise ConfigError(f"lr_schedule: expected constant or one_cycle, got {self.lr_schedule!r}")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.subepoch_checkpoints < 1:
            raise ConfigError("subepoch_checkpoints: must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), "seed": int(seed)})


def learning_rate(config: TrainConfig, t: int, total: int) -> float:
    """Rate used by iteration t (1-based) out of ``total``.

    one_cycle warms up linearly from lr/10 to lr over the first 30% of
    training, then decays linearly to lr/100.
    """
    eta = config.lr
    if config.lr_schedule == "constant":
        return eta
    frac = t / total
    if frac <= 0.3:
        return eta / 10 + (eta - eta / 10) * frac / 0.3
    return eta + (eta / 100 - eta) * (frac - 0.3) / 0.7


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


def init_params(spec: nn.ModelSpec, rng: np.random.Generator) -> np.ndarray:
    values = np.zeros(spec.num_params)
    if spec.architecture != "mlp":
        return values
    gain = 2.0 if spec.activation == "relu" else 1.0
    for W, _ in nn.unpack(spec, values):
        W[...] = rng.normal(0.0, math.sqrt(gain / W.shape[1]), size=W.shape)
    return values


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    learning_rate: float
    params: np.ndarray


@dataclass
class CheckpointStore:
    spec: nn.ModelSpec
    entries: list[Checkpoint]
    final: np.ndarray
    batch_size: int
    config_digest: str = ""
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        its = [c.iteration for c in self.entries]
        if not its or its[0] != 0 or any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("checkpoint iterations must start at 0 and strictly increase")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def iterations(self) -> list[int]:
        return [c.iteration for c in self.entries]

    @property
    def total_iterations(self) -> int:
        return int(self.train_config.get("total_iterations", self.entries[-1].iteration))

    def final_params(self) -> nn.ParamVector:
        return nn.ParamVector(self.final, self.spec.layer_spans())

    def params_at(self, k: int) -> nn.ParamVector:
        return nn.ParamVector(self.entries[k].params, self.spec.layer_spans())

    def select(self, iterations) -> list[int]:
        """Entry indices for the given iterations (ascending)."""
        wanted = set(int(i) for i in iterations)
        idx = [k for k, c in enumerate(self.entries) if c.iteration in wanted]
        missing = wanted - {self.entries[k].iteration for k in idx}
        if missing:
            raise ConfigError(f"iterations: {sorted(missing)} are not recorded checkpoints")
        return idx

    def equals(self, other: "CheckpointStore") -> bool:
        return (
            self.spec == other.spec and self.batch_size == other.batch_size
            and self.config_digest == other.config_digest
            and len(self.entries) == len(other.entries)
            and all(a.iteration == b.iteration and a.learning_rate == b.learning_rate
                    and np.array_equal(a.params, b.params) for a, b in zip(self.entries, other.entries))
            and np.array_equal(self.final, other.final)
        )


@dataclass
class BatchLog:
    """Ordered example ids of every iteration's batch; ``batches[t-1]`` is B_t."""

    batches: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.batches)


def checkpoint_iterations(n: int, config: TrainConfig) -> list[int]:
    m = math.ceil(n / config.batch_size)
    omega = config.subepoch_checkpoints
    if omega > m:
        raise ConfigError(f"subepoch_checkpoints: {omega} exceeds the {m} iterations per epoch")
    its = [0]
    for e in range(config.epochs):
        its.extend(e * m + math.ceil((j + 1) * m / omega) for j in range(omega))
    return its


def train(spec: nn.ModelSpec, dataset: Dataset, config: TrainConfig):
    """Train from a seeded initialization; returns (final_params, store, batch_log or None)."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset: training set is empty")
    rng = np.random.default_rng(config.seed)
    theta = init_params(spec, rng)
    b = config.batch_size
    m = math.ceil(n / b)
    total = m * config.epochs
    recorded = set(checkpoint_iterations(n, config)[1:])
    entries = [Checkpoint(0, learning_rate(config, 1, total), theta.copy())]
    batches = [] if config.record_batches else None
    if config.optimizer == "adam":
        m1 = np.zeros_like(theta)
        m2 = np.zeros_like(theta)
    X, y, ids = dataset.X, dataset.y, dataset.ids
    t = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for k in range(m):
            t += 1
            batch = perm[k * b:(k + 1) * b]
            eta = learning_rate(config, t, total)
            if t in recorded:
                entries.append(Checkpoint(t, eta, theta.copy()))
            if batches is not None:
                batches.append(ids[batch].copy())
            g, value = nn.mean_grad(spec, theta, X[batch], y[batch])
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(
                    f"non-finite loss at iteration {t} (epoch {epoch}); lower lr (currently {config.lr})")
            if config.optimizer == "sgd":
                theta = theta - eta * g
            else:
                m1 = config.adam_beta1 * m1 + (1 - config.adam_beta1) * g
                m2 = config.adam_beta2 * m2 + (1 - config.adam_beta2) * g * g
                mhat = m1 / (1 - config.adam_beta1 ** t)
                vhat = m2 / (1 - config.adam_beta2 ** t)
                theta = theta - eta * mhat / (np.sqrt(vhat) + config.adam_eps)
    log.debug("trained %d iterations, %d checkpoints", total, len(entries))
    store = CheckpointStore(
        spec, entries, theta.copy(), b, config.digest(),
        {**config.to_dict(), "total_iterations": total, "n_train": n},
    )
    return nn.ParamVector(theta, spec.layer_spans()), store, (BatchLog(batches) if batches is not None else None)


def save_checkpoints(store: CheckpointStore, path, batch_log: BatchLog | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for k, c in enumerate(store.entries):
        name = f"ckpt_{k:05d}.bin"
        (path / name).write_bytes(np.ascontiguousarray(c.params, dtype="<f8").tobytes())
        files.append({"iteration": c.iteration, "learning_rate": c.learning_rate,
                      "file": name, "length": int(c.params.size)})
    (path / "final.bin").write_bytes(np.ascontiguousarray(store.final, dtype="<f8").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_spec": store.spec.to_dict(),
        "layer_spans": [list(s) for s in store.spec.layer_spans()],
        "batch_size": store.batch_size,
        "config_digest": store.config_digest,
        "train_config": store.train_config,
        "checkpoints": files,
        "final": {"file": "final.bin", "length": int(store.final.size)},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if batch_log is not None:
        with open(path / "batches.jsonl", "w") as fh:
            for t, ids in enumerate(batch_log.batches, start=1):
                fh.write(json.dumps({"t": t, "ids": [int(i) for i in ids]}) + "\n")


def _read_params(path: Path, length: int, what: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"{what}: file {path.name} is missing") from exc
    if len(raw) != 8 * length:
        raise CheckpointFormatError(f"{what}: {path.name} holds {len(raw)} bytes, manifest declares {8 * length}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_checkpoints(path) -> CheckpointStore:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"no manifest.json in {path}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    spec = nn.ModelSpec.from_dict(manifest["model_spec"])
    entries = []
    for k, info in enumerate(manifest["checkpoints"]):
        if info["length"] != spec.num_params:
            raise CheckpointFormatError(f"checkpoint {k}: declared length {info['length']} != {spec.num_params}")
        params = _read_params(path / info["file"], info["length"], f"checkpoint {k}")
        entries.append(Checkpoint(int(info["iteration"]), float(info["learning_rate"]), params))
    final = _read_params(path / manifest["final"]["file"], manifest["final"]["length"], "final parameters")
    return CheckpointStore(spec, entries, final, int(manifest["batch_size"]),
                           manifest.get("config_digest", ""), manifest.get("train_config", {}))


def load_batch_log(path) -> BatchLog | None:
    p = Path(path) / "batches.jsonl"
    if not p.exists():
        return None
    batches = []
    with open(p) as fh:
        for expected, line in enumerate(fh, start=1):
            rec = json.loads(line)
            if rec["t"] != expected:
                raise CheckpointFormatError(f"batches.jsonl: expected t={expected}, found {rec['t']}")
            batches.append(np.asarray(rec["ids"], dtype=np.int64))
    return BatchLog(batches)
