"""Dataset container and its on-disk format.

A dataset directory holds ``dataset.json`` (manifest) and, for every split,
``<split>.bin`` (little-endian float64 feature matrix, row-major) plus
``<split>.csv``.  Train/test splits use ``id,label,is_adversarial`` rows;
the ``targets`` split uses ``id,y_targ,y_adv``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

FORMAT_VERSION = 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    is_adversarial: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.is_adversarial = np.asarray(self.is_adversarial, dtype=bool)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.ids.shape != (n,) or self.is_adversarial.shape != (n,):
            raise ValueError("X, y, ids and is_adversarial must agree in length")
        if n and ((self.y < 0).any() or (self.y >= self.num_classes).any()):
            raise ValueError("label out of range")

    @classmethod
    def from_arrays(cls, X, y, num_classes, ids=None, is_adversarial=None, start_id=0):
        n = len(y)
        return cls(
            X, y,
            np.arange(start_id, start_id + n) if ids is None else ids,
            np.zeros(n, bool) if is_adversarial is None else is_adversarial,
            num_classes,
        )

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return Dataset(self.X[idx], self.y[idx], self.ids[idx], self.is_adversarial[idx], self.num_classes)

    def without_ids(self, ids) -> "Dataset":
        return self.subset(~np.isin(self.ids, np.asarray(list(ids), dtype=np.int64)))

    def index_of(self, ids) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        return np.array([lookup[int(i)] for i in ids], dtype=np.int64)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]),
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.is_adversarial, other.is_adversarial]),
            max(self.num_classes, other.num_classes),
        )


@dataclass
class TargetSet:
    """Attack targets: features, the label they should have, the label the attacker wants."""

    X: np.ndarray
    y_targ: np.ndarray
    y_adv: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y_targ = np.asarray(self.y_targ, dtype=np.int64)
        self.y_adv = np.asarray(self.y_adv, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "TargetSet":
        idx = np.asarray(idx)
        return TargetSet(self.X[idx], self.y_targ[idx], self.y_adv[idx], self.ids[idx])


@dataclass
class DataBundle:
    """Everything a run reads: training data, clean held-out data, attack targets."""

    train: Dataset
    test: Dataset | None = None
    targets: TargetSet | None = None
    descriptor: dict = field(default_factory=dict)

    def analysis_set(self) -> tuple[np.ndarray, np.ndarray]:
        """Features and ids of targets followed by clean test instances."""
        parts_X, parts_ids = [], []
        if self.targets is not None:
            parts_X.append(self.targets.X)
            parts_ids.append(self.targets.ids)
        if self.test is not None:
            parts_X.append(self.test.X)
            parts_ids.append(self.test.ids)
        if not parts_X:
            raise ConfigError("analysis set: bundle has neither targets nor a test split")
        return np.vstack(parts_X), np.concatenate(parts_ids)

    def lookup(self, test_id: int) -> np.ndarray:
        X, ids = self.analysis_set()
        hits = np.flatnonzero(ids == int(test_id))
        if not hits.size:
            raise ConfigError(f"test_id: {test_id} is not in the test or targets split")
        return X[hits[0]]


def _write_matrix(path: Path, X: np.ndarray):
    path.write_bytes(np.ascontiguousarray(X, dtype="<f8").tobytes())


def _read_matrix(path: Path, rows: int, cols: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) != rows * cols * 8:
        raise ValueError(f"{path.name}: expected {rows * cols * 8} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_bundle(bundle: DataBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, ds in (("train", bundle.train), ("test", bundle.test)):
        if ds is None:
            continue
        _write_matrix(path / f"{name}.bin", ds.X)
        with open(path / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "is_adversarial"])
            for i, lab, adv in zip(ds.ids, ds.y, ds.is_adversarial):
                w.writerow([int(i), int(lab), int(adv)])
        splits[name] = {"n": len(ds), "features": f"{name}.bin", "rows": f"{name}.csv"}
    if bundle.targets is not None:
        t = bundle.targets
        _write_matrix(path / "targets.bin", t.X)
        with open(path / "targets.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "y_targ", "y_adv"])
            for i, a, b in zip(t.ids, t.y_targ, t.y_adv):
                w.writerow([int(i), int(a), int(b)])
        splits["targets"] = {"n": len(t), "features": "targets.bin", "rows": "targets.csv"}
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": len(bundle.train),
        "dim": bundle.train.dim,
        "classes": bundle.train.num_classes,
        "attack": bundle.descriptor,
        "splits": splits,
    }
    (path / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(path) -> DataBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"data: no dataset.json in {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"data: unsupported dataset format_version {manifest.get('format_version')!r}")
    dim, k = manifest["dim"], manifest["classes"]
    out = {}
    for name, info in manifest["splits"].items():
        with open(path / info["rows"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        X = _read_matrix(path / info["features"], info["n"], dim)
        ids = [int(r["id"]) for r in rows]
        if name == "targets":
            out[name] = TargetSet(X, [int(r["y_targ"]) for r in rows], [int(r["y_adv"]) for r in rows], ids)
        else:
            out[name] = Dataset(X, [int(r["label"]) for r in rows], ids,
                                [r["is_adversarial"] == "1" for r in rows], k)
    return DataBundle(out["train"], out.get("test"), out.get("targets"), manifest.get("attack", {}))
