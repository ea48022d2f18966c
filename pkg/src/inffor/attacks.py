"""Desk-scale datasets and training-set attacks.

Clean data is either Gaussian blobs or 8x8 "grid images" (a per-class
layout of three bumps, jittered per image, plus pixel noise, clipped to
[0, 1]).  A grid keep-out holds every bump away from the bottom and right
borders, where the pixel triggers sit, so the trigger region carries no
class signal of its own.  Attacks mark every injected
or perturbed training instance with ``is_adversarial``; nothing downstream
except evaluation reads that flag.

Triggers are box clamps: each feature is clipped into ``[lo_j, hi_j]``.
Pixel triggers raise the chosen pixels to at least their level; the blend
trigger raises features where a fixed Gaussian pattern is positive and
lowers them where it is negative.  Clamping is a projection, so applying a
trigger twice equals applying it once, and no feature moves further than
the pattern's own magnitude, which bounds the l2 perturbation by epsilon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import DataBundle, Dataset, TargetSet
from .errors import ConfigError

AttackedDataset = DataBundle


@dataclass(frozen=True)
class DataSpec:
    kind: str = "gaussian_blobs"  # or grid_images
    num_classes: int = 2
    dim: int = 2  # blobs only; grid images use height * width
    separation: float = 6.0  # blob center spacing, in units of the blob std
    n: int = 200
    n_test: int = 0
    height: int = 8
    width: int = 8
    noise: float = 0.1  # grid pixel noise std
    jitter: float = 1.0  # grid per-image bump displacement std, in pixels
    keepout: float = 0.0  # grid bump centers stay this far from the bottom and right borders
    min_separation: float = 0.0  # grid bumps of different classes start at least this far apart
    bump_width: tuple[float, float] = (0.8, 1.6)  # grid bump std range, in pixels

    @property
    def input_dim(self) -> int:
        return self.dim if self.kind == "gaussian_blobs" else self.height * self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bump_width"] = list(self.bump_width)
        return d


def _blob_centers(spec: DataSpec, rng) -> np.ndarray:
    k, d = spec.num_classes, spec.dim
    if d >= k:
        # simplex corners: every pair exactly `separation` apart
        C = np.eye(k, d) * spec.separation / math.sqrt(2.0)
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        return C @ Q.T
    C = rng.normal(size=(k, d))
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    return C * spec.separation * k / 2.0


def _grid_templates(spec: DataSpec, rng) -> list[np.ndarray]:
    """Per class: three Gaussian bumps as rows of (row, col, width)."""
    h, w = spec.height, spec.width
    k = spec.keepout
    (r_lo, r_hi), (c_lo, c_hi) = ((0.5, h - 1.5 - k), (0.5, w - 1.5 - k)) if k else ((1.5, h - 2.5), (1.5, w - 2.5))
    if r_hi <= r_lo or c_hi <= c_lo:
        raise ConfigError(f"keepout: {k} leaves no room for bumps on a {h}x{w} grid")
    for _ in range(1000):
        out = [np.column_stack([rng.uniform(r_lo, r_hi, 3), rng.uniform(c_lo, c_hi, 3),
                                rng.uniform(*spec.bump_width, 3)]) for _ in range(spec.num_classes)]
        gaps = [np.linalg.norm(a[:, None, :2] - b[None, :, :2], axis=2).min()
                for i, a in enumerate(out) for b in out[:i]]
        if not gaps or min(gaps) >= spec.min_separation:
            return out
    raise ConfigError(f"min_separation: {spec.min_separation} is unattainable on a {h}x{w} grid")


def _render(spec: DataSpec, bumps: np.ndarray, amps: np.ndarray) -> np.ndarray:
    rr, cc = np.mgrid[0:spec.height, 0:spec.width]
    img = sum(a * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * s ** 2)) for (r0, c0, s), a in zip(bumps, amps))
    return 0.7 * img.ravel() / max(img.max(), 1e-12)


def _sample_clean(spec: DataSpec, rng, n, params):
    y = np.arange(n) % spec.num_classes
    rng.shuffle(y)
    if spec.kind == "gaussian_blobs":
        return params[y] + rng.normal(size=(n, spec.dim)), y
    X = np.empty((n, spec.input_dim))
    for i, c in enumerate(y):
        bumps = params[c].copy()
        bumps[:, :2] += spec.jitter * rng.normal(size=(3, 2))
        if spec.keepout:
            bumps[:, 0] = np.clip(bumps[:, 0], 0.0, spec.height - 1 - spec.keepout)
            bumps[:, 1] = np.clip(bumps[:, 1], 0.0, spec.width - 1 - spec.keepout)
        X[i] = _render(spec, bumps, rng.uniform(0.5, 1.0, 3))
    return np.clip(X + spec.noise * rng.normal(size=X.shape), 0.0, 1.0), y


def make_clean_dataset(spec: DataSpec, seed: int) -> DataBundle:
    """Train split of ``spec.n`` (ids 0..n-1) and test split of ``spec.n_test`` (ids after)."""
    if spec.kind not in ("gaussian_blobs", "grid_images"):
        raise ConfigError(f"kind: expected gaussian_blobs or grid_images, got {spec.kind!r}")
    rng = np.random.default_rng(seed)
    params = _blob_centers(spec, rng) if spec.kind == "gaussian_blobs" else _grid_templates(spec, rng)
    X, y = _sample_clean(spec, rng, spec.n + spec.n_test, params)
    train = Dataset.from_arrays(X[:spec.n], y[:spec.n], spec.num_classes)
    test = None
    if spec.n_test:
        test = Dataset.from_arrays(X[spec.n:], y[spec.n:], spec.num_classes, start_id=spec.n)
    return DataBundle(train, test, None, {"kind": "clean", "data": spec.to_dict(), "seed": int(seed)})


def _next_id(bundle: DataBundle) -> int:
    parts = [bundle.train.ids]
    if bundle.test is not None:
        parts.append(bundle.test.ids)
    if bundle.targets is not None:
        parts.append(bundle.targets.ids)
    return int(max(int(p.max()) for p in parts if p.size)) + 1


def group_flip_attack(bundle: DataBundle, m: int, y_adv: int, seed: int, n_targets: int = 10) -> DataBundle:
    """Inject ``m`` points from a distinct, far-away Gaussian cluster, all labeled ``y_adv``.

    The cluster sits at least 6 within-class standard deviations from every
    clean class mean, in a direction orthogonal to the clean class means
    where the dimension allows.  Targets are held-out draws of the same
    cluster.
    """
    if m < 0:
        raise ConfigError("m: must be >= 0")
    rng = np.random.default_rng(seed)
    ds = bundle.train
    k = ds.num_classes
    means = np.array([ds.X[ds.y == c].mean(axis=0) for c in range(k)])
    center = ds.X.mean(axis=0)
    sigma = float(np.sqrt(np.mean([ds.X[ds.y == c].var(axis=0).mean() for c in range(k)])))
    u = rng.normal(size=ds.dim)
    basis = means - center
    if np.linalg.matrix_rank(basis) < ds.dim:
        q, _ = np.linalg.qr(basis.T)
        u -= q @ (q.T @ u)
    u /= np.linalg.norm(u)
    radius = float(np.max(np.linalg.norm(means - center, axis=1)))
    adv_center = center + (radius + 6.0 * sigma) * u
    while np.min(np.linalg.norm(means - adv_center, axis=1)) < 6.0 * sigma:
        adv_center = adv_center + sigma * u
    start = _next_id(bundle)
    Xa = adv_center + sigma * rng.normal(size=(m, ds.dim))
    adv = Dataset(Xa, np.full(m, y_adv), np.arange(start, start + m), np.ones(m, bool), k)
    Xt = adv_center + sigma * rng.normal(size=(n_targets, ds.dim))
    tstart = start + m
    targets = TargetSet(Xt, np.full(n_targets, -1), np.full(n_targets, y_adv), np.arange(tstart, tstart + n_targets))
    desc = {**bundle.descriptor, "kind": "group_flip", "m": int(m), "y_adv": int(y_adv), "seed": int(seed),
            "rate": m / (len(ds) + m), "adv_center": adv_center.tolist(), "sigma": sigma}
    return DataBundle(ds.concat(adv), bundle.test, targets, desc)


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "one_pixel"  # one_pixel | four_pixel | blend
    epsilon: float = 1.0
    height: int = 8
    width: int = 8
    positions: tuple[int, ...] = ()  # flat pixel indices; defaults to the bottom-right corner
    noise_seed: int = 0

    def _positions(self):
        if self.positions:
            return list(self.positions)
        h, w = self.height, self.width
        if self.kind == "one_pixel":
            return [h * w - 1]
        return [(h - 2) * w + (w - 2), (h - 2) * w + (w - 1), (h - 1) * w + (w - 2), (h - 1) * w + (w - 1)]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.height * self.width
        lo, hi = np.zeros(d), np.ones(d)
        if self.kind in ("one_pixel", "four_pixel"):
            pos = self._positions()
            lo[pos] = min(1.0, self.epsilon / math.sqrt(len(pos)))
        elif self.kind == "blend":
            z = np.random.default_rng(self.noise_seed).normal(size=d)
            z *= self.epsilon / np.linalg.norm(z)
            lo = np.minimum(np.maximum(z, 0.0), 1.0)
            hi = np.maximum(1.0 - np.maximum(-z, 0.0), lo)
        else:
            raise ConfigError(f"trigger kind: expected one_pixel, four_pixel or blend, got {self.kind!r}")
        return lo, hi

    def apply(self, X) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(np.clip(np.asarray(X, dtype=np.float64), 0.0, 1.0), lo, hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positions"] = list(self.positions)
        return d


def backdoor_attack(bundle: DataBundle, trigger: TriggerSpec, rate: float, y_targ: int, y_adv: int,
                    seed: int, n_targets: int = 10) -> DataBundle:
    """Trigger and relabel ``ceil(rate * n)`` clean ``y_targ`` training instances as ``y_adv``.

    Targets are held-out ``y_targ`` instances from the test split with the
    trigger applied; they leave the test split.
    """
    if not 0 < rate < 1:
        raise ConfigError("rate: must be in (0, 1)")
    rng = np.random.default_rng(seed)
    ds = bundle.train
    count = math.ceil(rate * len(ds) - 1e-9)
    pool = np.flatnonzero((ds.y == y_targ) & ~ds.is_adversarial)
    if pool.size < count:
        raise ConfigError(f"rate: need {count} class-{y_targ} training instances, only {pool.size} available")
    chosen = np.sort(rng.choice(pool, size=count, replace=False))
    X, y, adv = ds.X.copy(), ds.y.copy(), ds.is_adversarial.copy()
    X[chosen] = trigger.apply(X[chosen])
    y[chosen] = y_adv
    adv[chosen] = True
    train = Dataset(X, y, ds.ids, adv, ds.num_classes)

    test, targets = bundle.test, None
    if n_targets:
        if test is None:
            raise ConfigError("n_targets: backdoor targets come from the test split, which is missing")
        cand = np.flatnonzero(test.y == y_targ)
        if cand.size < n_targets:
            raise ConfigError(f"n_targets: only {cand.size} class-{y_targ} test instances")
        pick = np.sort(rng.choice(cand, size=n_targets, replace=False))
        targets = TargetSet(trigger.apply(test.X[pick]), test.y[pick], np.full(n_targets, y_adv), test.ids[pick])
        test = test.subset(np.setdiff1d(np.arange(len(test)), pick))
    desc = {**bundle.descriptor, "kind": "backdoor", "trigger": trigger.to_dict(), "rate": float(rate),
            "count": int(count), "y_targ": int(y_targ), "y_adv": int(y_adv), "seed": int(seed)}
    return DataBundle(train, test, targets, desc)


def triggered(bundle: DataBundle, trigger: TriggerSpec, label: int) -> TargetSet:
    """Every test instance of class ``label`` with the trigger applied (for overall ASR)."""
    test = bundle.test
    idx = np.flatnonzero(test.y == label)
    y_adv = bundle.descriptor.get("y_adv", -1)
    return TargetSet(trigger.apply(test.X[idx]), test.y[idx], np.full(idx.size, y_adv), test.ids[idx])


def availability_attack(bundle: DataBundle, trigger: TriggerSpec, y_adv: int, seed: int,
                        n_targets: int = 10) -> DataBundle:
    """Trigger held-out instances that already belong to ``y_adv``; training data is untouched.

    Such "targets" are predicted ``y_adv`` for benign reasons, so no small
    influential set explains them and sanitizing against one has to strip
    large parts of the class.
    """
    test = bundle.test
    if test is None:
        raise ConfigError("n_targets: availability targets come from the test split, which is missing")
    cand = np.flatnonzero(test.y == y_adv)
    if cand.size < n_targets:
        raise ConfigError(f"n_targets: only {cand.size} class-{y_adv} test instances")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(cand, size=n_targets, replace=False))
    targets = TargetSet(trigger.apply(test.X[pick]), test.y[pick], np.full(n_targets, y_adv), test.ids[pick])
    rest = test.subset(np.setdiff1d(np.arange(len(test)), pick))
    desc = {**bundle.descriptor, "kind": "availability", "trigger": trigger.to_dict(), "y_adv": int(y_adv),
            "seed": int(seed)}
    return DataBundle(bundle.train, rest, targets, desc)


def single_target_poison(bundle: DataBundle, x_targ, m: int, y_adv: int, noise: float, seed: int,
                         y_targ: int = -1, check: tuple | None = None) -> DataBundle:
    """Append ``m`` noisy copies of the target's features labeled ``y_adv``.

    A feature-collision stand-in for crafted poison.  If ``check`` is a
    ``(ModelSpec, TrainConfig)`` pair, a model is trained on the result and
    the descriptor records whether the target flipped.
    """
    from .trainer import train as _train

    rng = np.random.default_rng(seed)
    ds = bundle.train
    x_targ = np.asarray(x_targ, dtype=np.float64)
    start = _next_id(bundle)
    Xp = x_targ[None, :] + noise * rng.normal(size=(m, ds.dim))
    poison = Dataset(Xp, np.full(m, y_adv), np.arange(start, start + m), np.ones(m, bool), ds.num_classes)
    targets = TargetSet(x_targ[None, :], [y_targ], [y_adv], [start + m])
    desc = {**bundle.descriptor, "kind": "single_target_poison", "m": int(m), "y_adv": int(y_adv),
            "noise": float(noise), "seed": int(seed), "crafted": False}
    out = DataBundle(ds.concat(poison) if m else ds, bundle.test, targets, desc)
    if check is not None:
        spec, cfg = check
        params, _, _ = _train(spec, out.train, cfg)
        success = bool(nn.predict(spec, params, x_targ)[0] == y_adv)
        desc["success"] = success
    return out


def adaptive_seed_selection(pool_ids, surrogate_store, dataset: Dataset, x_targ, m: int, cfg) -> np.ndarray:
    """The ``m`` pool ids the surrogate model rates least influential on the target.

    Ties go to the smaller id.
    """
    from .influence import batch_influence

    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    if pool_ids.size < m:
        raise ConfigError(f"m: pool has {pool_ids.size} candidates, {m} requested")
    pool = dataset.subset(dataset.index_of(pool_ids))
    v = batch_influence(surrogate_store, pool, np.atleast_2d(x_targ), [0], cfg)[0].values
    order = np.lexsort((pool.ids, v))
    return pool.ids[order[:m]]
