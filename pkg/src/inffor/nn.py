"""Small differentiable models with hand-derived gradients.

Two classifier families are supported: linear (logistic / softmax
regression) and fully-connected MLPs with relu or tanh hidden units.  A
linear model is an MLP with no hidden layers, so both share one code path.
Binary problems use a single output logit with binary cross-entropy;
multiclass problems use softmax cross-entropy.

A third ``quadratic`` architecture, with per-example loss
``0.5 * ||theta - x||^2``, exists only as a test objective with an identity
Hessian.

Weight decay is part of every per-example loss:
``l(z; theta) = ce(f(x; theta), y) + weight_decay * ||theta||^2``.

Parameters are a flat float64 vector.  Layer ``k`` occupies one contiguous
span holding its weight matrix (row-major, shape ``(out, in)``) followed by
its bias.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, LissaDivergenceError

ARCHITECTURES = ("linear", "mlp", "quadratic")
ACTIVATIONS = ("relu", "tanh")
LOSS_KINDS = ("bce_single_logit", "softmax_ce")

LISSA_DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "linear"
    input_dim: int = 2
    num_classes: int = 2
    hidden_sizes: tuple[int, ...] = ()
    activation: str = "relu"
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture: expected one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation: expected one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1:
            raise ConfigError("input_dim: must be >= 1")
        if self.architecture != "quadratic" and self.num_classes < 2:
            raise ConfigError("num_classes: must be >= 2")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        if self.architecture == "linear" and self.hidden_sizes:
            raise ConfigError("hidden_sizes: a linear model has no hidden layers")
        if self.architecture == "mlp" and not self.hidden_sizes:
            raise ConfigError("hidden_sizes: an mlp needs at least one hidden layer")

    @property
    def binary(self) -> bool:
        return self.num_classes == 2

    @property
    def output_dim(self) -> int:
        return 1 if self.binary else self.num_classes

    @property
    def loss_kind(self) -> str:
        if self.architecture == "quadratic":
            return "quadratic"
        return "bce_single_logit" if self.binary else "softmax_ce"

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every linear layer, input side first."""
        if self.architecture == "quadratic":
            return []
        sizes = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return [(sizes[k + 1], sizes[k]) for k in range(len(sizes) - 1)]

    def layer_spans(self) -> tuple[tuple[str, int, int], ...]:
        if self.architecture == "quadratic":
            return (("theta", 0, self.input_dim),)
        spans, start = [], 0
        for k, (o, i) in enumerate(self.layer_shapes()):
            end = start + o * i + o
            spans.append((f"layer{k}", start, end))
            start = end
        return tuple(spans)

    @property
    def num_params(self) -> int:
        return self.layer_spans()[-1][2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["hidden_sizes"] = tuple(d.get("hidden_sizes", ()))
        return cls(**d)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layer_spans: tuple[tuple[str, int, int], ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        spans = tuple((str(name), int(s), int(e)) for name, s, e in self.layer_spans)
        if not spans:
            spans = (("all", 0, values.size),)
        object.__setattr__(self, "layer_spans", spans)
        expected = 0
        for name, s, e in spans:
            if s != expected or e <= s:
                raise DimensionError(f"layer span {name!r} does not continue the partition at {expected}")
            expected = e
        if expected != values.size:
            raise DimensionError(f"layer spans cover {expected} entries but values has {values.size}")

    def __len__(self) -> int:
        return self.values.size

    def layer(self, k: int) -> np.ndarray:
        _, s, e = self.layer_spans[k]
        return self.values[s:e]

    def like(self, values) -> "ParamVector":
        return ParamVector(values, self.layer_spans)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layer_spans)


@dataclass(frozen=True)
class Example:
    id: int
    features: np.ndarray
    label: int
    is_adversarial: bool = False


def as_params(spec: ModelSpec, values) -> ParamVector:
    if isinstance(values, ParamVector):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size != spec.num_params:
        raise DimensionError(f"expected {spec.num_params} parameters, got shape {values.shape}")
    return ParamVector(values, spec.layer_spans())


def _values(spec, params) -> np.ndarray:
    v = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    if v.shape != (spec.num_params,):
        raise DimensionError(f"expected {spec.num_params} parameters, got shape {v.shape}")
    return v


def unpack(spec: ModelSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into the flat parameter vector."""
    layers = []
    for (o, i), (_, s, _) in zip(spec.layer_shapes(), spec.layer_spans()):
        layers.append((values[s:s + o * i].reshape(o, i), values[s + o * i:s + o * i + o]))
    return layers


def _check_X(spec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"expected inputs of width {spec.input_dim}, got shape {X.shape}")
    return X


def _check_y(spec, y, n) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, int(y))
    y = y.astype(np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if spec.architecture != "quadratic" and ((y < 0).any() or (y >= spec.num_classes).any()):
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    return y


def _act(spec, z):
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _act_prime(spec, z, h):
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def _act_second(spec, z, h):
    if spec.activation == "relu":
        return np.zeros_like(z)
    return -2.0 * h * (1.0 - h * h)


def _forward_cache(spec, values, X):
    """Inputs to every layer and every pre-activation, for backprop."""
    hs, zs = [X], []
    layers = unpack(spec, values)
    for k, (W, b) in enumerate(layers):
        z = hs[-1] @ W.T + b
        zs.append(z)
        if k < len(layers) - 1:
            hs.append(_act(spec, z))
    return layers, hs, zs


def forward(spec: ModelSpec, params, x) -> np.ndarray:
    """Pre-softmax activations for a single input (length 1 in binary mode)."""
    X = _check_X(spec, x)
    if X.shape[0] != 1:
        raise DimensionError("forward takes a single example; use forward_batch")
    return forward_batch(spec, params, X)[0]


def forward_batch(spec: ModelSpec, params, X) -> np.ndarray:
    values = _values(spec, params)
    X = _check_X(spec, X)
    if spec.architecture == "quadratic":
        return values[None, :] - X
    return _forward_cache(spec, values, X)[2][-1]


def penultimate_features(spec: ModelSpec, params, X) -> np.ndarray:
    """Input to the final linear layer: x itself for a linear model."""
    values = _values(spec, params)
    X = _check_X(spec, X)
    if spec.architecture == "quadratic":
        return X
    return _forward_cache(spec, values, X)[1][-1]


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(A):
    Z = A - A.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def loss(a, y: int, kind: str) -> float:
    """Loss of one activation vector ``a`` against label ``y``."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    return float(losses(a[None, :], np.array([y]), kind)[0])


def losses(A, y, kind: str) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if kind == "bce_single_logit":
        if ((y != 0) & (y != 1)).any():
            raise ValueError("binary labels must be 0 or 1")
        a = A[:, 0]
        return np.logaddexp(0.0, a) - y * a
    if kind == "softmax_ce":
        if (y < 0).any() or (y >= A.shape[1]).any():
            raise ValueError(f"label out of range [0, {A.shape[1]})")
        m = A.max(axis=1)
        lse = m + np.log(np.exp(A - m[:, None]).sum(axis=1))
        return lse - A[np.arange(len(y)), y]
    raise ValueError(f"unknown loss kind {kind!r}")


def dloss_da(A, y, kind: str) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if kind == "bce_single_logit":
        return _sigmoid(A) - np.asarray(y, dtype=np.float64)[:, None]
    if kind == "softmax_ce":
        P = _softmax(A)
        P[np.arange(len(y)), y] -= 1.0
        return P
    raise ValueError(f"unknown loss kind {kind!r}")


def _d2loss_da2_times(A, R, kind):
    if kind == "bce_single_logit":
        s = _sigmoid(A)
        return s * (1.0 - s) * R
    P = _softmax(A)
    PR = P * R
    return PR - P * PR.sum(axis=1, keepdims=True)


def example_losses(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Per-example loss including the weight-decay term."""
    values = _values(spec, params)
    X = _check_X(spec, X)
    y = _check_y(spec, y, X.shape[0])
    reg = spec.weight_decay * float(values @ values)
    if spec.architecture == "quadratic":
        D = values[None, :] - X
        return 0.5 * np.einsum("ij,ij->i", D, D) + reg
    return losses(forward_batch(spec, values, X), y, spec.loss_kind) + reg


def objective(spec: ModelSpec, params, X, y) -> float:
    """Empirical risk: mean per-example loss."""
    return float(example_losses(spec, params, X, y).mean())


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    """Predicted labels; binary thresholds the logit at 0 (a == 0 -> class 0)."""
    A = forward_batch(spec, params, X)
    if spec.binary:
        return (A[:, 0] > 0).astype(np.int64)
    return np.argmax(A, axis=1).astype(np.int64)


def _backward(spec, layers, hs, zs, delta):
    """Per-layer output gradients delta_k, last layer first, given dl/da."""
    deltas = [delta]
    for k in range(len(layers) - 1, 0, -1):
        W = layers[k][0]
        delta = (delta @ W) * _act_prime(spec, zs[k - 1], hs[k])
        deltas.append(delta)
    return deltas[::-1]


def per_example_grads(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Gradient of each example's loss, shape (n, num_params)."""
    values = _values(spec, params)
    X = _check_X(spec, X)
    y = _check_y(spec, y, X.shape[0])
    n = X.shape[0]
    if spec.architecture == "quadratic":
        G = values[None, :] - X
    else:
        layers, hs, zs = _forward_cache(spec, values, X)
        deltas = _backward(spec, layers, hs, zs, dloss_da(zs[-1], y, spec.loss_kind))
        G = np.empty((n, spec.num_params))
        for (_, s, e), h, d in zip(spec.layer_spans(), hs, deltas):
            o, i = d.shape[1], h.shape[1]
            G[:, s:s + o * i] = (d[:, :, None] * h[:, None, :]).reshape(n, o * i)
            G[:, s + o * i:e] = d
    if spec.weight_decay:
        G += 2.0 * spec.weight_decay * values
    return G


def grad(spec: ModelSpec, params, example, label_override=None) -> ParamVector:
    """Gradient of one example's loss.

    ``example`` is an :class:`Example` or an ``(x, y)`` pair.  When
    ``label_override`` is given it replaces the example's label.
    """
    if isinstance(example, Example):
        x, y = example.features, example.label
    else:
        x, y = example
    if label_override is not None:
        y = label_override
    g = per_example_grads(spec, params, x, [y])[0]
    return ParamVector(g, spec.layer_spans())


def mean_grad(spec: ModelSpec, params, X, y) -> tuple[np.ndarray, float]:
    """Gradient and value of the mean loss over a batch, without per-example storage."""
    values = _values(spec, params)
    X = _check_X(spec, X)
    y = _check_y(spec, y, X.shape[0])
    n = X.shape[0]
    reg = spec.weight_decay * float(values @ values)
    if spec.architecture == "quadratic":
        D = values[None, :] - X
        g = D.mean(axis=0)
        value = 0.5 * float(np.einsum("ij,ij->", D, D)) / n
    else:
        layers, hs, zs = _forward_cache(spec, values, X)
        value = float(losses(zs[-1], y, spec.loss_kind).mean())
        deltas = _backward(spec, layers, hs, zs, dloss_da(zs[-1], y, spec.loss_kind))
        g = np.empty(spec.num_params)
        for (_, s, e), h, d in zip(spec.layer_spans(), hs, deltas):
            o, i = d.shape[1], h.shape[1]
            g[s:s + o * i] = (d.T @ h).ravel() / n
            g[s + o * i:e] = d.sum(axis=0) / n
    if spec.weight_decay:
        g = g + 2.0 * spec.weight_decay * values
    return g, value + reg


def hvp(spec: ModelSpec, params, X, y, v) -> np.ndarray:
    """Risk Hessian times ``v``, H = (1/n) sum_i Hess l(z_i), via the R-operator."""
    values = _values(spec, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != values.shape:
        raise DimensionError(f"vector has shape {v.shape}, parameters have {values.shape}")
    X = _check_X(spec, X)
    y = _check_y(spec, y, X.shape[0])
    return _hvp(spec, values, X, y, v)


def _hvp(spec, values, X, y, v):
    n = X.shape[0]
    out = 2.0 * spec.weight_decay * v
    if spec.architecture == "quadratic":
        return out + v
    layers, hs, zs = _forward_cache(spec, values, X)
    vlayers = unpack(spec, v)

    # forward R-pass
    Rhs = [np.zeros_like(X)]
    Rzs = []
    for k, ((W, _), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        Rz = hs[k] @ VW.T + Rhs[k] @ W.T + Vb
        Rzs.append(Rz)
        if k < len(layers) - 1:
            Rhs.append(_act_prime(spec, zs[k], hs[k + 1]) * Rz)

    kind = spec.loss_kind
    delta = dloss_da(zs[-1], y, kind)
    Rdelta = _d2loss_da2_times(zs[-1], Rzs[-1], kind)
    result = np.empty(spec.num_params)
    spans = spec.layer_spans()
    for k in range(len(layers) - 1, -1, -1):
        _, s, e = spans[k]
        o, i = layers[k][0].shape
        result[s:s + o * i] = ((Rdelta.T @ hs[k]) + (delta.T @ Rhs[k])).ravel() / n
        result[s + o * i:e] = Rdelta.sum(axis=0) / n
        if k == 0:
            break
        W, VW = layers[k][0], vlayers[k][0]
        back = delta @ W
        Rdelta_next = (Rdelta @ W + delta @ VW) * _act_prime(spec, zs[k - 1], hs[k]) \
            + back * _act_second(spec, zs[k - 1], hs[k]) * Rzs[k - 1]
        delta = back * _act_prime(spec, zs[k - 1], hs[k])
        Rdelta = Rdelta_next
    return out + result


def dense_hessian(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Full risk Hessian assembled column by column from hvp; small models only."""
    P = spec.num_params
    H = np.empty((P, P))
    for j in range(P):
        e = np.zeros(P)
        e[j] = 1.0
        H[:, j] = hvp(spec, params, X, y, e)
    return 0.5 * (H + H.T)


def lissa_inverse_hvp(spec: ModelSpec, params, X, y, v, damp=0.01, scale=3e7,
                      depth=1000, repeats=10, rng=None, batch_size=1) -> np.ndarray:
    """Stochastic estimate of H^-1 v (Agarwal et al.'s LiSSA recursion).

    Each repeat runs ``h <- v + (I - (H_B + damp*I)/scale) h`` for ``depth``
    steps, where ``H_B`` is the Hessian of a random mini-batch of
    ``batch_size`` training examples drawn with ``rng``.  The average of the
    final iterates is divided by ``scale``.
    """
    values = _values(spec, params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != values.shape:
        raise DimensionError(f"vector has shape {v.shape}, parameters have {values.shape}")
    if damp < 0 or scale <= 0 or depth < 1 or repeats < 1:
        raise ConfigError("lissa: need damp >= 0, scale > 0, depth >= 1, repeats >= 1")
    X = _check_X(spec, X)
    y = _check_y(spec, y, X.shape[0])
    rng = np.random.default_rng(rng)
    n = X.shape[0]
    total = np.zeros_like(v)
    for _ in range(repeats):
        h = v.copy()
        draws = rng.integers(0, n, size=(depth, batch_size))
        for idx in draws:
            Hh = _hvp(spec, values, X[idx], y[idx], h)
            h = v + h - (Hh + damp * h) / scale
            norm = float(np.linalg.norm(h))
            if not np.isfinite(norm) or norm > LISSA_DIVERGENCE_NORM:
                raise LissaDivergenceError(damp, scale, norm)
        total += h
    return total / repeats / scale
