"""Minimal neural kernels: reverse-mode tape, dense layers, losses, Adam.

Everything runs in float64 numpy. Gradients come from a small tape: each
op records its parents and a closure that maps the output gradient to
parent gradients, and ``backward`` walks the tape in reverse topological
order. ``grad_check`` verifies any analytic gradient against central
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .packages import ValidationError

PROB_EPS = 1e-7  # probability clipping keeps losses finite

ACTIVATIONS = ("relu", "sigmoid", "identity")


class Tensor:
    """Node in the computation graph; wraps a float64 array."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents: tuple = (), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def linear(x, W, b) -> Tensor:
    """Affine map ``x @ W.T + b`` with W shaped (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.value.ndim != 2 or x.value.shape[1] != W.value.shape[1]:
        raise ValidationError(
            f"linear: input shape {x.value.shape} incompatible with W {W.value.shape}"
        )
    return Tensor(
        x.value @ W.value.T + b.value,
        (x, W, b),
        lambda g: (g @ W.value, g.T @ x.value, g.sum(axis=0)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.value)
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return Tensor(t, (x,), lambda g: (g * (1.0 - t * t),))


def absval(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(np.log(x.value), (x,), lambda g: (g / x.value,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.value > lo) & (x.value < hi)
    return Tensor(np.clip(x.value, lo, hi), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return Tensor(p, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), backward_fn)


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return Tensor(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    return Tensor(x.value.mean(), (x,), lambda g: (np.full(x.value.shape, float(g) / n),))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` on every node in the graph. When ``params`` is
    given, returns per-parameter gradient arrays (zeros for parameters
    that did not enter the graph).
    """
    if loss.value.size != 1:
        raise ValidationError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.value)
    return out


# --- layers -------------------------------------------------------------------

@dataclass
class DenseLayer:
    """Fully connected layer: W (out, in), b (out,), and an activation."""

    W: Tensor
    b: Tensor
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation {self.activation!r} not one of {ACTIVATIONS}")
        if self.W.value.ndim != 2 or self.b.value.shape != (self.W.value.shape[0],):
            raise ValidationError(
                f"inconsistent dense shapes W={self.W.value.shape} b={self.b.value.shape}"
            )


def dense_forward(layer: DenseLayer, x) -> tuple[Tensor, Tensor]:
    """Apply a dense layer; returns (output, cached pre-activation)."""
    pre = linear(as_tensor(x), layer.W, layer.b)
    if layer.activation == "relu":
        return relu(pre), pre
    if layer.activation == "sigmoid":
        return sigmoid(pre), pre
    return pre, pre


# --- losses -------------------------------------------------------------------

def binary_cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on probabilities, clipped at PROB_EPS."""
    p = as_tensor(p)
    y = np.asarray(labels, dtype=np.float64).reshape(p.value.shape)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValidationError("binary labels must be 0 or 1")
    ph = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = add(mul(Tensor(y), log(ph)), mul(Tensor(1.0 - y), log(sub(Tensor(np.ones_like(y)), ph))))
    return scale(mean_all(ll), -1.0)


def categorical_cross_entropy(probs: Tensor, labels, n_classes: int = 3) -> Tensor:
    """Mean cross-entropy on a probability simplex; labels are class indices."""
    probs = as_tensor(probs)
    p2 = probs if probs.value.ndim == 2 else Tensor(probs.value.reshape(1, -1), (probs,), lambda g: (g.reshape(probs.value.shape),))
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != p2.value.shape[0]:
        raise ValidationError("label count does not match prediction rows")
    if np.any((y < 0) | (y >= n_classes)):
        raise ValidationError(f"class labels must be in [0, {n_classes})")
    onehot = np.zeros_like(p2.value)
    onehot[np.arange(y.shape[0]), y.astype(int)] = 1.0
    picked = sum_axis(mul(Tensor(onehot), log(clip(p2, PROB_EPS, 1.0 - PROB_EPS))), axis=1)
    return scale(mean_all(picked), -1.0)


def loss_forward(kind: str, prediction, label) -> Tensor:
    if kind == "binary_xent":
        return binary_cross_entropy(as_tensor(prediction), label)
    if kind == "categorical_xent_3":
        return categorical_cross_entropy(as_tensor(prediction), label, n_classes=3)
    raise ValidationError(f"unknown loss kind {kind!r}")


# --- initialization -----------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # he | glorot | zeros | ones


def init_params(specs: Sequence[ParamSpec], seed: int) -> dict[str, Tensor]:
    """Deterministic initialization: one stream, consumed in spec order.

    'he' draws std sqrt(2/fan_in) for relu layers, 'glorot' draws
    std sqrt(2/(fan_in+fan_out)); for a 2-d shape (rows, cols) fan_in is
    cols and fan_out is rows. Biases are zeros, except gate biases which
    callers initialize to ones so the gate starts mostly open.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    params: dict[str, Tensor] = {}
    for spec in specs:
        if spec.name in params:
            raise ValidationError(f"duplicate parameter name {spec.name!r}")
        if spec.init == "zeros":
            value = np.zeros(spec.shape)
        elif spec.init == "ones":
            value = np.ones(spec.shape)
        elif spec.init in ("he", "glorot"):
            if len(spec.shape) == 2:
                fan_in, fan_out = spec.shape[1], spec.shape[0]
            else:
                fan_in = fan_out = int(np.prod(spec.shape))
            std = np.sqrt(2.0 / fan_in) if spec.init == "he" else np.sqrt(2.0 / (fan_in + fan_out))
            value = rng.standard_normal(spec.shape) * std
        else:
            raise ValidationError(f"unknown init kind {spec.init!r}")
        params[spec.name] = Tensor(value)
    return params


def n_parameters(params: Mapping[str, Tensor]) -> int:
    return sum(p.value.size for p in params.values())


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam; moments are allocated lazily per parameter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.value.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- gradient checking ----------------------------------------------------------

def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    grads: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must rebuild the forward graph from the current parameter
    values on every call. Explicit ``grads`` override the analytic sweep,
    which lets tests verify that deliberately wrong gradients are caught.
    """
    if grads is None:
        grads = backward(loss_fn(), params)
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(grads[name]).reshape(-1)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().value)
            flat[i] = orig - eps
            f_minus = float(loss_fn().value)
            flat[i] = orig
            cd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(g[i]), abs(cd), 1e-8)
            worst = max(worst, abs(g[i] - cd) / denom)
    return worst


# --- checkpoint format ----------------------------------------------------------

def save_tensors(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Exact text dump: hex floats with shape headers; round-trips bit-for-bit."""
    lines = ["tensors v1"]
    lines.append("meta " + json.dumps(dict(meta or {}), sort_keys=True, ensure_ascii=False))
    for name in arrays:
        if any(ch.isspace() for ch in name):
            raise ValidationError(f"tensor name {name!r} must not contain whitespace")
        arr = np.asarray(arrays[name], dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.ndim}" + (f" {dims}" if dims else ""))
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim >= 1 else arr.reshape(1, 1)
        for row in rows:
            lines.append(" ".join(float(v).hex() for v in np.atleast_1d(row)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != "tensors v1":
        raise ValidationError(f"{path}: not a tensor dump (missing 'tensors v1' header)")
    if len(text) < 2 or not text[1].startswith("meta "):
        raise ValidationError(f"{path}: missing meta line")
    meta = json.loads(text[1][5:])
    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(text):
        line = text[i].strip()
        i += 1
        if not line:
            continue
        parts = line.split()
        if parts[0] != "tensor":
            raise ValidationError(f"{path}:{i}: expected tensor header, got {line!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        n_rows = shape[0] if ndim >= 1 else 1
        data = []
        for _ in range(n_rows):
            data.append([float.fromhex(tok) for tok in text[i].split()])
            i += 1
        arrays[name] = np.array(data, dtype=np.float64).reshape(shape)
    return arrays, meta
