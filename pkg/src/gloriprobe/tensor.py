"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every forward op checks its output is finite and, when a :class:`GradTape`
is recording and an input requires a gradient, appends a vector-Jacobian
closure to the tape. :func:`backward` replays the tape in reverse order.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = sum_(mul(x, x))
    >>> backward(tape, y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GradTape",
    "NumericError",
    "ShapeError",
    "matmul",
    "linear",
    "activation",
    "relu",
    "tanh",
    "exp",
    "softmax_with_temperature",
    "layer_norm",
    "avg_pool2d",
    "upsample_nearest",
    "concat",
    "bce_with_logits",
    "add",
    "mul",
    "scale",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "expand",
    "backward",
    "grad_check",
]

EXP_LIMIT = 700.0


class NumericError(FloatingPointError):
    """A forward or backward value left the finite float64 range."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_state = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable ops executed inside its context.

    Tapes are thread-local; nesting pushes a new tape and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output")
    return arr


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(data, op)
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy-style broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    # b must equal a's shape or a's trailing shape (bias-style broadcast)
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul: batch axes incompatible, {a.shape} @ {b.shape}") from err

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``x`` of shape (..., d_in) and ``W`` (d_in, d_out)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    d_in, d_out = W.shape

    def vjp(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, d_out).sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _make(out, inputs, vjp, "linear")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "tanh":
        y = np.tanh(x.data)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    if kind == "exp":
        if x.data.size and x.data.max() > EXP_LIMIT:
            raise NumericError(f"exp: argument {x.data.max():.4g} overflows")
        y = np.exp(x.data)
        return _make(y, (x,), lambda g: (g * y,), "exp")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def exp(x: Tensor) -> Tensor:
    return activation("exp", x)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (g, _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from err
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``n`` copies of ``x``."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(out, (x,), lambda g: (g.sum(axis=axis),), "expand")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(
            p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(
                f"concat: extents differ off axis {axis}: "
                + ", ".join(str(q.shape) for q in parts)
            )
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, parts, vjp, "concat")


# ---------------------------------------------------------------------------
# attention, normalisation, pooling
# ---------------------------------------------------------------------------


def softmax_with_temperature(logits: Tensor, tau: Tensor) -> Tensor:
    """Row softmax of ``logits / tau`` along the last axis.

    ``tau`` has shape ``logits.shape[:-1]``; one temperature per row.
    """
    if tau.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax: tau {tau.shape} must be {logits.shape[:-1]}")
    t = tau.data
    if np.any(t <= 0):
        raise NumericError("softmax: temperature must be positive")
    l = logits.data
    z = (l - l.max(axis=-1, keepdims=True)) / t[..., None]
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        g_logits = gz / t[..., None]
        g_tau = -(gz * l).sum(axis=-1) / (t * t)
        return g_logits, g_tau

    return _make(p, (logits, tau), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), vjp, "layer_norm")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` block means over axes (-3, -2) of (..., H, W, d)."""
    if x.ndim < 3:
        raise ShapeError(f"avg_pool2d expects (..., H, W, d), got {x.shape}")
    *lead, H, W, d = x.shape
    if k < 1 or H % k or W % k:
        raise ShapeError(f"avg_pool2d: grid {H}x{W} not divisible by {k}")
    out = x.data.reshape(*lead, H // k, k, W // k, k, d).mean(axis=(-4, -2))

    def vjp(g):
        g = np.repeat(np.repeat(g, k, axis=-3), k, axis=-2)
        return (g / (k * k),)

    return _make(out, (x,), vjp, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim < 3:
        raise ShapeError(f"upsample_nearest expects (..., h, w, d), got {x.shape}")
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be >= 1")
    f = factor
    *lead, h, w, d = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=-3), f, axis=-2)

    def vjp(g):
        return (g.reshape(*lead, h, f, w, f, d).sum(axis=(-4, -2)),)

    return _make(out, (x,), vjp, "upsample_nearest")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy, evaluated as ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: labels {y.shape} vs logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: labels must be 0 or 1")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    sig = expit(z)

    def vjp(g):
        return ((sig - y) * (g / n),)

    return _make(np.asarray(loss), (logits,), vjp, "bce")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: GradTape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires a gradient.

    Gradients are recomputed from scratch for this tape (not accumulated
    across calls). Within the tape, a tensor feeding several ops receives
    the sum of their contributions, added in reverse tape order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    # a vjp may return None for inputs that do not require a gradient
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.requires_grad:
            node.out.grad = g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    # what remains are leaves (tensors never produced on this tape)
    for key, g in grads.items():
        t = seen[key]
        if t.requires_grad:
            t.grad = _finite(np.asarray(g, dtype=np.float64).reshape(t.shape), "backward")
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.ones_like(loss.data)


def grad_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes the tensor(s) in ``point`` and returns a scalar tensor. The
    error per coordinate is ``|analytic - fd| / max(1, |analytic|)``. With
    ``sample`` only that many randomly chosen coordinates per tensor are
    differenced (large parameter sets).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in points]
    with GradTape() as tape:
        out = f(*leaves)
    backward(tape, out)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        base = [p.data.copy() for p in points]
        flat = base[i].reshape(-1)
        coords = range(flat.size)
        if sample is not None and sample < flat.size:
            coords = rng.choice(flat.size, size=sample, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*[Tensor(b) for b in base]).item()
            flat[j] = orig - h
            fm = f(*[Tensor(b) for b in base]).item()
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[j]
            if not (np.isfinite(fd) and np.isfinite(a)):
                raise NumericError("grad_check: non-finite value")
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
