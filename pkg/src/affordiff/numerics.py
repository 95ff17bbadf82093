"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`GradientTape` is active and any input requires a gradient, appends a
node ``(output, inputs, vjp)`` to the tape. ``GradientTape.gradient`` replays
the nodes in reverse order.

Broadcasting is restricted to leading axes: for a binary elementwise op the
shapes must be equal or one must be a suffix of the other.
"""

from __future__ import annotations

import contextlib
import math
import threading
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_state = threading.local()
_default_dtype = np.dtype(np.float32)


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class DegenerateMaskWarning(RuntimeWarning):
    """An attention query had every key masked out."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class GradientTape:
    """Ordered record of primitive applications.

    A tape belongs to the thread that entered it; do not share one across
    threads. Tapes nest; primitives record onto the innermost active tape.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("gradient tapes exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(target)/d(source) for each source.

        ``target`` must be a scalar. Sources the target does not depend on
        get an all-zero gradient.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            np.asarray(grads[id(s)], dtype=s.dtype) if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]


def _tape_stack() -> list[GradientTape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a forward result as a Tensor and record its vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input. This is the
    single entry point every primitive goes through, so custom primitives
    can be built on it as well.
    """
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape.nodes.append((out, tuple(inputs), vjp))
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long) or long[len(long) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} broadcast beyond leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    return record_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    return record_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    return record_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a single matrix shared across ``a``'s leading axes or
    carries exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record_op("matmul", a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` fused into one tape node."""
    n_in, n_out = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {n_in}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, n_in).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("linear", out, inputs, vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record_op("getitem", np.array(x.data[index]), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def square(x: Tensor) -> Tensor:
    return record_op("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * (d * d * d)))

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)

    return record_op("gelu", 0.5 * d * (1.0 + t), (x,), vjp)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return record_op(
        "silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),)
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), vjp)


def _split_heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, length, width = a.shape
    return np.swapaxes(a.reshape(*lead, length, n_heads, width // n_heads), -2, -3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    a = np.swapaxes(a, -2, -3)
    *lead, length, n_heads, width = a.shape
    return a.reshape(*lead, length, n_heads * width)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None, n_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is ``[..., Lq, d]``, ``k`` is ``[..., Lk, d]``, ``v`` is
    ``[..., Lk, dv]``; ``mask`` is a boolean ``[..., Lk]`` (or ``[Lk]``)
    with True marking keys that may be attended. A query whose keys are all
    masked gets a zero output and a :class:`DegenerateMaskWarning`.
    """
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not line up")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if q.shape[-1] % n_heads or v.shape[-1] % n_heads:
        raise ShapeError(f"attention: widths not divisible by {n_heads} heads")
    dh = q.shape[-1] // n_heads
    scale = 1.0 / math.sqrt(dh)
    qh, kh, vh = (_split_heads(t.data, n_heads) for t in (q, k, v))
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale

    live = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != k.shape[:-1] and mask.shape != k.shape[-2:-1]:
            raise ShapeError(f"attention: mask {mask.shape} does not match key length of {k.shape}")
        keep = mask[..., None, None, :]
        scores = np.where(keep, scores, -np.inf)
        live = mask.any(axis=-1)
        if not np.all(live):
            warnings.warn("attention row with every key masked; returning zeros", DegenerateMaskWarning)
            scores = np.where(live[..., None, None, None], scores, 0.0)

    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    if live is not None and not np.all(live):
        p = p * live[..., None, None, None]
    out = _merge_heads(p @ vh)

    def vjp(g):
        gh = _split_heads(g, n_heads)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)

    return record_op("attention", out, (q, k, v), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return record_op("embedding", table.data[ids], (table,), vjp)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared difference over the entries selected by ``mask``."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        weight = np.ones_like(diff)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ShapeError(f"mse: mask {mask.shape} vs pred {pred.shape}")
        weight = mask.astype(diff.dtype)
    n = float(weight.sum())
    if n == 0:
        raise ValueError("mse: mask selects no supervised entries")
    value = np.asarray((diff * diff * weight).sum() / n, dtype=diff.dtype)

    def vjp(g):
        gp = (2.0 / n) * g * diff * weight
        return gp, -gp

    return record_op("mse", value, (pred, target), vjp)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def default_fd_step(dtype) -> float:
    """Central-difference step for an oracle evaluated at ``dtype``."""
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-3) -> np.ndarray:
    """Per-coordinate relative error.

    The denominator is ``max(|a|, |n|, floor_frac * scale)`` where ``scale``
    is the largest gradient magnitude, so coordinates orders of magnitude
    below the dominant ones are judged against the gradient's scale rather
    than against finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    floor = max(floor_frac * scale, np.finfo(np.float64).tiny)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float | None = None,
    tol: float = 1e-3,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    The tape runs at the point's own precision. The differences are always
    taken in 64-bit arithmetic on the same (already rounded) input, so a
    32-bit check measures the 32-bit backward pass and not the round-off of
    a 32-bit difference quotient. ``analytic`` overrides the tape gradient;
    it exists for negative controls.
    """
    base = Tensor(point).data.copy()
    if analytic is None:
        x = Tensor(base.copy(), requires_grad=True)
        with GradientTape() as tape:
            y = f(x)
        (analytic,) = tape.gradient(y, [x])
    ref = base.astype(np.float64)
    step = default_fd_step(np.float64) if step is None else step
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = numeric.reshape(-1)
    with default_dtype(np.float64):
        for i in range(base.size):
            hi = ref.copy()
            lo = ref.copy()
            hi.reshape(-1)[i] += step
            lo.reshape(-1)[i] -= step
            flat[i] = (float(f(Tensor(hi)).data) - float(f(Tensor(lo)).data)) / (2 * step)
    return GradCheckReport(np.asarray(analytic), numeric, relative_error(analytic, numeric), tol)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float | None = None,
    tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    oracle: tuple[Callable[[], Tensor], Sequence[Tensor]] | None = None,
) -> GradCheckReport:
    """Gradient check over (a random subset of) the coordinates of many tensors.

    ``loss_fn`` closes over ``params``; coordinates are perturbed in place
    and restored afterwards. ``oracle`` is an optional ``(loss_fn, params)``
    twin at 64-bit precision holding the same values; when given, the
    differences are taken on the twin.
    """
    params = list(params)
    with GradientTape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, params)
    fd_fn, fd_params = (loss_fn, params) if oracle is None else (oracle[0], list(oracle[1]))
    if [p.shape for p in fd_params] != [p.shape for p in params]:
        raise ShapeError("oracle parameters do not mirror the checked parameters")
    coords = [(pi, ci) for pi, p in enumerate(params) for ci in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picked]
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    for j, (pi, ci) in enumerate(coords):
        p = fd_params[pi]
        h = default_fd_step(p.dtype) if step is None else step
        flat = p.data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + h
        f_hi = float(fd_fn().data)
        flat[ci] = orig - h
        f_lo = float(fd_fn().data)
        flat[ci] = orig
        numeric[j] = (f_hi - f_lo) / (2 * h)
        analytic[j] = grads[pi].reshape(-1)[ci]
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tol)
