"""Reverse-mode differentiation on dense numpy arrays.

Everything the conversion model needs is built from the primitives here:
elementwise arithmetic with broadcasting, matmul, 1-d (transposed and
depthwise) convolutions, reductions, the usual activations, embedding
lookup, an LSTM cell, gradient reversal and the straight-through
estimator.  Ops executed while a `Tape` is active record a backward rule;
`Tape.backward` replays the records in reverse to fill in `.grad` arrays.

Storage defaults to float32; sum/mean reductions accumulate in float64
before casting back.  `check_gradients` is the correctness oracle: it
compares every recorded gradient against central finite differences.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_STATE = threading.local()

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf tripwire that runs after every primitive."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes; names the op and shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class NonFiniteError(FloatingPointError):
    """Raised by the debug tripwire when an op produces NaN or Inf."""


class Tensor:
    """A dense array plus the gradient accumulated by the active tape."""

    __slots__ = ("values", "grad")

    def __init__(self, values, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of executed ops; reverse replay yields gradients.

    A tape and the tensors flowing through it are a single-threaded unit of
    work; independent tapes may run on separate threads.  Ops executed with
    no active tape compute values only.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._outer = None

    def __enter__(self) -> "Tape":
        self._outer = getattr(_STATE, "tape", None)
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every recorded input."""
        if loss.values.size != 1:
            raise ShapeError("backward", loss.shape)
        loss.grad = np.ones_like(loss.values)
        for out, bwd in reversed(self._nodes):
            if out.grad is None:
                continue
            bwd(out.grad)


def _active_tape() -> Tape | None:
    return getattr(_STATE, "tape", None)


def _record(op: str, out: Tensor, bwd: Callable[[np.ndarray], None]) -> Tensor:
    if _DEBUG_CHECKS and not np.isfinite(out.values).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _active_tape()
    if tape is not None:
        tape._nodes.append((out, bwd))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.values.dtype)
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.values.shape), copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (float64 accumulation)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting)


def _binary(op: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    try:
        out = Tensor(fwd(a.values, b.values))
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None

    def bwd(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(da(g), a.shape))
        _accum(b, _unbroadcast(db(g), b.shape))

    return _record(op, out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g: g * b.values, lambda g: g * a.values)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        "div", a, b, np.divide,
        lambda g: g / b.values,
        lambda g: -g * a.values / (b.values * b.values),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values)

    def bwd(g):
        _accum(a, -g)

    return _record("neg", out, bwd)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    out = Tensor(a.values ** p)

    def bwd(g):
        _accum(a, g * p * a.values ** (p - 1.0))

    return _record("power", out, bwd)


# ---------------------------------------------------------------------------
# activations and pointwise transcendentals


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y)

    def bwd(g):
        _accum(a, g * (1.0 - y * y))

    return _record("tanh", out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(y)

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return _record("sigmoid", out, bwd)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.values, 0.0)
    out = Tensor(y)

    def bwd(g):
        _accum(a, g * (a.values > 0.0))

    return _record("relu", out, bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    out = Tensor(y)

    def bwd(g):
        _accum(a, g * y)

    return _record("exp", out, bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values))

    def bwd(g):
        _accum(a, g / a.values)

    return _record("log", out, bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64)
        _accum(a, y * (g - inner.astype(g.dtype)))

    return _record("softmax", out, bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.values.reshape(shape))

    def bwd(g):
        _accum(a, g.reshape(a.values.shape))

    return _record("reshape", out, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    out = Tensor(a.values.T)

    def bwd(g):
        _accum(a, g.T)

    return _record("transpose", out, bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _record("concat", out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` elements starting at `start` along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, (start, length))
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.values[idx])

    def bwd(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        _accum(a, full)

    return _record("narrow", out, bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulators)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.values.shape))

    return _record("sum", out, bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.values.size if axis is None else a.values.shape[axis]
    out = Tensor(a.values.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.values.shape))

    return _record("mean", out, bwd)


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.values @ b.values)

    def bwd(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _record("matmul", out, bwd)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-d convolution over time.  x: [T, Cin], w: [K, Cin, Cout].

    Output length is floor((T + 2*padding - K) / stride) + 1.
    """
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    k = w.shape[0]
    xp = np.pad(x.values, ((padding, padding), (0, 0)))
    t_pad = xp.shape[0]
    if t_pad < k:
        raise ShapeError("conv1d", x.shape, w.shape)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)[::stride]
    t_out = windows.shape[0]
    out = Tensor(np.einsum("tik,kio->to", windows, w.values))

    def bwd(g):
        _accum(w, np.einsum("tik,to->kio", windows, g))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j : j + stride * t_out : stride] += g @ w.values[j].T
        _accum(x, gxp[padding : t_pad - padding] if padding else gxp)

    return _record("conv1d", out, bwd)


def conv1d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-d convolution.  x: [T, Cin], w: [K, Cin, Cout].

    Output length is (T - 1) * stride + K - 2*padding.
    """
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d_transpose", x.shape, w.shape)
    t_in = x.shape[0]
    k = w.shape[0]
    full_len = (t_in - 1) * stride + k
    out_len = full_len - 2 * padding
    if out_len <= 0:
        raise ShapeError("conv1d_transpose", x.shape, w.shape)
    full = np.zeros((full_len, w.shape[2]), dtype=x.dtype)
    for j in range(k):
        full[j : j + stride * t_in : stride] += x.values @ w.values[j]
    out = Tensor(full[padding : full_len - padding] if padding else full)

    def bwd(g):
        g_full = np.zeros((full_len, w.shape[2]), dtype=g.dtype)
        g_full[padding : full_len - padding] = g
        gx = np.zeros_like(x.values)
        gw = np.zeros_like(w.values)
        for j in range(k):
            seg = g_full[j : j + stride * t_in : stride]
            gx += seg @ w.values[j].T
            gw[j] = x.values.T @ seg
        _accum(x, gx)
        _accum(w, gw)

    return _record("conv1d_transpose", out, bwd)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-d convolution, stride 1, same-length output.

    x: [T, C], w: [K, C] with K odd.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    k = w.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x.values, ((pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)
    out = Tensor(np.einsum("tck,kc->tc", windows, w.values))
    t = x.shape[0]

    def bwd(g):
        _accum(w, np.einsum("tck,tc->kc", windows, g))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j : j + t] += g * w.values[j]
        _accum(x, gxp[pad : pad + t])

    return _record("depthwise_conv1d", out, bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer ids; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    out = Tensor(table.values[ids])

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _record("embedding_lookup", out, bwd)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM step.  x: [1, I], h/c: [1, H], wx: [I, 4H], wh: [H, 4H], b: [4H].

    Gate order along the last axis is (input, forget, cell, output).
    Returns (h_next, c_next).
    """
    hidden = h.shape[1]
    gates = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(gates, 1, 0, hidden))
    f = sigmoid(narrow(gates, 1, hidden, hidden))
    g = tanh(narrow(gates, 1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, 1, 3 * hidden, hidden))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optional affine."""
    m = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    normalized = mul(centered, inv)
    if gain is not None:
        normalized = mul(normalized, gain)
    if bias is not None:
        normalized = add(normalized, bias)
    return normalized


# ---------------------------------------------------------------------------
# estimator / reversal / stop-gradient


def stop_gradient(a: Tensor) -> Tensor:
    """Detach: same values, no gradient flows back through this point."""
    return Tensor(a.values)


def grad_reverse(x: Tensor, weight: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -weight."""
    if weight < 0:
        raise ValueError(f"grad_reverse weight must be >= 0, got {weight}")
    out = Tensor(x.values)

    def bwd(g):
        _accum(x, -weight * g)

    return _record("grad_reverse", out, bwd)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward the quantized values; route the gradient to z_e as identity.

    No gradient reaches z_q through this op.
    """
    if z_e.shape != z_q.shape:
        raise ShapeError("straight_through", z_e.shape, z_q.shape)
    out = Tensor(z_q.values)

    def bwd(g):
        _accum(z_e, g)

    return _record("straight_through", out, bwd)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a 1-d logit vector against an integer label."""
    if logits.ndim != 1:
        raise ShapeError("cross_entropy", logits.shape)
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range [0, {n})")
    # max-shift as a constant keeps logsumexp exact for values and gradients
    shift = float(logits.values.max())
    lse = add(log(reduce_sum(exp(sub(logits, Tensor(np.asarray(shift, dtype=logits.dtype)))))),
              Tensor(np.asarray(shift, dtype=logits.dtype)))
    picked = reshape(narrow(logits, 0, int(label), 1), ())
    return sub(lse, picked)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    """Max relative error per parameter from a central finite-difference sweep."""

    per_param: dict[str, float]
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    rel_floor: float = 1e-4,
    sample_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar `fn()` against central differences.

    `fn` must be deterministic and close over `params`.  With
    `sample_per_param` set, only that many randomly chosen elements of each
    parameter are probed (the analytic gradient is still the full one).
    Relative error uses max(|analytic|, |numeric|, rel_floor) as denominator.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.values).all():
        raise NonFiniteError("check_gradients: fn() returned a non-finite value")
    zero_grads(params.values())
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }
    if rng is None:
        rng = np.random.default_rng(0)

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        ana = analytic[name].reshape(-1)
        if sample_per_param is not None and flat.size > sample_per_param:
            idxs = rng.choice(flat.size, size=sample_per_param, replace=False)
        else:
            idxs = range(flat.size)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().values)
            flat[i] = orig - eps
            f_minus = float(fn().values)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(ana[i]) - numeric)
            worst = max(worst, err / max(abs(float(ana[i])), abs(numeric), rel_floor))
        report[name] = worst
    return GradCheckReport(per_param=report, eps=eps)
