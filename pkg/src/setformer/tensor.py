"""Dense tensors with a reverse-mode differentiation tape.

A :class:`Tensor` is a shape plus a flat row-major float array (numpy,
C-contiguous) with an optional gradient slot. Operations executed inside a
``with tape() as t:`` block are recorded in execution order, which is already
topological, so ``t.backward(loss)`` is a single reverse sweep that sums
gradients over fan-out. A tape is single-use: backward consumes it.

Default element type is float32 (training); pass ``dtype=np.float64`` or use
:func:`using_dtype` for verification work -- finite differences are
meaningless at 32-bit. For float32 tensors every reduction (including the
matrix product, which is routed through BLAS after an upcast) accumulates in
float64 and rounds once, so reduced results are independent of the order of
the reduced elements.

Broadcast in the elementwise ops is one-sided: the second operand must
broadcast onto the first (an axis of size 1, or a missing leading axis,
repeats). That covers exactly the scalar, trailing-vector and keep-dims
cases the model uses.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a non-scalar, reuse of a consumed tape, ..."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)


def set_default_dtype(dtype):
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type (e.g. for grad checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = _default_dtype
        else:
            dtype = np.dtype(dtype)
            if dtype not in _FLOAT_DTYPES:
                raise ValueError(f"unsupported dtype {dtype}")
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # Internal fast path: arr is already a contiguous float array.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        """The underlying array (shared, not copied)."""
        return self.data

    def copy(self):
        return Tensor._wrap(self.data.copy(), self.requires_grad)

    def detach(self):
        return Tensor._wrap(self.data, False)

    def astype(self, dtype):
        return Tensor._wrap(np.ascontiguousarray(self.data, dtype=np.dtype(dtype)),
                            self.requires_grad)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __len__(self):
        return len(self._entries)

    @property
    def consumed(self):
        return self._consumed

    def record(self, out, inputs, backward_fn):
        if self._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Reverse sweep from a scalar loss; populates .grad on reachable leaves."""
        if self._consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        if not isinstance(loss, Tensor) or loss.shape != ():
            shape = getattr(loss, "shape", None)
            raise TapeError(f"backward requires a scalar loss, got shape {shape}")
        self._consumed = True
        produced = {id(out) for out, _, _ in self._entries}
        if id(loss) not in produced:
            raise TapeError("loss was not produced by operations on this tape")
        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        for out, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
        self._entries.clear()


_ACTIVE_TAPES: list[Tape] = []


@contextlib.contextmanager
def tape():
    t = Tape()
    _ACTIVE_TAPES.append(t)
    try:
        yield t
    finally:
        _ACTIVE_TAPES.pop()


def _emit(out_arr, inputs, backward_fn):
    """Wrap a result array; record on the active tape when a grad path exists."""
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(out_arr, requires_grad=True)
        _ACTIVE_TAPES[-1].record(out, inputs, backward_fn)
        return out
    return Tensor._wrap(out_arr)


def _check_same_dtype(a, b):
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _mm(a, b):
    # f32 matmul runs as f64 BLAS and rounds once: products of f32 pairs are
    # exact in f64, so the result is insensitive to summation order.
    if a.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (..., m, k) x (k, n), or (..., m, k) x (..., k, n)."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out = _mm(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _mm(g, b.data.swapaxes(-1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = _mm(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _mm(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def _broadcastable_onto(target, shape):
    if len(shape) > len(target):
        return False
    for t, s in zip(target[len(target) - len(shape):], shape):
        if s != 1 and s != t:
            return False
    return True


def _unbroadcast(g, shape):
    """Sum g down to `shape` (undo repeat over missing/size-1 axes)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    ones = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True, dtype=np.float64)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b):
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        if not _broadcastable_onto(a.shape, b.shape):
            raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")
        out = fwd(a.data, b.data)

        def backward_fn(g):
            ga = bwd_a(g, a.data, b.data) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = _unbroadcast(bwd_b(g, a.data, b.data), b.shape).astype(b.dtype, copy=False)
            return ga, gb

        return _emit(out, (a, b), backward_fn)

    c = float(b)
    out = fwd(a.data, np.asarray(c, dtype=a.dtype))

    def backward_scalar(g):
        return (bwd_a(g, a.data, c) if a.requires_grad else None,)

    return _emit(out, (a,), backward_scalar)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g,
                   lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a python scalar (recorded like mul with a constant)."""
    return mul(a, float(c))


def _unary_kernel(x, fwd_kernel, grad_kernel, save_output):
    flat = x.data.reshape(-1)
    y = fwd_kernel(flat)
    out = y.reshape(x.shape)
    saved = y if save_output else flat

    def backward_fn(g):
        return (grad_kernel(saved, np.ascontiguousarray(g.reshape(-1))).reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    return _unary_kernel(x, backend.relu_fwd, backend.relu_grad, save_output=False)


def tanh(x: Tensor) -> Tensor:
    return _unary_kernel(x, backend.tanh_fwd, backend.tanh_grad, save_output=True)


def sigmoid(x: Tensor) -> Tensor:
    return _unary_kernel(x, backend.sigmoid_fwd, backend.sigmoid_grad, save_output=True)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def _normalize_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _rows_view(arr, axis):
    """Collapse to 2-d with `axis` last; returns (rows, restore)."""
    ndim = arr.ndim
    if axis != ndim - 1:
        moved = np.ascontiguousarray(np.moveaxis(arr, axis, -1))
    else:
        moved = arr
    rows = moved.reshape(-1, moved.shape[-1])

    def restore(out2d):
        out = out2d.reshape(moved.shape)
        if axis != ndim - 1:
            out = np.ascontiguousarray(np.moveaxis(out, -1, axis))
        return out

    return rows, restore


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    rows, restore = _rows_view(x.data, axis)
    y2 = backend.softmax_rows(rows)
    out = restore(y2)

    def backward_fn(g):
        g2, _ = _rows_view(np.ascontiguousarray(g), axis)
        return (restore(backend.softmax_rows_grad(y2, np.ascontiguousarray(g2))),)

    return _emit(out, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / biased variance 1, then gamma*x+beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    _check_same_dtype(x, gamma)
    _check_same_dtype(x, beta)
    rows = x.data.reshape(-1, d)
    y2, mean, rstd = backend.layernorm_rows(rows, gamma.data, beta.data, eps)
    out = y2.reshape(x.shape)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx2, dgamma, dbeta = backend.layernorm_rows_grad(rows, gamma.data, mean, rstd, g2)
        return dx2.reshape(x.shape), dgamma, dbeta

    return _emit(out, (x, gamma, beta), backward_fn)


def _reduce(x, axis, mean):
    if axis is None:
        n = x.size
        out = x.data.sum(dtype=np.float64)
        out = np.asarray(out / n if mean else out, dtype=x.dtype)

        def backward_all(g):
            gx = np.broadcast_to(g, x.shape)
            return ((gx / n).astype(x.dtype) if mean else gx.astype(x.dtype, copy=False),)

        return _emit(out, (x,), backward_all)

    axis = _normalize_axis(axis, x.ndim)
    n = x.shape[axis]
    acc = x.data.sum(axis=axis, dtype=np.float64)
    out = ((acc / n) if mean else acc).astype(x.dtype)

    def backward_fn(g):
        gx = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        return ((gx / n).astype(x.dtype) if mean else gx.astype(x.dtype, copy=False),)

    return _emit(out, (x,), backward_fn)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    """Mean along `axis` (removed from the shape); all elements if axis is None."""
    return _reduce(x, axis, mean=True)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return _reduce(x, axis, mean=False)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _emit(out, (x,), backward_fn)


def record_op(out_arr, inputs, backward_fn) -> Tensor:
    """Register a custom differentiable operation on the active tape.

    `backward_fn(upstream)` must return one gradient array (or None) per input.
    """
    return _emit(out_arr, tuple(inputs), backward_fn)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks: list = field(default_factory=list)
    below_noise: int = 0

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.checked}, kinks={len(self.kinks)}, "
                f"below_noise={self.below_noise})")


def grad_check(f, xs, eps=1e-5, max_coords=None, rng=None, kink_tol=1e-2,
               noise_ulps=20.0):
    """Compare taped gradients of a scalar function against central differences.

    `f(*xs)` must be deterministic and scalar-valued, and every tensor in
    `xs` must be float64 -- at 32 bits the differences drown in rounding.
    Per coordinate the error is |a-n| / max(|a|, |n|, 1e-8) for analytic a
    and central-difference n; the result carries the max.

    Two oracle-reliability guards apply:

    * Coordinates where the two one-sided quotients disagree (relative
      `kink_tol`) straddle a non-differentiable point, e.g. relu at 0.
      They are excluded and reported in `kinks` as (tensor, flat index).
    * A central difference cannot resolve derivatives below its noise
      floor, a few ulps of f over 2*eps. When |a-n| sits under that floor
      (`noise_ulps` ulps) the disagreement is rounding, not signal; such
      coordinates count as agreeing and are tallied in `below_noise`.
      Coordinates with an exactly-zero derivative (e.g. any key-projection
      bias, which softmax shift-invariance makes inert) land here. A wrong
      backward rule still surfaces: its error scales with the gradient
      itself, far above the floor.
    """
    xs = list(xs)
    for x in xs:
        if x.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        x.requires_grad = True
        x.grad = None

    def value():
        out = f(*xs)
        if not isinstance(out, Tensor) or out.shape != ():
            raise ValueError("grad_check requires a scalar-valued function")
        return out.item()

    v0 = value()
    if value() != v0:
        raise ValueError("function is not deterministic; gradient check unreliable")

    with tape() as t:
        loss = f(*xs)
        t.backward(loss)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    coords = [(i, j) for i, x in enumerate(xs) for j in range(x.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(picked)]

    max_rel = 0.0
    kinks = []
    checked = 0
    below_noise = 0
    for i, j in coords:
        flat = xs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = value()
        flat[j] = orig - eps
        f_minus = value()
        flat[j] = orig
        noise = noise_ulps * np.spacing(max(abs(v0), abs(f_plus), abs(f_minus))) / (2 * eps)
        d_plus = (f_plus - v0) / eps
        d_minus = (v0 - f_minus) / eps
        if abs(d_plus - d_minus) > max(kink_tol * max(abs(d_plus), abs(d_minus)),
                                       10.0 * noise):
            kinks.append((i, j))
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[i].reshape(-1)[j]
        checked += 1
        if abs(a - numeric) <= noise:
            below_noise += 1
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return GradCheckResult(max_rel_error=max_rel, checked=checked, kinks=kinks,
                           below_noise=below_noise)
