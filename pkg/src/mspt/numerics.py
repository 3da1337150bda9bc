"""Dense tensor kernels with tape-based reverse-mode differentiation.

Tensors wrap contiguous row-major numpy buffers in float32 or float64.
Differentiable operations optionally record a closure on a Tape; replaying the
tape in exact reverse order of recording accumulates gradients into the
``grad`` slot of every tensor that participated in the forward pass.

Kernels are deterministic: the same inputs produce bitwise-identical outputs
on repeated runs, so a seeded forward+backward is reproducible end to end.
"""

from __future__ import annotations

import math
import weakref

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, TapeStateError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Epsilon sits inside the square root of the variance term.
LN_EPS = 1e-5

# Plain Python floats: numpy scalar constants would promote f32 inputs to f64.
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def resolve_dtype(precision):
    """Map a precision name ('f32'/'f64') or numpy dtype to a numpy dtype."""
    if isinstance(precision, str):
        if precision not in DTYPES:
            raise ShapeError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[precision])
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dt}; only float32 and float64 are supported")
    return dt


# ---------------------------------------------------------------------------
# Instrumentation: multiply counting and allocation tracking
# ---------------------------------------------------------------------------

_MUL_COUNTERS: list["MultiplyCounter"] = []
_ALLOC_TRACKERS: list["AllocationTracker"] = []


class MultiplyCounter:
    """Context manager counting scalar multiplies issued by dense products.

    Only multiplies performed inside the matmul kernel are counted (batch *
    m * n * k per call). Elementwise scalings, reductions, and softmax work
    are not dense products and do not contribute.
    """

    def __init__(self):
        self.count = 0

    def __enter__(self):
        _MUL_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _MUL_COUNTERS.remove(self)
        return False


def _count_muls(n):
    for counter in _MUL_COUNTERS:
        counter.count += n


class AllocationTracker:
    """Context manager tracking the high-water mark of live tensor bytes.

    Every Tensor allocated while the tracker is active adds its payload size
    to the live total; the total drops when the tensor is garbage collected.
    ``peak`` holds the maximum live total observed.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _add(self, nbytes):
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def _release(self, nbytes):
        self.live -= nbytes

    def __enter__(self):
        _ALLOC_TRACKERS.append(self)
        return self

    def __exit__(self, *exc):
        _ALLOC_TRACKERS.remove(self)
        return False


def _release_alloc(trackers, nbytes):
    for tracker in trackers:
        tracker._release(nbytes)


def _track_alloc(tensor):
    if not _ALLOC_TRACKERS:
        return
    active = list(_ALLOC_TRACKERS)
    nbytes = tensor.data.nbytes
    for tracker in active:
        tracker._add(nbytes)
    weakref.finalize(tensor, _release_alloc, active, nbytes)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A contiguous row-major float array with a gradient slot."""

    __slots__ = ("data", "grad", "_grad_owned", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep their shape.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self._grad_owned = False
        _track_alloc(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Return the underlying array. Treat it as read-only."""
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of forward operations, replayed in reverse for gradients."""

    def __init__(self):
        self.records = []

    def record(self, op, inputs, output, backward):
        self.records.append(TapeRecord(op, inputs, output, backward))

    def backward(self, loss, seed_grad=None):
        """Accumulate d(loss)/d(tensor) into .grad for every recorded tensor.

        The loss must be a scalar tensor unless an explicit seed gradient of
        the same shape is supplied.
        """
        if not self.records:
            raise TapeStateError("backward called before any forward operation was recorded")
        if seed_grad is None:
            if loss.data.ndim != 0:
                raise ShapeError(
                    f"loss has shape {tuple(loss.shape)}; a seed gradient is required "
                    "for non-scalar outputs"
                )
            seed_grad = np.ones((), dtype=loss.data.dtype)
        seed_grad = np.asarray(seed_grad, dtype=loss.data.dtype)
        if seed_grad.shape != loss.data.shape:
            raise ShapeError(
                f"seed gradient shape {seed_grad.shape} does not match loss shape {loss.data.shape}"
            )
        _accumulate(loss, seed_grad)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                # This intermediate never reached the loss; its adjoint is zero.
                continue
            rec.backward(g)


def _accumulate(t, g):
    # Most tensors receive exactly one contribution, so the first one is
    # borrowed as-is (it may alias a downstream gradient, which is final by
    # the time it reaches us). A second contribution materializes a fresh
    # buffer; only owned buffers are ever mutated in place.
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _grad_slab(t):
    """A writable gradient buffer for in-place scatter adjoints."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        t._grad_owned = True
    elif not t._grad_owned:
        t.grad = t.grad.copy()
        t._grad_owned = True
    return t.grad


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor_pair(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")
    return a.data, b.data


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a, b, tape=None):
    """Matrix product over the last two axes, with numpy-style batch broadcast.

    For operands (..., m, k) and (..., k, n) the result is (..., m, n). The
    scalar multiply count (batch * m * n * k) feeds any active MultiplyCounter.
    """
    ad, bd = _as_tensor_pair(a, b, "matmul")
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} vs {bd.shape}")
    out_arr = np.matmul(ad, bd)
    _count_muls(out_arr.size * ad.shape[-1])
    out = Tensor(out_arr)
    if tape is not None:

        def backward(g):
            da = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            db = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            _accumulate(a, da)
            _accumulate(b, db)

        tape.record("matmul", (a, b), out, backward)
    return out


def add(a, b, tape=None):
    """Elementwise sum with numpy broadcasting."""
    ad, bd = _as_tensor_pair(a, b, "add")
    out = Tensor(ad + bd)
    if tape is not None:

        def backward(g):
            _accumulate(a, _unbroadcast(g, ad.shape))
            _accumulate(b, _unbroadcast(g, bd.shape))

        tape.record("add", (a, b), out, backward)
    return out


def sub(a, b, tape=None):
    """Elementwise difference with numpy broadcasting."""
    ad, bd = _as_tensor_pair(a, b, "sub")
    out = Tensor(ad - bd)
    if tape is not None:

        def backward(g):
            _accumulate(a, _unbroadcast(g, ad.shape))
            _accumulate(b, _unbroadcast(-g, bd.shape))

        tape.record("sub", (a, b), out, backward)
    return out


def mul(a, b, tape=None):
    """Elementwise product with numpy broadcasting."""
    ad, bd = _as_tensor_pair(a, b, "mul")
    out = Tensor(ad * bd)
    if tape is not None:

        def backward(g):
            _accumulate(a, _unbroadcast(g * bd, ad.shape))
            _accumulate(b, _unbroadcast(g * ad, bd.shape))

        tape.record("mul", (a, b), out, backward)
    return out


def add_const(a, c, tape=None):
    """Add a constant array or scalar; the constant receives no gradient."""
    out = Tensor(a.data + np.asarray(c, dtype=a.data.dtype))
    if tape is not None:

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.data.shape))

        tape.record("add_const", (a,), out, backward)
    return out


def mul_const(a, c, tape=None):
    """Multiply by a constant array or scalar; the constant receives no gradient."""
    cd = np.asarray(c, dtype=a.data.dtype)
    out = Tensor(a.data * cd)
    if tape is not None:

        def backward(g):
            _accumulate(a, _unbroadcast(g * cd, a.data.shape))

        tape.record("mul_const", (a,), out, backward)
    return out


def gelu(x, tape=None):
    """Gaussian error linear unit in its exact form x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf)
    if tape is not None:

        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
            _accumulate(x, g * (cdf + xd * pdf))

        tape.record("gelu", (x,), out, backward)
    return out


def softmax_rows(x, valid=None, tape=None):
    """Row-stochastic softmax over the last axis.

    ``valid`` is an optional boolean array broadcastable to x; positions that
    are False are excluded from the distribution. A row with no valid position
    yields all-zero probabilities. NaN input raises NumericError.
    """
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    if valid is not None:
        xd = np.where(valid, xd, -np.inf)
    m = np.max(xd, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    s = np.sum(e, axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)
    # A second normalization pass pulls row sums to within 2 ulps of 1.
    s2 = np.sum(y, axis=-1, keepdims=True)
    y = y / np.where(s2 == 0.0, 1.0, s2)
    out = Tensor(y)
    if tape is not None:

        def backward(g):
            inner = np.sum(g * y, axis=-1, keepdims=True)
            _accumulate(x, y * (g - inner))

        tape.record("softmax_rows", (x,), out, backward)
    return out


def layer_norm(x, gain, bias, tape=None, eps=LN_EPS):
    """Normalize the last axis to zero mean and unit variance, then scale/shift.

    gain and bias are 1-d tensors matching the trailing extent.
    """
    xd = x.data
    n = xd.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match trailing extent {n}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if tape is not None:

        def backward(g):
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))
            lead = tuple(range(g.ndim - 1))
            _accumulate(gain, (g * xhat).sum(axis=lead))
            _accumulate(bias, g.sum(axis=lead))

        tape.record("layer_norm", (x, gain, bias), out, backward)
    return out


def reshape(x, shape, tape=None):
    """View the same data under a new shape (copying to stay contiguous)."""
    out = Tensor(x.data.reshape(shape).copy())
    if tape is not None:

        def backward(g):
            _accumulate(x, g.reshape(x.data.shape))

        tape.record("reshape", (x,), out, backward)
    return out


def swap_axes(x, ax1, ax2, tape=None):
    """Exchange two axes, materializing a contiguous copy."""
    out = Tensor(np.ascontiguousarray(np.swapaxes(x.data, ax1, ax2)))
    if tape is not None:

        def backward(g):
            _accumulate(x, np.swapaxes(g, ax1, ax2))

        tape.record("swap_axes", (x,), out, backward)
    return out


def concat(parts, axis, tape=None):
    """Concatenate tensors along an axis."""
    parts = tuple(parts)
    dtypes = {p.data.dtype for p in parts}
    if len(dtypes) > 1:
        raise ShapeError(f"concat: mixed dtypes {sorted(str(d) for d in dtypes)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if tape is not None:
        extents = [p.data.shape[axis] for p in parts]

        def backward(g):
            start = 0
            for p, ext in zip(parts, extents):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + ext)
                _accumulate(p, g[tuple(idx)])
                start += ext

        tape.record("concat", parts, out, backward)
    return out


def slice_axis(x, axis, start, stop, tape=None):
    """Take the half-open range [start, stop) along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(x.data[idx]))
    if tape is not None:

        def backward(g):
            _grad_slab(x)[idx] += g

        tape.record("slice_axis", (x,), out, backward)
    return out


def take_rows(x, indices, tape=None):
    """Gather rows along the second-to-last axis; index -1 yields a zero row.

    For x of shape (..., N, F) and integer indices of shape (M,), the result
    has shape (..., M, F). The adjoint scatter-adds gradients back, dropping
    the -1 slots.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows indices must be 1-d, got shape {idx.shape}")
    n = x.data.shape[-2]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise ShapeError(f"take_rows index out of range for extent {n}")
    safe = np.where(idx < 0, 0, idx)
    gathered = np.take(x.data, safe, axis=-2)
    if (idx < 0).any():
        mask = (idx >= 0).astype(x.data.dtype)[:, None]
        gathered = gathered * mask
    out = Tensor(gathered)
    if tape is not None:
        keep = idx >= 0
        kept = idx[keep]
        all_kept = bool(keep.all())
        # Permutation-style gathers (the common case) scatter by plain fancy
        # assignment; np.add.at is only needed when rows repeat.
        no_repeats = kept.size == np.unique(kept).size

        def backward(g):
            slab = _grad_slab(x)
            gk = g if all_kept else g[..., keep, :]
            if no_repeats:
                slab[..., kept, :] += gk
            else:
                lead = x.data.shape[:-2]
                n_rows, f = x.data.shape[-2], x.data.shape[-1]
                batch = int(np.prod(lead)) if lead else 1
                g2 = np.ascontiguousarray(
                    gk.reshape(batch, kept.size, f).transpose(1, 0, 2)
                ).reshape(kept.size, batch * f)
                dx2 = np.zeros((n_rows, batch * f), dtype=x.data.dtype)
                np.add.at(dx2, kept, g2)
                slab += dx2.reshape(n_rows, batch, f).transpose(1, 0, 2).reshape(
                    x.data.shape
                )

        tape.record("take_rows", (x,), out, backward)
    return out


def sum_axis(x, axis, tape=None, keepdims=False):
    """Sum along one axis."""
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    if tape is not None:

        def backward(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.data.shape).copy())

        tape.record("sum_axis", (x,), out, backward)
    return out


def sum_all(x, tape=None):
    """Sum every element to a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:

        def backward(g):
            _accumulate(x, np.full(x.data.shape, g, dtype=x.data.dtype))

        tape.record("sum_all", (x,), out, backward)
    return out


def max_axis(x, axis, tape=None):
    """Maximum along one axis; the adjoint routes to the first maximal entry."""
    xd = x.data
    amax = np.argmax(xd, axis=axis)
    out = Tensor(np.max(xd, axis=axis))
    if tape is not None:

        def backward(g):
            dx = np.zeros_like(xd)
            np.put_along_axis(
                dx, np.expand_dims(amax, axis), np.expand_dims(g, axis), axis
            )
            _accumulate(x, dx)

        tape.record("max_axis", (x,), out, backward)
    return out


def sqrt(x, tape=None):
    """Elementwise square root. Callers guard against zero inputs."""
    y = np.sqrt(x.data)
    out = Tensor(y)
    if tape is not None:

        def backward(g):
            _accumulate(x, g / (2.0 * y))

        tape.record("sqrt", (x,), out, backward)
    return out
