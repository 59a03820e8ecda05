"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operator set the segmentation network needs is provided: conv2d,
batch_norm, relu, avg_pool_2x2, bilinear_upsample, concat, slice, add, mul,
scale, sum and softmax_cross_entropy.  There is no broadcasting.

Operations are recorded on the innermost active :class:`Tape`; outside a tape
(or inside :func:`no_grad`) nothing is recorded and the results are plain
values.
"""
import contextlib
import threading

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


class ShapeError(ValueError):
    pass


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def double_precision():
    """Create new tensors in float64; used only for gradient verification."""
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` (or the module-level :func:`backward`) on a scalar.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward):
        output._tape = self
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss):
        if not self.nodes:
            raise RuntimeError("backward called on an empty tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.output))
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, tg in zip(node.inputs, in_grads):
                if tg is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg
        # whatever is left belongs to leaves of this tape
        for node in self.nodes:
            for t in node.inputs:
                g = grads.pop(id(t), None)
                if g is None or id(t) in produced:
                    continue
                t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
        return loss

    def clear(self):
        self.nodes.clear()


def backward(loss):
    """Populate ``.grad`` on every leaf tensor that feeds ``loss``.

    Repeated calls accumulate into the existing gradients.
    """
    if loss._tape is None:
        raise RuntimeError("loss was not produced under a recording tape")
    return loss._tape.backward(loss)


def _record(op, inputs, out, backward_fn):
    if not _grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    stack = _tape_stack()
    if not stack:
        return out
    out.requires_grad = True
    stack[-1].record(op, inputs, out, backward_fn)
    return out


def _new(data, like):
    return Tensor(data, dtype=like.data.dtype)


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _check_same_shape("add", a, b)
    out = _new(a.data + b.data, a)
    return _record("add", (a, b), out, lambda g: (g, g))


def mul(a, b):
    _check_same_shape("mul", a, b)
    out = _new(a.data * b.data, a)
    return _record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = float(c)
    out = _new(a.data * a.data.dtype.type(c), a)
    return _record("scale", (a,), out, lambda g: (g * g.dtype.type(c),))


def tensor_sum(a):
    out = _new(np.asarray(a.data.sum(), dtype=a.data.dtype), a)
    return _record("sum", (a,), out, lambda g: (np.full_like(a.data, g.reshape(())),))


def relu(x):
    mask = x.data > 0
    out = _new(np.maximum(x.data, 0), x)
    return _record("relu", (x,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if len(t.shape) != len(ref) or any(
            d != r for k, (d, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} on axis {axis}")
    out = _new(np.concatenate([t.data for t in tensors], axis=axis), tensors[0])
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    ax = axis % len(ref)

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(index)]))
        return tuple(parts)

    return _record("concat", tuple(tensors), out, bw)


def slice_axis(x, axis, start, end):
    dim = x.shape[axis]
    if not (0 <= start < end <= dim):
        raise IndexError(f"slice: requested [{start}, {end}) on axis {axis} but extent is {dim}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, end)
    index = tuple(index)
    out = _new(x.data[index], x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record("slice", (x,), out, bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding, NCHW input and (K, C, kh, kw) weights."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: negative padding {padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: weight expects {wc} input channels but input has {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    w2 = weight.data.reshape(k, c * kh * kw)

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding, oh, ow)

    # one GEMM per sample keeps each sample's result independent of batch size
    out = np.empty((n, k, oh * ow), dtype=x.data.dtype)
    for i in range(n):
        np.matmul(w2, cols[i], out=out[i])
    if bias is not None:
        out += bias.data[None, :, None]
    result = _new(out.reshape(n, k, oh, ow), x)

    def bw(g):
        g2 = g.reshape(n, k, oh * ow)
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for i in range(n):
                gw += g2[i] @ cols[i].T
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.empty((n, c * kh * kw, oh * ow), dtype=g.dtype)
            for i in range(n):
                np.matmul(w2.T, g2[i], out=gcols[i])
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, c, h, w, kh, kw, stride, padding, oh, ow)
        gb = _channel_sum(g) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", inputs, result, bw)


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean / variance used by eval-mode batch norm."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def _channel_sum(a):
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm(x, gamma, beta, stats, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise ShapeError(f"batch_norm: per-channel parameters do not match {c} channels")
    dt = x.data.dtype.type
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least 2 values per channel")
        mean = _channel_sum(x.data) / dt(m)
        centered = x.data - mean[None, :, None, None]
        var = _channel_sum(centered * centered) / dt(m)
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mean
        stats.var[...] = momentum * stats.var + (1 - momentum) * var * (m / (m - 1))
    else:
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)
        centered = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.data.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = _new(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None], x)

    def bw(g):
        ggamma = _channel_sum(g * xhat)
        gbeta = _channel_sum(g)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gx = (inv_std[None, :, None, None] / dt(m)) * (
                dt(m) * gxhat
                - _channel_sum(gxhat)[None, :, None, None]
                - xhat * _channel_sum(gxhat * xhat)[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _record("batch_norm", (x, gamma, beta), out, bw)


# ---------------------------------------------------------------------------
# resampling


def avg_pool_2x2(x, pad_to_even=False):
    n, c, h, w = x.shape
    data = x.data
    odd = (h % 2, w % 2)
    if any(odd):
        if not pad_to_even:
            raise ShapeError(f"avg_pool_2x2: spatial size {h}x{w} must be even")
        data = np.pad(data, ((0, 0), (0, 0), (0, odd[0]), (0, odd[1])), mode="edge")
    hh, ww = data.shape[2], data.shape[3]
    out = _new(data.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5)), x)

    def bw(g):
        gq = g * g.dtype.type(0.25)
        full = np.repeat(np.repeat(gq, 2, axis=2), 2, axis=3)
        if odd[0]:
            full[:, :, h - 1, :] += full[:, :, h, :]
        if odd[1]:
            full[:, :, :, w - 1] += full[:, :, :, w]
        return (np.ascontiguousarray(full[:, :, :h, :w]),)

    return _record("avg_pool_2x2", (x,), out, bw)


def bilinear_coords(src, dst):
    """Half-pixel source coordinates: lower index, upper index, fraction."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def _interp_matrix(src, dst, dtype):
    lo, hi, frac = bilinear_coords(src, dst)
    m = np.zeros((dst, src), dtype=dtype)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(data, out_h, out_w):
    """Half-pixel bilinear resize of the last two axes of a numpy array.

    Uses the lerp form ``a + f * (b - a)`` so constants are reproduced exactly.
    """
    h, w = data.shape[-2:]
    if (h, w) == (out_h, out_w):
        return data.copy()
    dt = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
    data = data.astype(dt, copy=False)
    lo, hi, fy = bilinear_coords(h, out_h)
    top, bottom = data[..., lo, :], data[..., hi, :]
    rows = top + fy.astype(dt)[:, None] * (bottom - top)
    lo, hi, fx = bilinear_coords(w, out_w)
    left, right = rows[..., lo], rows[..., hi]
    return np.ascontiguousarray(left + fx.astype(dt) * (right - left))


def bilinear_upsample(x, out_h, out_w):
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: cannot downscale {h}x{w} to {out_h}x{out_w}")
    out = _new(resize_bilinear(x.data, out_h, out_w), x)

    def bw(g):
        if (h, w) == (out_h, out_w):
            return (g,)
        ah = _interp_matrix(h, out_h, g.dtype)
        aw = _interp_matrix(w, out_w, g.dtype)
        return (np.ascontiguousarray(ah.T @ g @ aw),)

    return _record("bilinear_upsample", (x,), out, bw)


# ---------------------------------------------------------------------------
# loss


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets, ignore_index=None):
    """Mean pixel cross-entropy over non-ignored targets.

    Returns ``(loss, count)`` where ``count`` is the number of contributing
    pixels.
    """
    n, k, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= k))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: target {int(targets[bad][0])} outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(z, safe_t[:, None], axis=1)[:, 0]
    nll = np.where(valid, lse - picked, 0)
    out = _new(np.asarray(nll.sum() / count, dtype=logits.data.dtype), logits)

    def bw(g):
        p = np.exp(z - lse[:, None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[:, None], 1, axis=1)
        grad = (p - onehot) * valid[:, None]
        return (grad * (g.reshape(()) / count),)

    return _record("softmax_cross_entropy", (logits,), out, bw), count


# ---------------------------------------------------------------------------
# debugging


def dump(tensor, path, name=None):
    """Write ``name shape dtype`` on one line followed by little-endian raw data."""
    name = name or tensor.name or "tensor"
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    dtype = arr.dtype.newbyteorder("<")
    shape = "x".join(str(d) for d in arr.shape) or "scalar"
    with open(path, "wb") as fh:
        fh.write(f"{name} {shape} {arr.dtype.name}\n".encode())
        fh.write(arr.astype(dtype).tobytes())


def load_dump(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        raw = fh.read()
    name, shape, dtype = header
    dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
    return name, np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).reshape(dims)
