"""N-dimensional tensor with tape-based reverse-mode automatic differentiation.

Tensors wrap row-major numpy buffers (f32 for training, f64 for verification).
Operations executed while a :class:`Tape` is active are recorded; ``backward``
replays the tape in exact reverse creation order, so gradient accumulation is
deterministic and two backward passes over identical tapes are bit-identical.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, DataError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# When True every op output is checked for NaN/Inf (debug mode).
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Dense row-major tensor, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise ArgumentError("tensor holds non-finite values")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Single-owner record of operations, replayed in reverse for backward."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every recorded tensor reachable from ``loss``."""
        if loss.size != 1:
            raise ArgumentError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            out_grad = grads.get(id(node.output))
            if out_grad is None:
                continue
            in_grads = node.backward_fn(out_grad)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g.astype(tensor.dtype, copy=False)
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs + (node.output,):
                seen.setdefault(id(tensor), tensor)
        seen.setdefault(id(loss), loss)
        for key, tensor in seen.items():
            g = grads.get(key)
            if g is not None and tensor.requires_grad:
                tensor.grad = g if tensor.grad is None else tensor.grad + g


_tape_stack: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the innermost active tape."""
    tape = active_tape()
    if tape is None or not tape.nodes:
        raise ArgumentError("backward requires a non-empty active tape")
    tape.backward(loss)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise ArgumentError("op produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _coerce_pair(a, b):
    """Promote scalars; enforce equal shapes or scalar broadcast only."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"elementwise op needs equal shapes or a scalar, got {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.sum(grad).reshape(shape)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record((a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record((a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record((a, b), out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def bwd(g):
        return (g * mask,)

    return _record((x,), out, bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype)

    def bwd(g):
        return (g * np.where(mask, 1.0, slope).astype(x.dtype),)

    return _record((x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record((x,), out, bwd)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bwd(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _record((x,), out, bwd)


def tabs(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g):
        return (g * np.sign(x.data),)

    return _record((x,), out, bwd)


def sqrt(x: Tensor) -> Tensor:
    """Square root with zero subgradient at zero (safe for norm-of-equal-inputs)."""
    out = np.sqrt(x.data)

    def bwd(g):
        denom = np.where(out > 0, 2.0 * out, 1.0)
        return (np.where(out > 0, g / denom, 0.0).astype(x.dtype),)

    return _record((x,), out, bwd)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data), dtype=x.dtype)

    def bwd(g):
        return (np.full_like(x.data, g),)

    return _record((x,), out, bwd)


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(np.mean(x.data), dtype=x.dtype)

    def bwd(g):
        return (np.full_like(x.data, g / x.size),)

    return _record((x,), out, bwd)


def row_mean(x: Tensor) -> Tensor:
    """Mean over axis 1 of a 2-D tensor -> [N]."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_mean needs a 2-D tensor, got rank {x.data.ndim}")
    n, per = x.shape
    out = x.data.mean(axis=1)

    def bwd(g):
        return (np.repeat(g[:, None] / per, per, axis=1),)

    return _record((x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record((x,), out, bwd)


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    out = np.ascontiguousarray(np.moveaxis(x.data, src, dst))

    def bwd(g):
        return (np.ascontiguousarray(np.moveaxis(g, dst, src)),)

    return _record((x,), out, bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward, blocks all gradient flow backward."""
    return Tensor(x.data.copy())


def take_rows(matrix: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from a 2-D tensor; backward scatter-adds into the matrix."""
    if matrix.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got rank {matrix.data.ndim}")
    idx = np.asarray(indices, dtype=np.int64)
    out = matrix.data[idx]

    def bwd(g):
        gm = np.zeros_like(matrix.data)
        np.add.at(gm, idx, g)
        return (gm,)

    return _record((matrix,), out, bwd)


def _triple(v, name: str) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ArgumentError(f"{name} must be an int or length-3 tuple")
    return t


def _im2col(xp: np.ndarray, kernel: tuple, stride: tuple, out_ext: tuple) -> np.ndarray:
    """Padded [N,C,*] volume -> contiguous [N, C*kt*kh*kw, to*ho*wo] columns."""
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_ext
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, c * kt * kh * kw,
                                                         to * ho * wo)
    return np.ascontiguousarray(cols)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """3-D convolution over [N,C,T,H,W] with [Co,C,kt,kh,kw] kernels."""
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if any(s < 1 for s in stride):
        raise ArgumentError(f"stride components must be >= 1, got {stride}")
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5 [N,C,T,H,W], got rank {x.data.ndim}")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5 [Co,C,kt,kh,kw], got rank {weight.data.ndim}")
    n, c, t, h, w = x.shape
    co, ci, kt, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"channel axis mismatch: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias axis mismatch: expected ({co},), got {bias.shape}")
    pt, ph, pw = padding
    st, sh, sw = stride
    tp, hp, wp = t + 2 * pt, h + 2 * ph, w + 2 * pw
    for name, k, ext in (("T", kt, tp), ("H", kh, hp), ("W", kw, wp)):
        if k > ext:
            raise ShapeError(f"kernel exceeds padded input on axis {name}: {k} > {ext}")
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    if padding == (0, 0, 0):
        xp = x.data
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    pointwise = (kt, kh, kw) == (1, 1, 1) and stride == (1, 1, 1)
    w2 = weight.data.reshape(co, c * kt * kh * kw)
    if pointwise:
        cols = xp.reshape(n, c, to * ho * wo)
    else:
        cols = _im2col(xp, (kt, kh, kw), stride, (to, ho, wo))
    out = np.matmul(w2, cols).reshape(n, co, to, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, co, to * ho * wo))
        # Batched GEMM with a stride-flipped B avoids tensordot's copy of cols.
        gw = np.matmul(g2, cols.swapaxes(1, 2)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(w2.T, g2)
        if pointwise:
            gx = dcols.reshape(x.shape)
        else:
            dcols = dcols.reshape(n, c, kt, kh, kw, to, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + to * st:st, j:j + ho * sh:sh, k:k + wo * sw:sw] += \
                            dcols[:, :, i, j, k]
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w])
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, bwd)


def upsample_nearest3d(x: Tensor, factor) -> Tensor:
    """Replicate each voxel factor_t x factor_h x factor_w times."""
    ft, fh, fw = _triple(factor, "factor")
    if min(ft, fh, fw) < 1:
        raise ArgumentError(f"upsample factor components must be >= 1, got {(ft, fh, fw)}")
    if x.data.ndim != 5:
        raise ShapeError(f"upsample_nearest3d input must be rank 5, got rank {x.data.ndim}")
    out = x.data.repeat(ft, axis=2).repeat(fh, axis=3).repeat(fw, axis=4)

    def bwd(g):
        n, c, t, h, w = x.shape
        gr = g.reshape(n, c, t, ft, h, fh, w, fw)
        return (gr.sum(axis=(3, 5, 7)),)

    return _record((x,), out, bwd)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Per-group standardization over [N,C,...] followed by per-channel affine."""
    if x.data.ndim < 2:
        raise ShapeError("group_norm input must have at least [N,C] axes")
    n, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ArgumentError(f"channel count {c} not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"gain/bias must have shape ({c},)")
    spatial = x.shape[2:]
    m = int(np.prod(spatial, dtype=np.int64)) if spatial else 1
    xg = x.data.reshape(n, groups, (c // groups) * m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gshape = (1, c) + (1,) * len(spatial)
    out = xhat * gain.data.reshape(gshape) + bias.data.reshape(gshape)

    def bwd(g):
        axes = (0,) + tuple(range(2, x.data.ndim))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        dxhat = (g * gain.data.reshape(gshape)).reshape(n, groups, (c // groups) * m)
        xh = xhat.reshape(n, groups, (c // groups) * m)
        mean_d = dxhat.mean(axis=2, keepdims=True)
        mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
        gx = (inv * (dxhat - mean_d - xh * mean_dx)).reshape(x.shape)
        return gx.astype(x.dtype, copy=False), ggain, gbias

    return _record((x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# "MHT1" tensor file format: magic, u8 dtype tag (0=f32, 1=f64), u8 rank,
# rank x u32 little-endian extents, then raw little-endian values.
# ---------------------------------------------------------------------------

_MHT_MAGIC = b"MHT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, array) -> None:
    data = array.data if isinstance(array, Tensor) else np.asarray(array)
    tag = 1 if data.dtype == np.float64 else 0
    le = np.ascontiguousarray(data, dtype=_DTYPE_TAGS[tag])
    with open(path, "wb") as f:
        f.write(_MHT_MAGIC)
        f.write(struct.pack("<BB", tag, data.ndim))
        f.write(struct.pack(f"<{data.ndim}I", *data.shape))
        f.write(le.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MHT_MAGIC:
        raise DataError(f"bad tensor file magic in {path}")
    tag, rank = struct.unpack_from("<BB", blob, 4)
    if tag not in _DTYPE_TAGS:
        raise DataError(f"unknown dtype tag {tag} in {path}")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    offset = 6 + 4 * rank
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"truncated tensor file {path}: {len(blob)} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, offset=offset, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)
