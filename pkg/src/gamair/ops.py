"""Differentiable operations on :class:`~gamair.tensor.Tensor`.

There is no implicit broadcasting: binary operations require identical shapes,
and expansion goes through :func:`replicate_expand`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import GeometryError, ShapeError
from .tensor import OpKind, Tensor, current_tape

CHANNEL, HEIGHT, WIDTH = 1, 2, 3
_AXIS_NAMES = {"channel": CHANNEL, "height": HEIGHT, "width": WIDTH}
_DIM_NAMES = ("N", "C", "H", "W")


def _result(data: np.ndarray, op_kind: OpKind, inputs: Sequence[Tensor], backward_fn, **ctx) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, op_kind, inputs, backward_fn, ctx)
    return out


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{what}: dtype mismatch {a.dtype} vs {b.dtype}")


# -- convolution --------------------------------------------------------------


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise GeometryError(f"groups must be >= 1, got {self.groups}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for name, size, k in (("H", h, self.kernel_h), ("W", w, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise GeometryError(
                    f"{name}: ({size} + 2*{self.padding} - {k}) / {self.stride} + 1 is not a positive integer"
                )
            out.append(span // self.stride + 1)
        return out[0], out[1]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patches of a padded input as an (N, C, kh, kw, H', W') contiguous array."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride]
    return cols


def _is_depthwise(c: int, co: int, cg: int, groups: int) -> bool:
    return groups == c == co and cg == 1


def _correlate(
    xp: np.ndarray, w: np.ndarray, stride: int, groups: int, cols: Optional[np.ndarray] = None
) -> np.ndarray:
    """Valid cross-correlation of a padded input with ``w``."""
    n, c, hp, wp = xp.shape
    co, cg, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == kw == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
        out = np.matmul(w.reshape(co, c), xs.reshape(n, c, ho * wo))
        return out.reshape(n, co, ho, wo)
    if _is_depthwise(c, co, cg, groups):
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        hs = stride * (ho - 1) + 1
        ws = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                out += w[None, :, 0, i, j, None, None] * xp[:, :, i : i + hs : stride, j : j + ws : stride]
        return out
    if cols is None:
        cols = _im2col(xp, kh, kw, stride)
    k = cg * kh * kw
    wg = w.reshape(groups, co // groups, k)
    cc = cols.reshape(n, groups, k, ho * wo)
    out = np.empty((n, groups, co // groups, ho * wo), dtype=xp.dtype)
    # plain 2-D products hit BLAS directly; broadcast matmul is markedly slower
    for b in range(n):
        for gi in range(groups):
            np.matmul(wg[gi], cc[b, gi], out=out[b, gi])
    return out.reshape(n, co, ho, wo)


def _weight_grad(
    xp: np.ndarray, g: np.ndarray, kshape: tuple, stride: int, groups: int, cols: Optional[np.ndarray] = None
) -> np.ndarray:
    n, c, _, _ = xp.shape
    co, cg, kh, kw = kshape
    _, _, ho, wo = g.shape
    if kh == kw == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
        gw = np.tensordot(g.reshape(n, co, -1), xs.reshape(n, c, -1), axes=([0, 2], [0, 2]))
        return gw.reshape(kshape)
    if _is_depthwise(c, co, cg, groups):
        gw = np.empty(kshape, dtype=xp.dtype)
        hs = stride * (ho - 1) + 1
        ws = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, patch)
        return gw
    if cols is None:
        cols = _im2col(xp, kh, kw, stride)
    k = cg * kh * kw
    gg = g.reshape(n, groups, co // groups, ho * wo)
    cc = cols.reshape(n, groups, k, ho * wo)
    gw = np.zeros((groups, co // groups, k), dtype=xp.dtype)
    for b in range(n):
        for gi in range(groups):
            gw[gi] += gg[b, gi] @ cc[b, gi].T
    return gw.reshape(kshape)


def _input_grad(g: np.ndarray, w: np.ndarray, stride: int, groups: int) -> np.ndarray:
    """Gradient w.r.t. the padded input: full correlation with the flipped kernel."""
    n, co, ho, wo = g.shape
    _, cg, kh, kw = w.shape
    if stride > 1:
        gd = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
        g = gd
    if kh > 1 or kw > 1:
        g = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wt = w.reshape(groups, co // groups, cg, kh, kw).transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(groups * cg, co // groups, kh, kw))
    return _correlate(g, wt, 1, groups)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2D cross-correlation with symmetric zero padding.

    ``weight`` has shape ``(Cout, Cin // groups, kh, kw)`` and ``bias`` (if any)
    shape ``(1, Cout, 1, 1)``.
    """
    n, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    geom = ConvGeometry(kh, kw, stride, padding, groups)
    if c % groups:
        raise ShapeError(f"C: input channels {c} not divisible by groups {groups}")
    if co % groups:
        raise ShapeError(f"Cout: output channels {co} not divisible by groups {groups}")
    if cg * groups != c:
        raise ShapeError(f"C: weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"bias: expected shape (1, {co}, 1, 1), got {bias.shape}")
    if weight.dtype != x.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")
    geom.output_size(h, w)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = None
    if (kh > 1 or kw > 1) and not _is_depthwise(c, co, cg, groups):
        cols = _im2col(xp, kh, kw, stride)
    out = _correlate(xp, weight.data, stride, groups, cols)
    if bias is not None:
        out = out + bias.data
    wdata = weight.data

    def backward(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _input_grad(g, wdata, stride, groups)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = _weight_grad(xp, g, wdata.shape, stride, groups, cols)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, OpKind.CONV2D, inputs, backward, geometry=geom, input_shape=x.shape)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, OpKind.ADD, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, OpKind.SUB, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, OpKind.MUL, (a, b), lambda g: (g * bd, g * ad))


def elementwise_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return _result(x.data * f, OpKind.SCALE, (x,), lambda g: (g * f,), factor=factor)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, OpKind.RELU, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(s, OpKind.SIGMOID, (x,), lambda g: (g * s * (1.0 - s),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return _result(np.abs(x.data), OpKind.ABS, (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, OpKind.SQUARE, (x,), lambda g: (2.0 * g * xd,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), OpKind.LOG, (x,), lambda g: (g / xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)
    return _result(out, OpKind.SUM_ALL, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# -- reductions and rearrangements --------------------------------------------


def _axis(axis: Union[str, int]) -> int:
    if isinstance(axis, str):
        if axis not in _AXIS_NAMES:
            raise ValueError(f"axis must be one of {sorted(_AXIS_NAMES)}, got {axis!r}")
        return _AXIS_NAMES[axis]
    if axis not in (CHANNEL, HEIGHT, WIDTH):
        raise ValueError(f"axis must be channel/height/width (1, 2, 3), got {axis}")
    return axis


def mean_reduce(x: Tensor, axis: Union[str, int]) -> Tensor:
    """Mean along one of channel/height/width, keeping the axis with size 1."""
    ax = _axis(axis)
    length = x.shape[ax]
    shape = x.shape
    out = x.data.mean(axis=ax, keepdims=True)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / x.dtype.type(length), shape).copy(),)

    return _result(out, OpKind.MEAN_REDUCE, (x,), backward, axis=ax)


def transpose_permute(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != [0, 1, 2, 3] or perm[0] != 0:
        raise ShapeError(f"perm must be a permutation of (0, 1, 2, 3) fixing the batch axis, got {perm}")
    if perm == (0, 1, 2, 3):
        return x
    inverse = tuple(int(i) for i in np.argsort(perm))
    out = np.ascontiguousarray(x.data.transpose(perm))
    return _result(
        out, OpKind.TRANSPOSE, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), perm=perm
    )


def replicate_expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Tile size-1 axes of ``x`` up to ``shape``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"target shape must be 4D, got {shape}")
    reps = []
    for i, (have, want) in enumerate(zip(x.shape, shape)):
        if have != want and have != 1:
            raise ShapeError(f"{_DIM_NAMES[i]}: cannot expand size {have} to {want}")
        if have != want:
            reps.append(i)
    if not reps:
        return x
    axes = tuple(reps)
    out = np.broadcast_to(x.data, shape).copy()
    return _result(
        out, OpKind.EXPAND, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), target=shape
    )


def space_to_depth(x: Tensor, block: int = 2) -> Tensor:
    """(N, C, H, W) -> (N, C*b*b, H/b, W/b); channel c*b*b + b*dy + dx holds offset (dy, dx)."""
    n, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"space_to_depth needs H and W divisible by {block}, got H={h}, W={w}")
    out = x.data.reshape(n, c, h // block, block, w // block, block).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out.reshape(n, c * block * block, h // block, w // block))

    def backward(g: np.ndarray):
        gi = g.reshape(n, c, block, block, h // block, w // block).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(gi.reshape(n, c, h, w)),)

    return _result(out, OpKind.SPACE_TO_DEPTH, (x,), backward, block=block)


def depth_to_space(x: Tensor, block: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    n, c, h, w = x.shape
    bb = block * block
    if c % bb:
        raise ShapeError(f"depth_to_space needs C divisible by {bb}, got C={c}")
    co = c // bb
    out = x.data.reshape(n, co, block, block, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = np.ascontiguousarray(out.reshape(n, co, h * block, w * block))

    def backward(g: np.ndarray):
        gi = g.reshape(n, co, h, block, w, block).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(gi.reshape(n, c, h, w)),)

    return _result(out, OpKind.DEPTH_TO_SPACE, (x,), backward, block=block)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not 0 <= start < stop <= c:
        raise ShapeError(f"C: invalid channel range [{start}, {stop}) for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g: np.ndarray):
        gi = np.zeros(x.shape, dtype=g.dtype)
        gi[:, start:stop] = g
        return (gi,)

    return _result(out, OpKind.CHANNEL_SLICE, (x,), backward, start=start, stop=stop)


def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"C: channel_split needs an even channel count, got {c}")
    return channel_slice(x, 0, c // 2), channel_slice(x, c // 2, c)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside C")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, OpKind.CONCAT, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


# -- normalization ------------------------------------------------------------


def layer_norm_channel(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every (n, h, w) location, then scale and shift.

    ``gain`` and ``offset`` have shape ``(1, C, 1, 1)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = x.shape[1]
    for name, p in (("gain", gain), ("offset", offset)):
        if p.shape != (1, c, 1, 1):
            raise ShapeError(f"{name}: expected shape (1, {c}, 1, 1), got {p.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + offset.data

    def backward(g: np.ndarray):
        gx = gg = go = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        if offset.requires_grad:
            go = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        return gx, gg, go

    return _result(out, OpKind.LAYER_NORM, (x, gain, offset), backward, eps=eps)
