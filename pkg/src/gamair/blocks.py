"""Network building blocks: GAMA, Squeeze-and-Excite, the gated building block,
and pixel-shuffle down/upsampling.

Every block is a :class:`Module` exposing ``forward`` on tensors and ``trace`` on
symbolic graph values (see :mod:`gamair.graph`).
"""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .graph import Graph, Value
from .tensor import Tensor

GAMA_KERNEL = 7
FUSIONS = ("additive", "multiplicative")
AVERAGINGS = ("2d", "1d")

# block_variant name -> (fusion, averaging); None means the GAMA stage is skipped
BLOCK_VARIANTS: dict[str, Optional[tuple[str, str]]] = {
    "gama-default": ("additive", "2d"),
    "gama-1d-vectors": ("additive", "1d"),
    "gama-multiplicative": ("multiplicative", "2d"),
    "none": None,
}


class Module:
    """Minimal parameter container.

    Parameters are tensors with ``requires_grad=True`` stored as attributes;
    submodules are attributes too, or lists of modules. Iteration follows
    attribute assignment order, which fixes parameter names and init order.
    """

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def trace(self, g: Graph, x: Value) -> Value:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Tensor) and attr.requires_grad:
                yield prefix + name, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{prefix}{name}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    """Square-kernel convolution. ``init="uniform"`` draws U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    weights from ``rng``; ``init="zeros"`` starts from zero. Biases start at zero."""

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        *,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        init: str = "uniform",
        dtype=np.float32,
    ):
        if cin % groups or cout % groups:
            raise ConfigError(f"channels {cin}->{cout} not divisible by groups {groups}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.padding, self.groups = padding, groups
        shape = (cout, cin // groups, kernel, kernel)
        if init == "zeros":
            w = np.zeros(shape)
        elif init == "uniform":
            if rng is None:
                raise ConfigError("uniform init needs an rng")
            bound = 1.0 / np.sqrt((cin // groups) * kernel * kernel)
            w = rng.uniform(-bound, bound, size=shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros((1, cout, 1, 1)), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding, groups=self.groups)

    def trace(self, g: Graph, x: Value) -> Value:
        return g.conv(x, self.cout, self.kernel, self.padding, self.groups, self.bias is not None)


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float32):
        self.eps = eps
        self.gain = _param(np.ones((1, channels, 1, 1)), dtype)
        self.offset = _param(np.zeros((1, channels, 1, 1)), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm_channel(x, self.gain, self.offset, self.eps)

    def trace(self, g: Graph, x: Value) -> Value:
        return g.layer_norm(x)


def gated_nonlinearity(x: Tensor) -> Tensor:
    """Split channels into halves and multiply them: (N, 2C, H, W) -> (N, C, H, W)."""
    first, second = ops.channel_split(x)
    return ops.mul(first, second)


def _trace_gate(g: Graph, x: Value) -> Value:
    a, b = g.split(x)
    return g.elementwise("mul", a, b)


class _AxisMLP(Module):
    """Bias-free d -> d//2 -> d MLP on an (N, d, 1, 1) vector, ReLU in between."""

    def __init__(self, d: int, rng: np.random.Generator, dtype, zero_out: bool = True):
        if d < 2:
            raise ConfigError(f"axis MLP needs length >= 2, got {d}")
        self.fc_in = Conv2d(d, d // 2, 1, bias=False, rng=rng, dtype=dtype)
        self.fc_out = Conv2d(d // 2, d, 1, bias=False, rng=rng, init="zeros" if zero_out else "uniform", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc_out(ops.relu(self.fc_in(x)))

    def trace(self, g: Graph, x: Value) -> Value:
        return self.fc_out.trace(g, g.elementwise("relu", self.fc_in.trace(g, x)))


# axis swaps that move the averaged-away axis into the channel slot
_SWAP_CH = (0, 2, 1, 3)  # C <-> H
_SWAP_CW = (0, 3, 2, 1)  # C <-> W


class GamaBlock(Module):
    """Global additive multidimensional averaging.

    The input is averaged over channels, height and width separately. Each
    averaged map is turned into a single-channel image (1 x H x W, 1 x C x W,
    1 x H x C), filtered by its own bias-free 7x7 convolution, turned back and
    replicated to the input size. ``fusion="additive"`` returns
    ``x + a + b + c``. ``fusion="multiplicative"`` returns
    ``x * sigmoid(a) * sigmoid(b) * sigmoid(c)``.

    ``averaging="1d"`` is the vector ablation: means over two axes at a time
    give vectors of length C, H and W. Each goes through its own
    :class:`_AxisMLP` and is fused additively. The spatial size must then be
    fixed at construction via ``channels`` and ``spatial``.
    """

    def __init__(
        self,
        fusion: str = "additive",
        averaging: str = "2d",
        *,
        channels: Optional[int] = None,
        spatial: Optional[Sequence[int]] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        if averaging not in AVERAGINGS:
            raise ConfigError(f"averaging must be one of {AVERAGINGS}, got {averaging!r}")
        self.fusion, self.averaging = fusion, averaging
        if averaging == "2d":
            k, p = GAMA_KERNEL, GAMA_KERNEL // 2
            self.conv_chan = Conv2d(1, 1, k, padding=p, bias=False, init="zeros", dtype=dtype)
            self.conv_height = Conv2d(1, 1, k, padding=p, bias=False, init="zeros", dtype=dtype)
            self.conv_width = Conv2d(1, 1, k, padding=p, bias=False, init="zeros", dtype=dtype)
        else:
            if channels is None or spatial is None or rng is None:
                raise ConfigError("the 1d-vector variant needs channels, spatial=(H, W) and an rng")
            h, w = spatial
            self.size = (channels, h, w)
            self.mlp_chan = _AxisMLP(channels, rng, dtype)
            self.mlp_height = _AxisMLP(h, rng, dtype)
            self.mlp_width = _AxisMLP(w, rng, dtype)

    def branches(self, x: Tensor) -> list[Tensor]:
        """The three global branches, each replicated back to ``x.shape``."""
        if self.averaging == "1d":
            return self._vector_branches(x)
        a = self.conv_chan(ops.mean_reduce(x, "channel"))
        b = ops.transpose_permute(ops.mean_reduce(x, "height"), _SWAP_CH)
        b = ops.transpose_permute(self.conv_height(b), _SWAP_CH)
        c = ops.transpose_permute(ops.mean_reduce(x, "width"), _SWAP_CW)
        c = ops.transpose_permute(self.conv_width(c), _SWAP_CW)
        return [ops.replicate_expand(t, x.shape) for t in (a, b, c)]

    def _vector_branches(self, x: Tensor) -> list[Tensor]:
        if x.shape[1:] != self.size:
            raise ShapeError(f"1d-vector GAMA block built for C,H,W={self.size}, got {x.shape[1:]}")
        chan = ops.mean_reduce(ops.mean_reduce(x, "height"), "width")  # N,C,1,1
        chan = self.mlp_chan(chan)
        rows = ops.mean_reduce(ops.mean_reduce(x, "channel"), "width")  # N,1,H,1
        rows = ops.transpose_permute(self.mlp_height(ops.transpose_permute(rows, _SWAP_CH)), _SWAP_CH)
        cols = ops.mean_reduce(ops.mean_reduce(x, "channel"), "height")  # N,1,1,W
        cols = ops.transpose_permute(self.mlp_width(ops.transpose_permute(cols, _SWAP_CW)), _SWAP_CW)
        return [ops.replicate_expand(t, x.shape) for t in (chan, rows, cols)]

    def forward(self, x: Tensor) -> Tensor:
        a, b, c = self.branches(x)
        if self.fusion == "additive":
            return ops.add(ops.add(ops.add(x, a), b), c)
        return ops.mul(ops.mul(ops.mul(x, ops.sigmoid(a)), ops.sigmoid(b)), ops.sigmoid(c))

    def trace(self, g: Graph, x: Value) -> Value:
        if self.averaging == "2d":
            a = self.conv_chan.trace(g, g.mean(x, 1))
            b = g.transpose(self.conv_height.trace(g, g.transpose(g.mean(x, 2), _SWAP_CH)), _SWAP_CH)
            c = g.transpose(self.conv_width.trace(g, g.transpose(g.mean(x, 3), _SWAP_CW)), _SWAP_CW)
        else:
            a = self.mlp_chan.trace(g, g.mean(g.mean(x, 2), 3))
            rows = g.mean(g.mean(x, 1), 3)
            b = g.transpose(self.mlp_height.trace(g, g.transpose(rows, _SWAP_CH)), _SWAP_CH)
            cols = g.mean(g.mean(x, 1), 2)
            c = g.transpose(self.mlp_width.trace(g, g.transpose(cols, _SWAP_CW)), _SWAP_CW)
        a, b, c = (g.expand(t, x.shape) for t in (a, b, c))
        if self.fusion == "additive":
            return g.elementwise("add", g.elementwise("add", g.elementwise("add", x, a), b), c)
        sa, sb, sc = (g.elementwise("sigmoid", t) for t in (a, b, c))
        return g.elementwise("mul", g.elementwise("mul", g.elementwise("mul", x, sa), sb), sc)


def gama_param_count(block: GamaBlock) -> int:
    return block.num_params()


class SqueezeExcite(Module):
    """Global average pool -> C -> C/2 -> C bias-free MLP -> sigmoid -> channel scale.
    The MLP holds exactly C**2 weights."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels % 2:
            raise ConfigError(f"squeeze-excite needs an even channel count, got {channels}")
        self.fc_in = Conv2d(channels, channels // 2, 1, bias=False, rng=rng, dtype=dtype)
        self.fc_out = Conv2d(channels // 2, channels, 1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2:
            raise ShapeError(f"C: squeeze-excite needs an even channel count, got {x.shape[1]}")
        pooled = ops.mean_reduce(ops.mean_reduce(x, "height"), "width")
        gate = ops.sigmoid(self.fc_out(ops.relu(self.fc_in(pooled))))
        return ops.mul(x, ops.replicate_expand(gate, x.shape))

    def trace(self, g: Graph, x: Value) -> Value:
        pooled = g.mean(g.mean(x, 2), 3)
        gate = g.elementwise("sigmoid", self.fc_out.trace(g, g.elementwise("relu", self.fc_in.trace(g, pooled))))
        return g.elementwise("mul", x, g.expand(gate, x.shape))


def make_gama(
    variant: str,
    channels: int,
    spatial: Optional[Sequence[int]],
    rng: np.random.Generator,
    dtype=np.float32,
) -> Optional[GamaBlock]:
    if variant not in BLOCK_VARIANTS:
        raise ConfigError(f"block_variant must be one of {sorted(BLOCK_VARIANTS)}, got {variant!r}")
    kind = BLOCK_VARIANTS[variant]
    if kind is None:
        return None
    fusion, averaging = kind
    return GamaBlock(fusion, averaging, channels=channels, spatial=spatial, rng=rng, dtype=dtype)


class BuildingBlock(Module):
    """``x + project(gama(gate(depthwise(expand(norm(x))))))``.

    expand is 1x1 C -> 2C, depthwise is 3x3 over the 2C channels, the gate
    halves back to C, project is 1x1 C -> C. Without a GAMA block the stage is
    the identity.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        variant: str = "gama-default",
        spatial: Optional[Sequence[int]] = None,
        dtype=np.float32,
    ):
        c = channels
        self.norm = LayerNorm2d(c, dtype=dtype)
        self.expand = Conv2d(c, 2 * c, 1, rng=rng, dtype=dtype)
        self.depthwise = Conv2d(2 * c, 2 * c, 3, padding=1, groups=2 * c, rng=rng, dtype=dtype)
        self.gama = make_gama(variant, c, spatial, rng, dtype)
        self.project = Conv2d(c, c, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = gated_nonlinearity(self.depthwise(self.expand(self.norm(x))))
        if self.gama is not None:
            y = self.gama(y)
        return ops.add(x, self.project(y))

    def trace(self, g: Graph, x: Value) -> Value:
        y = _trace_gate(g, self.depthwise.trace(g, self.expand.trace(g, self.norm.trace(g, x))))
        if self.gama is not None:
            y = self.gama.trace(g, y)
        return g.elementwise("add", x, self.project.trace(g, y))


class Downsample(Module):
    """1x1 conv C -> C/2, then space-to-depth: (C, H, W) -> (2C, H/2, W/2)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels % 2:
            raise ConfigError(f"downsample needs an even channel count, got {channels}")
        self.conv = Conv2d(channels, channels // 2, 1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _, c, h, w = x.shape
        if c % 2 or h % 2 or w % 2:
            raise ShapeError(f"downsample needs even C, H, W; got C={c}, H={h}, W={w}")
        return ops.space_to_depth(self.conv(x))

    def trace(self, g: Graph, x: Value) -> Value:
        return g.space_to_depth(self.conv.trace(g, x))


class Upsample(Module):
    """1x1 conv C -> 2C, then depth-to-space: (C, H, W) -> (C/2, 2H, 2W)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        if channels % 2:
            raise ConfigError(f"upsample needs an even channel count, got {channels}")
        self.conv = Conv2d(channels, 2 * channels, 1, bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2:
            raise ShapeError(f"C: upsample needs an even channel count, got {x.shape[1]}")
        return ops.depth_to_space(self.conv(x))

    def trace(self, g: Graph, x: Value) -> Value:
        return g.depth_to_space(self.conv.trace(g, x))
