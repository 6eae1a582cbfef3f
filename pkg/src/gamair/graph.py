"""Symbolic forward graphs: shapes and FLOPs without executing a network.

Modules implement ``trace(graph, value)`` mirroring their ``forward``; the
resulting op list drives FLOP counting and the activation-liveness memory
estimate in :mod:`gamair.efficiency`.

FLOP convention: a convolution costs ``2 * (Cin/groups) * Cout * kh * kw * H' * W'``
plus ``Cout * H' * W'`` with a bias; elementwise and reduction ops cost one FLOP
per element they read (layer norm counts ``LAYER_NORM_FLOPS_PER_ELEMENT``);
pure rearrangements cost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

from .errors import ShapeError
from .ops import ConvGeometry

LAYER_NORM_FLOPS_PER_ELEMENT = 7  # mean, center, square, mean, normalize, scale, shift


@dataclass(frozen=True)
class Value:
    vid: int
    shape: tuple[int, int, int, int]

    @property
    def numel(self) -> int:
        return prod(self.shape)


@dataclass(frozen=True)
class GraphOp:
    kind: str
    inputs: tuple[int, ...]
    output: int
    flops: int


class Graph:
    def __init__(self) -> None:
        self.values: list[Value] = []
        self.ops: list[GraphOp] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []

    def _new(self, shape: Sequence[int]) -> Value:
        v = Value(len(self.values), tuple(int(s) for s in shape))  # type: ignore[arg-type]
        self.values.append(v)
        return v

    def input(self, shape: Sequence[int]) -> Value:
        if len(shape) != 4 or min(shape) < 1:
            raise ShapeError(f"input shape must be 4 positive dims, got {tuple(shape)}")
        v = self._new(shape)
        self.inputs.append(v.vid)
        return v

    def mark_output(self, v: Value) -> None:
        self.outputs.append(v.vid)

    def op(self, kind: str, inputs: Sequence[Value], shape: Sequence[int], flops: int) -> Value:
        out = self._new(shape)
        self.ops.append(GraphOp(kind, tuple(v.vid for v in inputs), out.vid, int(flops)))
        return out

    @property
    def flops(self) -> int:
        return sum(o.flops for o in self.ops)

    # -- op mirrors ------------------------------------------------------------

    def conv(self, x: Value, cout: int, kernel: int, padding: int = 0, groups: int = 1, bias: bool = True) -> Value:
        n, c, h, w = x.shape
        if c % groups or cout % groups:
            raise ShapeError(f"C: channels {c}->{cout} not divisible by groups {groups}")
        ho, wo = ConvGeometry(kernel, kernel, 1, padding, groups).output_size(h, w)
        flops = 2 * (c // groups) * cout * kernel * kernel * ho * wo * n
        if bias:
            flops += cout * ho * wo * n
        return self.op("conv2d", [x], (n, cout, ho, wo), flops)

    def elementwise(self, kind: str, *xs: Value) -> Value:
        shape = xs[0].shape
        for v in xs[1:]:
            if v.shape != shape:
                raise ShapeError(f"{kind}: shape mismatch {shape} vs {v.shape}")
        flops = xs[0].numel * max(1, len(xs) - 1)
        return self.op(kind, xs, shape, flops)

    def mean(self, x: Value, axis: int) -> Value:
        shape = list(x.shape)
        shape[axis] = 1
        return self.op("mean_reduce", [x], shape, x.numel)

    def transpose(self, x: Value, perm: Sequence[int]) -> Value:
        return self.op("transpose_permute", [x], [x.shape[p] for p in perm], 0)

    def expand(self, x: Value, shape: Sequence[int]) -> Value:
        if tuple(shape) == x.shape:
            return x
        return self.op("replicate_expand", [x], shape, 0)

    def space_to_depth(self, x: Value) -> Value:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"space_to_depth needs even H and W, got H={h}, W={w}")
        return self.op("space_to_depth", [x], (n, 4 * c, h // 2, w // 2), 0)

    def depth_to_space(self, x: Value) -> Value:
        n, c, h, w = x.shape
        if c % 4:
            raise ShapeError(f"depth_to_space needs C divisible by 4, got C={c}")
        return self.op("depth_to_space", [x], (n, c // 4, 2 * h, 2 * w), 0)

    def split(self, x: Value) -> tuple[Value, Value]:
        n, c, h, w = x.shape
        if c % 2:
            raise ShapeError(f"C: channel_split needs an even channel count, got {c}")
        half = (n, c // 2, h, w)
        return self.op("channel_slice", [x], half, 0), self.op("channel_slice", [x], half, 0)

    def layer_norm(self, x: Value) -> Value:
        return self.op("layer_norm_channel", [x], x.shape, LAYER_NORM_FLOPS_PER_ELEMENT * x.numel)
