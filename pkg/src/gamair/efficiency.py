"""Analytic efficiency metrics and the latency benchmark harness.

Parameter and FLOP counts come from the symbolic graph each module builds in
``trace`` (nothing is executed). Memory is an inference-activation model: a
liveness sweep over that graph where every op output is a fresh allocation
that is freed after its last consumer, plus the parameter bytes.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import Module
from .errors import BenchmarkError, ShapeError
from .graph import Graph


def count_params(net: Module) -> int:
    return net.num_params()


def trace_network(net: Module, input_shape: Sequence[int]) -> Graph:
    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be (N, C, H, W), got {tuple(input_shape)}")
    g = Graph()
    g.mark_output(net.trace(g, g.input(input_shape)))
    return g


@dataclass(frozen=True)
class FlopCount:
    flops: int

    @property
    def macs(self) -> float:
        # one multiply-accumulate is two FLOPs
        return self.flops / 2


def count_flops(net: Module, input_shape: Sequence[int]) -> FlopCount:
    return FlopCount(trace_network(net, input_shape).flops)


def peak_activation_bytes(g: Graph, itemsize: int) -> int:
    """Peak bytes of simultaneously live values while executing ``g`` in order.

    A value is live from the op that creates it (graph inputs from the start)
    until the last op reading it; graph outputs stay live to the end. While an
    op runs its inputs and its output are all live.
    """
    n_ops = len(g.ops)
    last_use = {v.vid: -1 for v in g.values}
    for i, op in enumerate(g.ops):
        for vid in op.inputs:
            last_use[vid] = i
    for vid in g.outputs:
        last_use[vid] = n_ops
    born = {vid: -1 for vid in g.inputs}
    for i, op in enumerate(g.ops):
        born[op.output] = i
    size = {v.vid: v.numel * itemsize for v in g.values}
    peak = sum(size[v] for v in g.inputs)
    for i in range(n_ops):
        live = sum(size[v] for v, b in born.items() if b <= i and last_use[v] >= i)
        peak = max(peak, live)
    return peak


def _itemsize(net: Module) -> int:
    params = net.parameters()
    return params[0].dtype.itemsize if params else np.dtype(np.float32).itemsize


def estimate_memory(net: Module, input_shape: Sequence[int]) -> int:
    """Bytes: peak live activations during inference plus all parameters."""
    itemsize = _itemsize(net)
    g = trace_network(net, input_shape)
    return peak_activation_bytes(g, itemsize) + count_params(net) * itemsize


# -- latency ------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkProtocol:
    warmup_runs: int = 10
    measured_runs: int = 100
    input_shape: tuple[int, int, int, int] = (1, 3, 256, 256)

    def __post_init__(self) -> None:
        if self.measured_runs < 1:
            raise ValueError(f"measured_runs must be >= 1, got {self.measured_runs}")
        if self.warmup_runs < 0:
            raise ValueError(f"warmup_runs must be >= 0, got {self.warmup_runs}")


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    std_ms: float  # population standard deviation of the measured runs
    runs: tuple[float, ...]


def benchmark_latency(
    runner: Callable[[], object],
    proto: BenchmarkProtocol = BenchmarkProtocol(),
    clock: Callable[[], float] = time.perf_counter,
    single_thread: bool = True,
) -> LatencyStats:
    """Call ``runner`` ``warmup_runs + measured_runs`` times, timing each call
    with ``clock`` (seconds), and summarize only the measured runs in ms.

    With ``single_thread`` the BLAS/OpenMP pools are limited to one thread for
    the whole protocol.
    """
    times: list[float] = []
    limits = threadpool_limits(1) if single_thread else None
    try:
        for i in range(proto.warmup_runs + proto.measured_runs):
            start = clock()
            try:
                runner()
            except Exception as exc:
                raise BenchmarkError(i, exc) from exc
            times.append((clock() - start) * 1e3)
    finally:
        if limits is not None:
            limits.restore_original_limits()
    measured = times[proto.warmup_runs :]
    return LatencyStats(statistics.fmean(measured), statistics.pstdev(measured), tuple(measured))
