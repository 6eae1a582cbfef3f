import numpy as np
import pytest

from gamair.blocks import Conv2d, GamaBlock, Module, SqueezeExcite
from gamair.efficiency import (
    BenchmarkProtocol,
    benchmark_latency,
    count_flops,
    count_params,
    estimate_memory,
    peak_activation_bytes,
)
from gamair.errors import BenchmarkError, ShapeError
from gamair.graph import Graph
from gamair.network import NetworkConfig, build_network, preset
from gamair.tensor import Tensor


class FakeClock:
    """Clock read twice per run (start, end); each run lasts the next duration."""

    def __init__(self, durations_ms):
        self.durations = list(durations_ms)
        self.now = 0.0
        self.started = False
        self.reads = 0

    def __call__(self):
        self.reads += 1
        if self.started:
            self.now += self.durations.pop(0) / 1e3
        self.started = not self.started
        return self.now


class Counter:
    def __init__(self):
        self.calls = 0

    def __call__(self):
        self.calls += 1


def test_params_of_blocks():
    rng = np.random.default_rng(0)
    assert count_params(GamaBlock()) == 147
    assert count_params(SqueezeExcite(64, rng)) == 4096
    assert count_params(Conv2d(3, 42, 3, rng=rng)) == 3 * 42 * 9 + 42 == 1176


def test_pointwise_conv_flops():
    conv = Conv2d(4, 4, 1, bias=False, rng=np.random.default_rng(0))
    fc = count_flops(conv, (1, 4, 8, 8))
    # brute force: one MAC per (output channel, input channel, pixel)
    macs = sum(1 for _co in range(4) for _ci in range(4) for _p in range(64))
    assert fc.macs == macs == 1024
    assert fc.flops == 2048


def test_zero_block_network_flops_match_hand_count():
    cfg = NetworkConfig(width=8, enc_blocks=[], mid_blocks=0, dec_blocks=[], global_residual=False)
    net = build_network(cfg)
    h = w = 16
    intro = 2 * 3 * 8 * 9 * h * w + 8 * h * w
    ending = 2 * 8 * 3 * 9 * h * w + 3 * h * w
    assert count_flops(net, (1, 3, h, w)).flops == intro + ending
    residual = build_network(NetworkConfig(width=8, enc_blocks=[], mid_blocks=0, dec_blocks=[]))
    assert count_flops(residual, (1, 3, h, w)).flops == intro + ending + 3 * h * w


def test_doubling_resolution_quadruples_conv_flops():
    net = build_network(preset("S", block_variant="none"))
    small = count_flops(net, (1, 3, 64, 64)).flops
    assert count_flops(net, (1, 3, 128, 128)).flops == 4 * small


def test_gama_flops_grow_slightly_less_than_quadratically():
    # the C x W and H x C branch convolutions grow linearly in W and H
    net = build_network(preset("S"))
    small = count_flops(net, (1, 3, 64, 64)).flops
    ratio = count_flops(net, (1, 3, 128, 128)).flops / small
    assert 3.9 < ratio < 4


def test_count_flops_rejects_bad_shape():
    with pytest.raises(ShapeError):
        count_flops(build_network(preset("tiny")), (1, 3, 10, 8))
    with pytest.raises(ShapeError):
        count_flops(build_network(preset("tiny")), (3, 8, 8))


def test_single_conv_memory_is_input_output_params():
    conv = Conv2d(3, 5, 3, padding=1, rng=np.random.default_rng(0))
    shape = (1, 3, 10, 12)
    expected = 4 * (3 * 120 + 5 * 120 + conv.num_params())
    assert estimate_memory(conv, shape) == expected


def test_skip_connection_raises_peak():
    # x -> a -> b -> out, with and without an extra edge x -> out
    def build(skip):
        g = Graph()
        x = g.input((1, 4, 8, 8))
        a = g.elementwise("relu", x)
        b = g.elementwise("relu", a)
        out = g.elementwise("add", b, x) if skip else g.elementwise("relu", b)
        g.mark_output(out)
        return g

    numel = 4 * 64
    assert peak_activation_bytes(build(False), 4) == 2 * numel * 4
    assert peak_activation_bytes(build(True), 4) == 3 * numel * 4


def test_memory_doubles_in_float64():
    f32 = build_network(preset("tiny"))
    f64 = build_network(preset("tiny", precision="f64"))
    shape = (1, 3, 32, 32)
    assert estimate_memory(f64, shape) == 2 * estimate_memory(f32, shape)


def test_memory_monotone_in_size():
    net = build_network(preset("tiny"))
    sizes = [estimate_memory(net, (1, 3, s, s)) for s in (8, 16, 32, 64)]
    assert sizes == sorted(sizes) and len(set(sizes)) == 4


def test_fixed_clock_gives_zero_std():
    clock = FakeClock([5.0] * 110)
    stats = benchmark_latency(Counter(), BenchmarkProtocol(), clock)
    assert stats.mean_ms == pytest.approx(5.0)
    assert stats.std_ms == pytest.approx(0.0, abs=1e-9)
    assert len(stats.runs) == 100


def test_warmup_runs_are_excluded():
    clock = FakeClock([100.0] * 10 + [10.0] * 100)
    runner = Counter()
    stats = benchmark_latency(runner, BenchmarkProtocol(), clock)
    assert runner.calls == 110
    assert clock.reads == 220
    assert stats.mean_ms == pytest.approx(10.0)


def test_single_run_protocol():
    stats = benchmark_latency(Counter(), BenchmarkProtocol(0, 1), FakeClock([7.0]))
    assert stats.runs == (pytest.approx(7.0),) and stats.std_ms == 0.0


def test_protocol_validation():
    with pytest.raises(ValueError):
        BenchmarkProtocol(measured_runs=0)
    with pytest.raises(ValueError):
        BenchmarkProtocol(warmup_runs=-1)


def test_runner_failure_reports_index():
    calls = Counter()

    def runner():
        calls()
        if calls.calls == 13:
            raise RuntimeError("boom")

    with pytest.raises(BenchmarkError) as err:
        benchmark_latency(runner, BenchmarkProtocol(), FakeClock([1.0] * 110))
    assert err.value.run_index == 12


def test_real_network_mean_within_run_range():
    net = build_network(preset("tiny"))
    x = Tensor(np.ones((1, 3, 16, 16)), dtype=np.float32)
    stats = benchmark_latency(lambda: net(x), BenchmarkProtocol(2, 5, (1, 3, 16, 16)))
    assert min(stats.runs) <= stats.mean_ms <= max(stats.runs)
