"""Optimizer, schedule, losses, the single-image memorization probe and a
small Gaussian-denoising trainer."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, TextIO, Union

import numpy as np

from . import ops
from .blocks import Conv2d, GamaBlock, Module, SqueezeExcite
from .errors import ConfigError, NumericError, ShapeError
from .graph import Graph, Value
from .imageio import add_gaussian_noise, sample_patch, split_rng
from .metrics import psnr
from .network import GamaIR, NetworkConfig, build_network
from .tensor import Tape, Tensor

# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    total_steps: int
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], total_steps: int, **kwargs) -> "OptimizerState":
        st = cls(total_steps, **kwargs)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def cosine_lr(step: int, st: OptimizerState) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``;
    later steps stay at ``lr_min``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= st.total_steps:
        return st.lr_min
    return st.lr_min + 0.5 * (st.lr_max - st.lr_min) * (1 + math.cos(math.pi * step / st.total_steps))


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    st: OptimizerState,
    lr: float,
    names: Optional[Sequence[str]] = None,
) -> None:
    """One AdamW update with decoupled weight decay, in place on ``params`` and ``st``.

    A missing gradient counts as zero. Non-finite gradients abort before any
    parameter is touched.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    if st.step >= st.total_steps:
        raise ConfigError(f"optimizer already took all {st.total_steps} steps")
    labels = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for label, p, g in zip(labels, params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{label}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {label} at optimizer step {st.step + 1}")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1 - b1**st.step
    c2 = 1 - b2**st.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        st.m[i] = b1 * st.m[i] + (1 - b1) * g
        st.v[i] = b2 * st.v[i] + (1 - b2) * g * g
        m_hat = st.m[i] / c1
        v_hat = st.v[i] / c2
        update = m_hat / (np.sqrt(v_hat) + st.eps) + st.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype)


# -- losses -------------------------------------------------------------------


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")


def loss_l2(pred: Tensor, target: Tensor) -> Tensor:
    _check_pair(pred, target)
    return ops.mean_all(ops.square(ops.sub(pred, target)))


def loss_l1(pred: Tensor, target: Tensor) -> Tensor:
    _check_pair(pred, target)
    return ops.mean_all(ops.abs(ops.sub(pred, target)))


def loss_psnr(pred: Tensor, target: Tensor) -> Tensor:
    """Negative PSNR for a unit peak: 10 * log10(MSE)."""
    return ops.scale(ops.log(loss_l2(pred, target)), 10 / math.log(10))


LOSSES = {"l2": loss_l2, "l1": loss_l1, "psnr": loss_psnr}


def train_step(
    net: Module,
    batch: Tensor,
    target: Tensor,
    st: OptimizerState,
    loss_fn=loss_l2,
    names: Optional[list[str]] = None,
) -> tuple[float, float]:
    """Forward, backward and one AdamW update at the scheduled rate; returns (loss, lr)."""
    named = list(net.named_parameters())
    params = [p for _, p in named]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn(net(batch), target)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {st.step + 1}")
    tape.backward(loss)
    tape.release()
    lr = cosine_lr(st.step, st)
    adamw_step(params, [p.grad for p in params], st, lr, names or [n for n, _ in named])
    return value, lr


def window_diverged(losses: Sequence[float], window: int = 500) -> bool:
    """True if the mean loss of some window exceeds the mean of the window before it."""
    means = [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]
    return any(b > a for a, b in zip(means, means[1:]))


# -- memorization probe -------------------------------------------------------

BLOCK_KINDS = ("plain", "squeeze-excite", "gama")
BLOCK_ALIASES = {"se": "squeeze-excite"}
PROBE_ORDERS = ("act-first", "block-first")


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x

    def trace(self, g: Graph, x: Value) -> Value:
        return x


class MemorizeNet(Module):
    """One hidden layer: 3x3 conv (3 -> hidden), a ReLU and the probed block,
    then 3x3 conv (hidden -> 3).

    ``order="act-first"`` applies the ReLU before the block; ``"block-first"``
    swaps the two.
    """

    def __init__(
        self,
        hidden: int,
        block_kind: str,
        rng: np.random.Generator,
        order: str = "act-first",
        channels: int = 3,
        dtype=np.float32,
    ):
        block_kind = BLOCK_ALIASES.get(block_kind, block_kind)
        if block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {block_kind!r}")
        if order not in PROBE_ORDERS:
            raise ConfigError(f"order must be one of {PROBE_ORDERS}, got {order!r}")
        self.hidden, self.block_kind, self.order = hidden, block_kind, order
        self.conv_in = Conv2d(channels, hidden, 3, padding=1, rng=rng, dtype=dtype)
        if block_kind == "plain":
            self.block: Module = Identity()
        elif block_kind == "squeeze-excite":
            self.block = SqueezeExcite(hidden, rng, dtype)
        else:
            self.block = GamaBlock("additive", "2d", dtype=dtype)
        self.conv_out = Conv2d(hidden, channels, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv_in(x)
        y = self.block(ops.relu(y)) if self.order == "act-first" else ops.relu(self.block(y))
        return self.conv_out(y)

    def trace(self, g: Graph, x: Value) -> Value:
        y = self.conv_in.trace(g, x)
        if self.order == "act-first":
            y = self.block.trace(g, g.elementwise("relu", y))
        else:
            y = g.elementwise("relu", self.block.trace(g, y))
        return self.conv_out.trace(g, y)


def memorize_param_count(hidden: int, block_kind: str, channels: int = 3) -> int:
    block_kind = BLOCK_ALIASES.get(block_kind, block_kind)
    convs = 2 * channels * hidden * 9 + hidden + channels
    extra = {"plain": 0, "squeeze-excite": hidden * hidden, "gama": 147}[block_kind]
    return convs + extra


def match_hidden_width(block_kind: str, budget: int, channels: int = 3, tolerance: float = 0.01) -> int:
    """Hidden width whose parameter count is closest to ``budget``, ties toward
    fewer parameters; it must land within ``tolerance`` (relative) of the budget.

    Counts grow monotonically with width, so a binary search finds the last
    width at or below the budget and its successor is the only other candidate.
    """
    block_kind = BLOCK_ALIASES.get(block_kind, block_kind)
    step = 2 if block_kind == "squeeze-excite" else 1  # SE halves the channels
    lo, hi = 1, max(2, budget)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if memorize_param_count(mid * step, block_kind, channels) <= budget:
            lo = mid
        else:
            hi = mid - 1
    candidates = [w * step for w in (lo, lo + 1)]
    best = min(candidates, key=lambda h: (abs(memorize_param_count(h, block_kind, channels) - budget), memorize_param_count(h, block_kind, channels)))
    count = memorize_param_count(best, block_kind, channels)
    if abs(count - budget) > tolerance * budget:
        raise ConfigError(
            f"{block_kind}: no hidden width gives {budget} params within {tolerance:.0%} "
            f"(closest: width {best} with {count})"
        )
    return best


@dataclass
class MemorizeExperimentConfig:
    image: np.ndarray  # (C, H, W) in [0, 1]
    block_kind: str = "gama"
    param_budget: int = 2000
    iterations: int = 3000
    seed: int = 0
    noise_psnr_db: float = 10.4
    lr_max: float = 5e-3
    order: str = "act-first"
    precision: str = "f32"


@dataclass
class MemorizeResult:
    block_kind: str
    hidden: int
    params: int
    psnr_noisy: float
    psnr_final: float
    restored: np.ndarray
    noisy: np.ndarray
    losses: list[float]
    diverged: bool


def calibrated_noise(image: np.ndarray, target_db: float, rng: np.random.Generator) -> np.ndarray:
    """Unclamped Gaussian noise rescaled so PSNR(image + noise, image) == target_db."""
    z = rng.standard_normal(image.shape)
    sigma = math.sqrt(10 ** (-target_db / 10) / float(np.mean(z * z)))
    return image + sigma * z


def run_memorize_experiment(cfg: MemorizeExperimentConfig) -> MemorizeResult:
    image = np.asarray(cfg.image, dtype=np.float64)
    if cfg.param_budget >= image.size:
        raise ConfigError(
            f"param_budget {cfg.param_budget} must be below the {image.size} image scalars (underparameterized probe)"
        )
    if cfg.iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {cfg.iterations}")
    dtype = {"f32": np.float32, "f64": np.float64}[cfg.precision]
    noise_rng, init_rng = split_rng(cfg.seed, 2)
    noisy = calibrated_noise(image, cfg.noise_psnr_db, noise_rng)
    hidden = match_hidden_width(cfg.block_kind, cfg.param_budget, image.shape[0])
    net = MemorizeNet(hidden, cfg.block_kind, init_rng, cfg.order, image.shape[0], dtype)
    x = Tensor(noisy[None], dtype=dtype)
    y = Tensor(image[None], dtype=dtype)
    st = OptimizerState.for_params(net.parameters(), max(cfg.iterations, 1), lr_max=cfg.lr_max)
    names = [n for n, _ in net.named_parameters()]
    losses = []
    for _ in range(cfg.iterations):
        loss, _ = train_step(net, x, y, st, loss_l2, names)
        losses.append(loss)
    restored = net(x).data[0].astype(np.float64)
    return MemorizeResult(
        block_kind=net.block_kind,
        hidden=hidden,
        params=net.num_params(),
        psnr_noisy=psnr(noisy, image),
        psnr_final=psnr(restored, image),
        restored=restored,
        noisy=noisy,
        losses=losses,
        diverged=window_diverged(losses),
    )


# -- denoising ----------------------------------------------------------------

LOG_HEADER = ("iter", "lr", "loss", "psnr_eval")


@dataclass
class DenoiseSettings:
    sigma: float = 25 / 255
    iterations: int = 1000
    seed: int = 0
    patch_size: int = 64
    batch_size: int = 4
    lr_max: float = 1e-3
    weight_decay: float = 0.0
    log_every: int = 100


def make_eval_set(
    images: Sequence[np.ndarray], sigma: float, patch_size: int, count: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (noisy, clean) patch batches, unclamped noise, for held-out evaluation."""
    if not images:
        raise ConfigError("evaluation needs at least one image")
    rng = split_rng(seed, 1)[0]
    clean = np.stack([sample_patch(images[i % len(images)], patch_size, rng) for i in range(count)])
    noisy = add_gaussian_noise(clean, sigma, rng, clamp=False)
    return noisy, clean


def evaluate(net: GamaIR, noisy: np.ndarray, clean: np.ndarray) -> float:
    out = net(Tensor(noisy, dtype=net.config.dtype)).data
    return psnr(out.astype(np.float64), clean)


def run_denoise_training(
    cfg: NetworkConfig,
    corpus: Sequence[np.ndarray],
    settings: DenoiseSettings,
    eval_set: Optional[tuple[np.ndarray, np.ndarray]] = None,
    log: Optional[Union[str, Path, TextIO]] = None,
) -> GamaIR:
    """Train a fresh network on random noisy patches of ``corpus`` with an L1 loss.

    Every draw samples new patches and new noise; all randomness comes from
    ``settings.seed``. ``log`` receives the ``iter,lr,loss,psnr_eval`` CSV
    (one row every ``log_every`` iterations and at the end).
    """
    if not corpus:
        raise ConfigError("training corpus is empty")
    if settings.sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {settings.sigma}")
    m = 2**cfg.levels
    if settings.patch_size % m:
        raise ConfigError(f"patch_size must be divisible by {m}")
    init_seed, data_rng = split_rng(settings.seed, 2)
    net = build_network(cfg, seed=int(init_seed.integers(2**31)))
    named = list(net.named_parameters())
    names = [n for n, _ in named]
    st = OptimizerState.for_params(
        [p for _, p in named], settings.iterations, lr_max=settings.lr_max, weight_decay=settings.weight_decay
    )
    own_file = isinstance(log, (str, Path))
    fh = open(log, "w", newline="") if own_file else log
    writer = csv.writer(fh) if fh is not None else None
    if writer:
        writer.writerow(LOG_HEADER)
    try:
        for it in range(1, settings.iterations + 1):
            idx = data_rng.integers(0, len(corpus), size=settings.batch_size)
            clean = np.stack([sample_patch(corpus[i], settings.patch_size, data_rng) for i in idx])
            noisy = add_gaussian_noise(clean, settings.sigma, data_rng, clamp=False)
            try:
                loss, lr = train_step(
                    net, Tensor(noisy, dtype=cfg.dtype), Tensor(clean, dtype=cfg.dtype), st, loss_l1, names
                )
            except NumericError as exc:
                raise NumericError(f"iteration {it}: {exc}") from exc
            if writer and (it % settings.log_every == 0 or it == settings.iterations or it == 1):
                score = evaluate(net, *eval_set) if eval_set is not None else None
                writer.writerow([it, repr(lr), repr(loss), "" if score is None else repr(score)])
    finally:
        if own_file and fh is not None:
            fh.close()
    return net
