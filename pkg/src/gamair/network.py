"""The GAMA-IR encoder-decoder, its configuration, checkpoints and the
receptive-field probe."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import ops
from .blocks import BLOCK_VARIANTS, BuildingBlock, Conv2d, Downsample, Module, Upsample
from .errors import (
    CheckpointError,
    ConfigError,
    MagicMismatchError,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .graph import Graph, Value
from .tensor import Tape, Tensor, tensor_from_bytes, tensor_to_bytes

SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"GAMA"
CHECKPOINT_VERSION = 1
PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class NetworkConfig:
    width: int = 42
    enc_blocks: list[int] = field(default_factory=lambda: [2, 2, 3])
    mid_blocks: int = 4
    dec_blocks: list[int] = field(default_factory=lambda: [3, 2, 2])
    block_variant: str = "gama-default"
    global_residual: bool = True
    in_channels: int = 3
    precision: str = "f32"
    # (H, W) at full resolution; only the 1d-vector variant needs it
    spatial_size: Optional[list[int]] = None

    @property
    def depth(self) -> int:
        return sum(self.enc_blocks) + self.mid_blocks + sum(self.dec_blocks)

    @property
    def levels(self) -> int:
        return len(self.enc_blocks)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def validate(self) -> "NetworkConfig":
        problems = []
        if self.width < 1:
            problems.append(f"width must be >= 1 (got {self.width})")
        if self.levels and self.width % 2:
            problems.append(f"width must be even when downsampling (got {self.width})")
        if len(self.enc_blocks) != len(self.dec_blocks):
            problems.append(
                f"len(enc_blocks) == len(dec_blocks) required (got {len(self.enc_blocks)} vs {len(self.dec_blocks)})"
            )
        if any(b < 0 for b in [*self.enc_blocks, *self.dec_blocks, self.mid_blocks]):
            problems.append("block counts must be non-negative")
        if self.block_variant not in BLOCK_VARIANTS:
            problems.append(f"block_variant must be one of {sorted(BLOCK_VARIANTS)} (got {self.block_variant!r})")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1 (got {self.in_channels})")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {sorted(PRECISIONS)} (got {self.precision!r})")
        if self.block_variant == "gama-1d-vectors":
            if self.spatial_size is None or len(self.spatial_size) != 2:
                problems.append("gama-1d-vectors needs spatial_size [H, W]")
            elif any(s % (2**self.levels) for s in self.spatial_size):
                problems.append(f"spatial_size must be divisible by {2**self.levels}")
        if problems:
            raise ConfigError("invalid network config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.enc_blocks = [int(b) for b in cfg.enc_blocks]
        cfg.dec_blocks = [int(b) for b in cfg.dec_blocks]
        if cfg.spatial_size is not None:
            cfg.spatial_size = [int(s) for s in cfg.spatial_size]
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)


PRESETS: dict[str, NetworkConfig] = {
    "S": NetworkConfig(width=42, enc_blocks=[2, 2, 3], mid_blocks=4, dec_blocks=[3, 2, 2]),
    "L": NetworkConfig(width=80, enc_blocks=[2, 2, 4], mid_blocks=3, dec_blocks=[4, 2, 2]),
    # shallower and wider than S
    "S-fast": NetworkConfig(width=64, enc_blocks=[1, 1, 2], mid_blocks=2, dec_blocks=[2, 1, 1]),
    "tiny": NetworkConfig(width=16, enc_blocks=[1, 1], mid_blocks=2, dec_blocks=[1, 1]),
}


def preset(name: str, **overrides) -> NetworkConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    data = PRESETS[name].to_dict()
    data.update(overrides)
    return NetworkConfig.from_dict(data)


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def trace(self, g: Graph, x: Value) -> Value:
        for layer in self.layers:
            x = layer.trace(g, x)
        return x


class GamaIR(Module):
    """3x3 intro conv -> encoder levels (blocks, downsample) -> middle blocks ->
    decoder levels (upsample, add skip, blocks) -> 3x3 ending conv, plus an
    optional global residual."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.dtype
        c = cfg.width
        spatial = cfg.spatial_size

        def level_size(level: int) -> Optional[list[int]]:
            if spatial is None:
                return None
            return [s // 2**level for s in spatial]

        def stage(n: int, channels: int, level: int) -> Sequential:
            return Sequential(
                [BuildingBlock(channels, rng, cfg.block_variant, level_size(level), dtype) for _ in range(n)]
            )

        self.intro = Conv2d(cfg.in_channels, c, 3, padding=1, rng=rng, dtype=dtype)
        self.encoders: list[Sequential] = []
        self.downs: list[Downsample] = []
        for level, n in enumerate(cfg.enc_blocks):
            ch = c * 2**level
            self.encoders.append(stage(n, ch, level))
            self.downs.append(Downsample(ch, rng, dtype))
        self.middle = stage(cfg.mid_blocks, c * 2**cfg.levels, cfg.levels)
        self.ups: list[Upsample] = []
        self.decoders: list[Sequential] = []
        for i, n in enumerate(cfg.dec_blocks):
            level = cfg.levels - 1 - i
            self.ups.append(Upsample(c * 2 ** (level + 1), rng, dtype))
            self.decoders.append(stage(n, c * 2**level, level))
        self.ending = Conv2d(c, cfg.in_channels, 3, padding=1, rng=rng, dtype=dtype)

    @property
    def num_blocks(self) -> int:
        return sum(len(s) for s in (*self.encoders, self.middle, *self.decoders))

    def check_input(self, shape: Sequence[int]) -> None:
        _, c, h, w = shape
        if c != self.config.in_channels:
            raise ShapeError(f"C: network expects {self.config.in_channels} input channels, got {c}")
        m = 2**self.config.levels
        if h % m or w % m:
            raise ShapeError(f"H and W must be divisible by {m} (2**{self.config.levels}), got H={h}, W={w}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        if x.dtype != self.config.dtype:
            if x.requires_grad:
                raise TypeError(f"network runs in {self.config.precision}, input is {x.dtype}")
            x = x.astype(self.config.dtype)
        feat = self.intro(x)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            feat = enc(feat)
            skips.append(feat)
            feat = down(feat)
        feat = self.middle(feat)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            feat = dec(ops.add(up(feat), skip))
        out = self.ending(feat)
        if self.config.global_residual:
            out = ops.add(out, x)
        return out

    def trace(self, g: Graph, x: Value) -> Value:
        self.check_input(x.shape)
        feat = self.intro.trace(g, x)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            feat = enc.trace(g, feat)
            skips.append(feat)
            feat = down.trace(g, feat)
        feat = self.middle.trace(g, feat)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            feat = dec.trace(g, g.elementwise("add", up.trace(g, feat), skip))
        out = self.ending.trace(g, feat)
        if self.config.global_residual:
            out = g.elementwise("add", out, x)
        return out


def build_network(cfg: NetworkConfig, seed: int = 0) -> GamaIR:
    return GamaIR(cfg, seed)


# -- checkpoints --------------------------------------------------------------
#
# layout (little-endian): b"GAMA", u32 version, u32 config length, config JSON
# (UTF-8), u32 parameter count, then per parameter: u32 name length, UTF-8
# name, tensor blob (see gamair.tensor.tensor_to_bytes).


def checkpoint_bytes(net: GamaIR, version: int = CHECKPOINT_VERSION) -> bytes:
    cfg = net.config.to_json().encode("utf-8")
    params = list(net.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(p)]
    return b"".join(parts)


def network_from_bytes(buf: bytes) -> GamaIR:
    if len(buf) < 4:
        raise TruncatedCheckpointError("checkpoint shorter than its magic number")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        version, cfg_len = struct.unpack_from("<II", buf, 4)
    except struct.error as exc:
        raise TruncatedCheckpointError("checkpoint header truncated") from exc
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {CHECKPOINT_VERSION}")
    pos = 12
    if pos + cfg_len > len(buf):
        raise TruncatedCheckpointError("checkpoint config truncated")
    try:
        cfg = NetworkConfig.from_json(buf[pos : pos + cfg_len].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from exc
    pos += cfg_len
    net = GamaIR(cfg, seed=0)
    expected = dict(net.named_parameters())
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        loaded: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + nlen > len(buf):
                raise EOFError("parameter name truncated")
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            loaded[name], pos = tensor_from_bytes(buf, pos)
    except (struct.error, EOFError) as exc:
        raise TruncatedCheckpointError(f"checkpoint parameters truncated: {exc}") from exc
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint parameters corrupt: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after parameters")
    if list(loaded) != list(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise CheckpointError(f"parameter names do not match the config (missing {missing}, unexpected {extra})")
    for name, p in expected.items():
        src = loaded[name]
        if src.shape != p.shape or src.dtype != p.dtype:
            raise CheckpointError(f"{name}: stored {src.shape}/{src.dtype}, expected {p.shape}/{p.dtype}")
        p.data = src.data
    return net


def save_checkpoint(net: GamaIR, path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net))
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> GamaIR:
    return network_from_bytes(Path(path).read_bytes())


# -- receptive field ----------------------------------------------------------


def receptive_field_probe(
    net: Module,
    pixel: tuple[int, int],
    input_shape: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2),
) -> np.ndarray:
    """Boolean (H, W) mask of input pixels whose gradient at output ``pixel`` is nonzero.

    For each seed every parameter (and the input) is redrawn from a normal
    distribution, so zero-initialized branches do not hide connections; the
    masks are OR-ed over seeds. Parameters are restored afterwards.
    """
    n, c, h, w = input_shape
    ph, pw = pixel
    if not (0 <= ph < h and 0 <= pw < w):
        raise ShapeError(f"pixel {pixel} outside the {h}x{w} input")
    params = net.parameters()
    saved = [p.data for p in params]
    mask = np.zeros((h, w), dtype=bool)
    try:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            dtype = params[0].dtype if params else np.float64
            for p in params:
                p.data = rng.standard_normal(p.shape).astype(p.dtype)
            x = Tensor(rng.standard_normal((n, c, h, w)).astype(dtype), requires_grad=True)
            with Tape() as tape:
                out = net(x)
                sel = np.zeros(out.shape, dtype=out.dtype)
                sel[:, :, ph, pw] = rng.uniform(0.5, 1.5, size=sel[:, :, ph, pw].shape)
                loss = ops.sum_all(ops.mul(out, Tensor(sel)))
            tape.backward(loss)
            tape.release()
            mask |= np.any(x.grad != 0, axis=(0, 1))
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
    return mask
