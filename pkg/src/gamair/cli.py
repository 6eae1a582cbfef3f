"""Command-line entry point: ``gamair <subcommand> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
4 checkpoint error. Every subcommand writes a JSON run manifest next to its
main output (override with ``--manifest``).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .efficiency import BenchmarkProtocol, benchmark_latency, count_flops, count_params, estimate_memory
from .errors import CheckpointError, ConfigError, CsvFormatError, GamaError, ImageError, NumericError, ShapeError
from .imageio import (
    as_image,
    crop_back,
    list_images,
    load_png,
    make_chessboard,
    make_rng,
    make_texture,
    pad_to_multiple,
    quantize,
    save_png,
)
from .metrics import MeasurementRecord, correlate_records, panel_fixture_path, psnr, read_records, write_records
from .network import PRESETS, NetworkConfig, build_network, load_checkpoint, preset, save_checkpoint
from .tensor import Tensor
from .training import (
    DenoiseSettings,
    MemorizeExperimentConfig,
    make_eval_set,
    run_denoise_training,
    run_memorize_experiment,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4


class InputError(GamaError):
    """Bad user input detected by the CLI itself."""


# -- manifest -----------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: Optional[int]
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        self.finished_at = _now()
        atomic_write(path, dump_json(self.__dict__))


# -- helpers ------------------------------------------------------------------


def _fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _parse_shape(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must be N,C,H,W integers, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape must be four positive integers N,C,H,W, got {text!r}")
    return dims  # type: ignore[return-value]


def _load_config(args) -> NetworkConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        return NetworkConfig.from_json(path.read_text())
    return preset(args.preset)


def _add_network_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="network config JSON file")
    src.add_argument("--preset", default="tiny", choices=sorted(PRESETS), help="built-in config (default: tiny)")


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


# -- subcommands --------------------------------------------------------------


def cmd_memorize(args) -> int:
    out = Path(args.out)
    if args.image:
        clean = as_image(load_png(args.image))
        source = {"image": str(args.image)}
    elif args.pattern == "chess":
        clean = make_chessboard(args.size, args.tile)
        source = {"pattern": "chess", "size": args.size, "tile": args.tile}
    else:
        clean = make_texture(args.size, make_rng(args.seed))
        source = {"pattern": "texture", "size": args.size}
    manifest = RunManifest("memorize", {**source, **_common(args, ("block", "budget", "iters", "lr", "order", "noise_db"))}, args.seed)
    cfg = MemorizeExperimentConfig(
        image=clean,
        block_kind=args.block,
        param_budget=args.budget,
        iterations=args.iters,
        seed=args.seed,
        noise_psnr_db=args.noise_db,
        lr_max=args.lr,
        order=args.order,
    )
    res = run_memorize_experiment(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_png(clean, out / "clean.png")
    save_png(res.noisy, out / "noisy.png")  # clamped for display only
    save_png(res.restored, out / "restored.png")
    result = {
        "block": res.block_kind,
        "hidden": res.hidden,
        "params": res.params,
        "iterations": args.iters,
        "psnr_noisy": round(res.psnr_noisy, 6),
        "psnr_final": round(res.psnr_final, 6),
        "diverged": res.diverged,
    }
    atomic_write(out / "result.json", dump_json(result))
    manifest.outputs = ["clean.png", "noisy.png", "restored.png", "result.json"]
    manifest.write(_manifest_path(args, out / "manifest.json"))
    print(f"{res.block_kind}: hidden={res.hidden} params={res.params} "
          f"psnr_noisy={_fmt_db(res.psnr_noisy)} psnr_final={_fmt_db(res.psnr_final)}")
    return EXIT_OK


def _common(args, names: Sequence[str]) -> dict:
    return {n: getattr(args, n) for n in names}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = Path(args.data)
    if not data.is_dir():
        raise InputError(f"data directory not found: {data}")
    files = list_images(data)
    if not files:
        raise InputError(f"no PNG images in {data}")
    corpus = [as_image(load_png(f)) for f in files]
    if any(img.shape[0] != cfg.in_channels for img in corpus):
        raise InputError(f"all training images must have {cfg.in_channels} channels")
    settings = DenoiseSettings(
        sigma=args.sigma,
        iterations=args.iters,
        seed=args.seed,
        patch_size=args.patch,
        batch_size=args.batch,
        lr_max=args.lr,
        weight_decay=args.weight_decay,
        log_every=args.log_every,
    )
    eval_set = None
    if args.eval_data:
        held_out = [as_image(load_png(f)) for f in list_images(args.eval_data)]
        if held_out:
            eval_set = make_eval_set(held_out, args.sigma, args.patch, args.eval_count, args.seed + 1)
    ckpt = Path(args.out)
    log = Path(args.log) if args.log else ckpt.with_suffix(".csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        "train",
        {"network": cfg.to_dict(), "data": str(data), "eval_data": args.eval_data, **settings.__dict__, "eval_count": args.eval_count},
        args.seed,
    )
    net = run_denoise_training(cfg, corpus, settings, eval_set, log)
    save_checkpoint(net, ckpt)
    manifest.outputs = [str(ckpt), str(log)]
    manifest.write(_manifest_path(args, ckpt.with_name(ckpt.name + ".manifest.json")))
    print(f"wrote {ckpt} and {log}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net = load_checkpoint(args.ckpt)
    img = as_image(load_png(args.input))
    if img.shape[0] != net.config.in_channels:
        raise InputError(f"network expects {net.config.in_channels} channels, image has {img.shape[0]}")
    padded, dims = pad_to_multiple(img, 2**net.config.levels)
    out = net(Tensor(padded[None], dtype=net.config.dtype)).data[0].astype(np.float64)
    restored = quantize(crop_back(out, dims))
    save_png(restored, args.output)
    manifest = RunManifest("infer", {"ckpt": str(args.ckpt), "input": str(args.input), "reference": args.reference}, None)
    if args.reference:
        ref = as_image(load_png(args.reference))
        print(f"psnr_db={_fmt_db(psnr(restored, ref))}")
    manifest.outputs = [str(args.output)]
    manifest.write(_manifest_path(args, Path(str(args.output) + ".manifest.json")))
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = _load_config(args)
    net = build_network(cfg, seed=args.seed)
    shape = args.shape
    params = count_params(net)
    flops = count_flops(net, shape)
    memory = estimate_memory(net, shape)
    print(f"params  {params}")
    print(f"flops   {flops.flops}")
    print(f"macs    {flops.macs:.0f}")
    print(f"memory  {memory} bytes")
    record = MeasurementRecord(
        name=args.name or (Path(args.config).stem if args.config else args.preset),
        params_millions=params / 1e6,
        flops_giga=flops.flops / 1e9,
        memory_gb=memory / 1e9,
    )
    csv_path = Path(args.csv)
    write_records(csv_path, [record], append=True)
    manifest = RunManifest("count", {"network": cfg.to_dict(), "shape": list(shape), "csv": str(csv_path)}, args.seed)
    manifest.outputs = [str(csv_path)]
    manifest.write(_manifest_path(args, csv_path.with_name(csv_path.name + ".manifest.json")))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    net = build_network(cfg, seed=args.seed)
    proto = BenchmarkProtocol(warmup_runs=args.warmup, measured_runs=args.runs, input_shape=args.shape)
    net.check_input(proto.input_shape)
    x = Tensor(make_rng(args.seed).random(proto.input_shape), dtype=cfg.dtype)
    stats = benchmark_latency(lambda: net(x), proto)
    print(f"latency mean {stats.mean_ms:.3f} ms  std {stats.std_ms:.3f} ms  over {len(stats.runs)} runs "
          f"({proto.warmup_runs} warmup excluded)")
    params = count_params(net)
    record = MeasurementRecord(
        name=args.name or (Path(args.config).stem if args.config else args.preset),
        params_millions=params / 1e6,
        flops_giga=count_flops(net, proto.input_shape).flops / 1e9,
        latency_ms=stats.mean_ms,
        memory_gb=estimate_memory(net, proto.input_shape) / 1e9,
    )
    csv_path = Path(args.csv)
    write_records(csv_path, [record], append=True)
    manifest = RunManifest(
        "bench",
        {"network": cfg.to_dict(), "shape": list(args.shape), "runs": args.runs, "warmup": args.warmup, "csv": str(csv_path)},
        args.seed,
    )
    manifest.outputs = [str(csv_path)]
    manifest.write(_manifest_path(args, csv_path.with_name(csv_path.name + ".manifest.json")))
    return EXIT_OK


def cmd_correlate(args) -> int:
    path = Path(args.csv) if args.csv else panel_fixture_path()
    if not path.is_file():
        raise InputError(f"CSV not found: {path}")
    records = read_records(path)
    try:
        rs = correlate_records(records)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for panel, r in rs.items():
        x, y = panel.split("~")
        print(f"{x:>16} vs {y:<11} r = {r:.3f}")
    manifest = RunManifest("correlate", {"csv": str(path)}, None)
    if args.out:
        atomic_write(Path(args.out), dump_json(rs))
        manifest.outputs = [str(args.out)]
        default = Path(args.out + ".manifest.json")
    else:
        default = Path("correlate.manifest.json")
    manifest.write(_manifest_path(args, default))
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(args.seed)
    files = {
        "chess.png": make_chessboard(args.size, args.tile),
        "texture.png": make_texture(args.size, rng),
    }
    for name, img in files.items():
        save_png(img, out / name)
    manifest = RunManifest("fixtures", {"size": args.size, "tile": args.tile}, args.seed)
    manifest.outputs = sorted(files)
    manifest.write(_manifest_path(args, out / "manifest.json"))
    print(f"wrote {', '.join(sorted(files))} to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--manifest", help="where to write the run manifest")
        return p

    p = add("memorize", cmd_memorize, "single-image memorization probe (plain / se / gama)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="clean PNG to memorize")
    src.add_argument("--pattern", choices=["chess", "texture"], help="generated image")
    p.add_argument("--size", type=int, default=128, help="generated image size (default: 128)")
    p.add_argument("--tile", type=int, default=8, help="chessboard square size (default: 8)")
    p.add_argument("--block", choices=["plain", "se", "gama"], default="gama")
    p.add_argument("--budget", type=int, default=2109, help="parameter budget (default: 2109)")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--lr", type=float, default=5e-3, help="peak learning rate (default: 5e-3)")
    p.add_argument("--order", choices=["act-first", "block-first"], default="act-first",
                   help="ReLU before the block (default) or after it")
    p.add_argument("--noise-db", dest="noise_db", type=float, default=10.4, help="noisy-input PSNR (default: 10.4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train a denoiser on random patches of a PNG folder")
    _add_network_args(p)
    p.add_argument("--data", required=True, help="directory of training PNGs")
    p.add_argument("--eval-data", dest="eval_data", help="directory of held-out PNGs")
    p.add_argument("--eval-count", dest="eval_count", type=int, default=16, help="held-out patches (default: 16)")
    p.add_argument("--sigma", type=float, default=25 / 255, help="noise std in [0, 1] units (default: 25/255)")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.0)
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: checkpoint path with .csv)")

    p = add("infer", cmd_infer, "restore one PNG with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--reference", help="clean PNG; prints PSNR against it")

    p = add("count", cmd_count, "parameter, FLOP and memory counts")
    _add_network_args(p)
    p.add_argument("--shape", type=_parse_shape, default=(1, 3, 256, 256), help="N,C,H,W (default: 1,3,256,256)")
    p.add_argument("--csv", default="measurements.csv", help="measurement CSV to append to")
    p.add_argument("--name", help="record name (default: config or preset name)")
    p.add_argument("--seed", type=int, default=0)

    p = add("bench", cmd_bench, "forward-pass latency benchmark")
    _add_network_args(p)
    p.add_argument("--shape", type=_parse_shape, default=(1, 3, 256, 256), help="N,C,H,W (default: 1,3,256,256)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--csv", default="measurements.csv", help="measurement CSV to append to")
    p.add_argument("--name", help="record name (default: config or preset name)")
    p.add_argument("--seed", type=int, default=0)

    p = add("correlate", cmd_correlate, "Spearman correlations of a measurement CSV")
    p.add_argument("--csv", help="measurement CSV (default: the bundled fig2_points.csv)")
    p.add_argument("--out", help="also write the r values as JSON")

    p = add("fixtures", cmd_fixtures, "write the generated test images")
    p.add_argument("--out", default="fixtures")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CsvFormatError as exc:
        print(f"error: {args.csv}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ConfigError, ShapeError, ImageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
