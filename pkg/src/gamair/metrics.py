"""Image quality metrics, Spearman rank correlation and measurement records."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import rankdata

from .errors import CsvFormatError, ShapeError

PSNR_INF = math.inf
UNDEFINED = math.nan  # spearman sentinel for constant input

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE) in dB; ``PSNR_INF`` when the images are equal."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError(f"max_val must be > 0, got {max_val}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10 * math.log10(max_val**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, then keep only positions where the window fits
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
    return out[..., half : img.shape[-2] - half, half : img.shape[-1] - half]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over all valid 11x11 windows, averaged over channels.

    Accepts (H, W) or (C, H, W) arrays.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs (C, H, W) images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(-2, -1))
    return float(per_channel.mean())


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; ``UNDEFINED`` (NaN) if either side is constant."""
    if len(x) != len(y):
        raise ValueError(f"spearman: length mismatch {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError(f"spearman needs at least 2 pairs, got {len(x)}")
    rx = rankdata(np.asarray(x, dtype=np.float64))
    ry = rankdata(np.asarray(y, dtype=np.float64))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return UNDEFINED
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


# -- measurement records ------------------------------------------------------


@dataclass
class MeasurementRecord:
    name: str
    params_millions: Optional[float] = None
    flops_giga: Optional[float] = None
    latency_ms: Optional[float] = None
    memory_gb: Optional[float] = None
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None

    def __post_init__(self) -> None:
        for f in fields(self)[1:]:
            v = getattr(self, f.name)
            if v is not None and f.name not in ("psnr_db", "ssim") and v < 0:
                raise ValueError(f"{self.name}: {f.name} must be non-negative, got {v}")


RECORD_COLUMNS = [f.name for f in fields(MeasurementRecord)]
PANELS = (
    ("flops_giga", "latency_ms"),
    ("params_millions", "latency_ms"),
    ("flops_giga", "memory_gb"),
    ("params_millions", "memory_gb"),
)


def correlate_records(records: Sequence[MeasurementRecord]) -> dict[str, float]:
    """Spearman r for the four cost-vs-resource panels, keyed ``"x~y"``."""
    if len(records) < 2:
        raise ValueError(f"need at least 2 records, got {len(records)}")
    incomplete = [r.name for r in records if any(getattr(r, c) is None for c in ("params_millions", "flops_giga", "latency_ms", "memory_gb"))]
    if incomplete:
        raise ValueError(f"records missing params/flops/latency/memory: {', '.join(incomplete)}")
    return {
        f"{x}~{y}": spearman([getattr(r, x) for r in records], [getattr(r, y) for r in records]) for x, y in PANELS
    }


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def write_records(path: Union[str, Path], records: Iterable[MeasurementRecord], append: bool = True) -> None:
    """Write records to CSV; in append mode the header is written only for a new file."""
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.name] + [_fmt(getattr(r, c)) for c in RECORD_COLUMNS[1:]])


def read_records(path: Union[str, Path]) -> list[MeasurementRecord]:
    """Read a measurement CSV. The name column may be called ``name`` or
    ``network``; other known columns may appear in any order, and empty cells
    mean missing values."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(1, "empty file")
    header = [h.strip() for h in rows[0]]
    header = ["name" if h == "network" else h for h in header]
    unknown = [h for h in header if h not in RECORD_COLUMNS]
    if unknown or "name" not in header:
        raise CsvFormatError(1, f"bad header {rows[0]} (unknown columns {unknown})")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(lineno, f"expected {len(header)} fields, got {len(row)}")
        kwargs: dict = {}
        for col, cell in zip(header, row):
            cell = cell.strip()
            if col == "name":
                kwargs[col] = cell
            elif cell:
                try:
                    kwargs[col] = float(cell)
                except ValueError:
                    raise CsvFormatError(lineno, f"{col}: not a number: {cell!r}") from None
        try:
            records.append(MeasurementRecord(**kwargs))
        except ValueError as exc:
            raise CsvFormatError(lineno, str(exc)) from None
    return records


def panel_fixture_path() -> Path:
    return Path(str(resources.files("gamair") / "data" / "fig2_points.csv"))


def load_panel_fixture() -> list[MeasurementRecord]:
    return read_records(panel_fixture_path())
