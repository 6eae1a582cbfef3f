"""Images, noise, patches, padding and the generated test patterns.

Images are float64 numpy arrays of shape (C, H, W) with C in {1, 3} and values
in [0, 1]. All randomness goes through numpy ``Generator`` objects built on
PCG64 (see :func:`make_rng`), so every randomized function is a pure function
of its inputs and seed.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import png
from scipy.ndimage import gaussian_filter

from .errors import ImageError, ShapeError, TruncatedImageError, UnsupportedImageError

PathLike = Union[str, Path]
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is fixed across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed, one per worker."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def as_image(arr) -> np.ndarray:
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"images are (C, H, W) with C in {{1, 3}}, got shape {img.shape}")
    return img


# -- PNG ----------------------------------------------------------------------


def quantize(image: np.ndarray, levels: int = 255) -> np.ndarray:
    """Clamp to [0, 1] and round to ``levels`` steps, halves away from zero."""
    x = np.clip(image, 0.0, 1.0) * levels
    return np.floor(x + 0.5) / levels


def _check_chunks(buf: bytes, path: PathLike) -> None:
    if not buf.startswith(PNG_SIGNATURE):
        if PNG_SIGNATURE.startswith(buf):
            raise TruncatedImageError(f"{path}: file ends inside the PNG signature")
        raise ImageError(f"{path}: not a PNG file")
    pos = len(PNG_SIGNATURE)
    while True:
        if pos + 8 > len(buf):
            raise TruncatedImageError(f"{path}: truncated before IEND (offset {pos})")
        length, ctype = struct.unpack_from(">I4s", buf, pos)
        pos += 12 + length
        if pos > len(buf):
            raise TruncatedImageError(f"{path}: chunk {ctype!r} runs past end of file")
        if ctype == b"IEND":
            return


def load_png(path: PathLike) -> np.ndarray:
    """8- or 16-bit grayscale/RGB PNG -> (C, H, W) float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    _check_chunks(buf, path)
    try:
        width, height, rows, info = png.Reader(bytes=buf).read()
        if info.get("palette") or info.get("alpha"):
            raise UnsupportedImageError(f"{path}: palette and alpha PNGs are not supported")
        if info["bitdepth"] not in (8, 16):
            raise UnsupportedImageError(f"{path}: bit depth {info['bitdepth']} not supported (8 or 16)")
        planes = info["planes"]
        data = np.array([np.asarray(r) for r in rows], dtype=np.float64)
    except png.Error as exc:
        raise ImageError(f"{path}: {exc}") from exc
    data = data.reshape(height, width, planes).transpose(2, 0, 1)
    return data / (2 ** info["bitdepth"] - 1)


def save_png(image: np.ndarray, path: PathLike) -> None:
    """Write an 8-bit PNG (grayscale for C=1, RGB for C=3)."""
    img = as_image(image)
    c, h, w = img.shape
    q = np.rint(quantize(img) * 255).astype(np.uint8)  # already integral; rint just casts
    rows = q.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(w, h, greyscale=(c == 1), bitdepth=8)
    with open(path, "wb") as fh:
        writer.write(fh, rows.tolist())


# -- noise and sampling -------------------------------------------------------


def add_gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise; ``clamp=False`` keeps the exact noise model."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    noisy = image + sigma * rng.standard_normal(image.shape)
    return np.clip(noisy, 0.0, 1.0) if clamp else noisy


def noise_sigma_for_psnr(target_db: float) -> float:
    """Noise std whose expected (unclamped) PSNR on a [0, 1] image is ``target_db``."""
    return float(10 ** (-target_db / 20))


def sample_patch(image: np.ndarray, size: Union[int, Sequence[int]], rng: np.random.Generator) -> np.ndarray:
    ph, pw = (size, size) if isinstance(size, int) else size
    _, h, w = image.shape
    if ph > h or pw > w or ph < 1 or pw < 1:
        raise ShapeError(f"patch {ph}x{pw} does not fit in a {h}x{w} image")
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    return image[:, top : top + ph, left : left + pw]


# -- padding ------------------------------------------------------------------


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom and right so H and W are multiples of ``multiple``."""
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    # reflect needs at least two samples along an axis
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(image, widths, mode=mode), (h, w)


def crop_back(image: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    return image[..., :h, :w]


# -- generated patterns -------------------------------------------------------


def make_chessboard(size: int, tile: int, channels: int = 3) -> np.ndarray:
    """Alternating 0/1 squares of ``tile`` pixels, top-left square black."""
    if tile < 1 or size % tile:
        raise ShapeError(f"tile {tile} must divide size {size}")
    idx = np.arange(size) // tile
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    return np.repeat(board[None], channels, axis=0)


def make_texture(size: int, rng: np.random.Generator, channels: int = 3, smoothing: float = 1.5) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to [0, 1]: fine-grained, no long-range repetition."""
    noise = rng.standard_normal((channels, size, size))
    tex = np.stack([gaussian_filter(c, smoothing) for c in noise])
    return (tex - tex.min()) / (tex.max() - tex.min())


def autocorrelation(image: np.ndarray, lag: int) -> float:
    """Pearson correlation between the image and itself shifted by ``lag``
    pixels, averaged over the horizontal and vertical shifts."""
    img = np.asarray(image, dtype=np.float64)
    if lag < 1 or lag >= min(img.shape[-2:]):
        raise ValueError(f"lag must be in [1, {min(img.shape[-2:]) - 1}], got {lag}")
    horiz = np.corrcoef(img[..., :, :-lag].ravel(), img[..., :, lag:].ravel())[0, 1]
    vert = np.corrcoef(img[..., :-lag, :].ravel(), img[..., lag:, :].ravel())[0, 1]
    return float((horiz + vert) / 2)


def list_images(directory: PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
