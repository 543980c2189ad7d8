"""Path-signature features of consecutive ink points and their 7-channel raster.

Channel layout of every feature vector and raster pixel::

    0: level-0 term (always 1, doubles as the ink mask)
    1-2: level-1 increment (dx, dy)
    3-6: level-2 term, the Kronecker square of the increment (dx*dx, dx*dy, dy*dx, dy*dy)

Rasters are ``(width, height, 7)`` arrays indexed ``[column, row, channel]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, InvalidConfigError
from .ink import HandwritingSample, resample_sample, scale_to_height

CHANNELS = 7


def psf_pair(a, b) -> np.ndarray:
    """Level-0..2 signature of the segment from ``a`` to ``b`` as a length-7 vector."""
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    return np.concatenate([[1.0], d, np.kron(d, d)])


def psf_segments(points: np.ndarray) -> np.ndarray:
    """Signature of every consecutive pair of an ``(n, 2)`` point array, shape ``(n-1, 7)``."""
    d = np.diff(np.asarray(points, dtype=np.float64), axis=0)
    out = np.empty((len(d), CHANNELS))
    out[:, 0] = 1.0
    out[:, 1:3] = d
    out[:, 3:] = (d[:, :, None] * d[:, None, :]).reshape(-1, 4)
    return out


def line_pixels(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer pixels on the segment between two pixels (Bresenham), endpoints included."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    pixels = []
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def raster_width(ink_width: float, multiple: int = 16) -> int:
    columns = int(math.floor(ink_width)) + 1
    return max(multiple, -(-columns // multiple) * multiple)


def rasterize_psf(sample: HandwritingSample, height: int = 128, width: int | None = None,
                  multiple: int = 16, origin=None) -> np.ndarray:
    """Paint each pen-down segment's signature onto the pixels it crosses.

    The sample must already be scaled to ``height``.  Pixel indices are the
    floor of coordinates relative to ``origin`` (default: the bounding-box
    corner, in which case the height is checked); out-of-range indices are
    clamped.  Later segments overwrite earlier ones.
    """
    x0, y0, x1, y1 = sample.bbox()
    if origin is None:
        if abs((y1 - y0) - height) > 0.5:
            raise ContractError(f"sample height {y1 - y0:.3f} is not scaled to {height}")
        origin = (x0, y0)
    origin = np.asarray(origin, dtype=np.float64)
    natural = raster_width(x1 - origin[0], multiple)
    if width is None:
        width = natural
    elif width % multiple or width < natural:
        raise ContractError(f"raster width {width} cannot hold ink of width {x1 - origin[0]:.3f}")
    raster = np.zeros((width, height, CHANNELS), dtype=np.float64)
    for stroke in sample.strokes:
        if len(stroke) < 2:
            continue
        pix = np.floor(stroke.points - origin).astype(np.int64)
        pix[:, 0] = np.clip(pix[:, 0], 0, width - 1)
        pix[:, 1] = np.clip(pix[:, 1], 0, height - 1)
        feats = psf_segments(stroke.points)
        for k, vec in enumerate(feats):
            for cx, cy in line_pixels(*pix[k], *pix[k + 1]):
                raster[cx, cy] = vec
    return raster


def default_scale(step: float) -> tuple[float, ...]:
    return (step, step) + (step * step,) * 4


def normalize_psf(raster: np.ndarray, scale) -> np.ndarray:
    """Map the mask channel {0,1} to {-1,1}; divide and clip the other six to [-1,1]."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (CHANNELS - 1,) or np.any(scale <= 0):
        raise InvalidConfigError(f"need 6 positive normalization constants, got {scale.tolist()}")
    out = np.empty_like(raster)
    out[..., 0] = 2.0 * raster[..., 0] - 1.0
    out[..., 1:] = np.clip(raster[..., 1:] / scale, -1.0, 1.0)
    return out


@dataclass(frozen=True)
class PsfConfig:
    height: int = 128
    step: float = 2.0
    multiple: int = 16
    scale: tuple[float, ...] | None = None

    @property
    def norm_scale(self) -> tuple[float, ...]:
        return self.scale if self.scale is not None else default_scale(self.step)


def natural_width(sample: HandwritingSample, config: PsfConfig = PsfConfig()) -> int:
    """Raster width the pipeline would choose for ``sample`` without a width override."""
    x0, y0, x1, y1 = sample.bbox()
    if not y1 > y0:
        return config.multiple
    return raster_width((x1 - x0) * config.height / (y1 - y0), config.multiple)


def fit_width(sample: HandwritingSample, width: int) -> HandwritingSample:
    """Squeeze a height-scaled sample horizontally so its raster fits ``width`` columns."""
    x0, _, x1, _ = sample.bbox()
    ink = x1 - x0
    if math.floor(ink) + 1 <= width:
        return sample
    k = (width - 1) / ink
    return sample.map_points(lambda p: np.column_stack([x0 + (p[:, 0] - x0) * k, p[:, 1]]))


def psf_pipeline(sample: HandwritingSample, config: PsfConfig = PsfConfig(), width: int | None = None) -> np.ndarray:
    """Scale, resample, rasterize and normalize a sample into a ``(W, height, 7)`` raster.

    ``width`` pins the output width; wider ink is squeezed horizontally, narrower
    ink is zero padded.
    """
    scaled = scale_to_height(sample, config.height)
    if width is not None:
        scaled = fit_width(scaled, width)
    else:
        width = raster_width(scaled.bbox()[2], config.multiple)
    # resampling may shave the bbox, so rasterize in the frame of the scaled ink
    resampled = resample_sample(scaled, config.step)
    raster = rasterize_psf(resampled, config.height, width, config.multiple, origin=(0.0, 0.0))
    return normalize_psf(raster, config.norm_scale)


def export_raster_png(raster: np.ndarray, directory, stem: str = "psf") -> list[Path]:
    """Write each channel as an 8-bit grayscale PNG, mapping [-1, 1] to [0, 255]."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(raster.shape[-1]):
        img = np.clip((raster[:, :, c].T + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
        path = directory / f"{stem}_ch{c}.png"
        Image.fromarray(img, mode="L").save(path)
        paths.append(path)
    return paths
