"""SVG/PNG rendering of ink and a point-spacing uniformity metric."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .ink import HandwritingSample, scale_to_height
from .psf import line_pixels


def _num(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_svg(sample: HandwritingSample, stroke_width: float = 1.5) -> str:
    """One path per stroke: an absolute move to the first point, then relative line-tos."""
    if sample.num_points == 0:
        raise InvalidInputError("cannot render an empty sample")
    x0, y0, x1, y1 = sample.bbox()
    w, h = x1 - x0, y1 - y0
    mx, my = 0.05 * w, 0.05 * h
    if w == 0 and h == 0:
        mx = my = 1.0
    view = (x0 - mx, y0 - my, w + 2 * mx, h + 2 * my)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{" ".join(_num(v) for v in view)}">',
        f'<g fill="none" stroke="black" stroke-width="{_num(stroke_width)}" '
        'stroke-linecap="round" stroke-linejoin="round">',
    ]
    for stroke in sample.strokes:
        pts = stroke.points
        steps = np.diff(pts, axis=0) if len(pts) > 1 else np.zeros((1, 2))
        rel = " ".join(f"{_num(dx)} {_num(dy)}" for dx, dy in steps)
        lines.append(f'<path d="M{_num(pts[0, 0])} {_num(pts[0, 1])} l{rel}"/>')
    lines += ["</g>", "</svg>", ""]
    return "\n".join(lines)


def render_png(sample: HandwritingSample, path, height: int = 128, margin: int = 4) -> Path:
    """Draw the ink with the same integer line traversal used for PSF rasters."""
    from PIL import Image

    x0, y0, x1, y1 = sample.bbox()
    scaled = scale_to_height(sample, height) if y1 > y0 else sample.translate(-x0, -y0)
    _, _, sx1, sy1 = scaled.bbox()
    img = np.full((int(sy1) + 1 + 2 * margin, int(sx1) + 1 + 2 * margin), 255, dtype=np.uint8)
    for stroke in scaled.strokes:
        pix = np.floor(stroke.points).astype(np.int64) + margin
        if len(pix) == 1:
            img[pix[0, 1], pix[0, 0]] = 0
        for a, b in zip(pix[:-1], pix[1:]):
            for cx, cy in line_pixels(*a, *b):
                img[cy, cx] = 0
    path = Path(path)
    Image.fromarray(img, mode="L").save(path)
    return path


def uniformity_cv(sample: HandwritingSample) -> float:
    """Coefficient of variation (population std / mean) of pen-down point spacings."""
    if sample.num_points < 3:
        raise InvalidInputError("uniformity needs at least 3 points")
    gaps = np.concatenate([np.hypot(*np.diff(s.points, axis=0).T) for s in sample.strokes])
    if len(gaps) == 0 or gaps.mean() == 0:
        raise InvalidInputError("uniformity undefined: no pen-down movement")
    return float(gaps.std() / gaps.mean())


@dataclass
class EvalReport:
    uniformity: list[float]
    uniformity_mean: float
    uniformity_std: float
    point_counts: list[int]
    stroke_counts: list[int]
    names: list[str] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def eval_report(samples: Sequence[HandwritingSample], names: Sequence[str] | None = None) -> EvalReport:
    if len(samples) == 0:
        raise InvalidInputError("no samples to evaluate")
    cvs = [uniformity_cv(s) for s in samples]
    return EvalReport(
        uniformity=cvs,
        uniformity_mean=float(np.mean(cvs)),
        uniformity_std=float(np.std(cvs)),
        point_counts=[s.num_points for s in samples],
        stroke_counts=[len(s.strokes) for s in samples],
        names=list(names) if names is not None else None,
    )
