"""Digital-ink data model and geometric transforms.

A sample is an ordered list of strokes; each stroke is an ``(n, 2)`` array of
absolute ``(x, y)`` coordinates.  The pen flag is implicit: it is 1 on the last
point of every stroke and 0 elsewhere.  ``y`` grows downward.

The model-facing representation is an ``(n, 3)`` offset array whose rows are
``(dx, dy, eos)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError


class StrokePoint(NamedTuple):
    x: float
    y: float
    pen: int


class OffsetPoint(NamedTuple):
    dx: float
    dy: float
    eos: int


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Stroke:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise InvalidInputError(f"stroke needs an (n>=1, 2) point array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("stroke contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, Stroke) and np.array_equal(self.points, other.points)

    @property
    def pens(self) -> np.ndarray:
        pens = np.zeros(len(self.points), dtype=np.int64)
        pens[-1] = 1
        return pens

    def arc_length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T)))

    def as_points(self) -> list[StrokePoint]:
        return [StrokePoint(float(x), float(y), int(p)) for (x, y), p in zip(self.points, self.pens)]


@dataclass(frozen=True, eq=False)
class HandwritingSample:
    strokes: tuple[Stroke, ...]
    text: str | None = field(default=None)

    def __post_init__(self):
        strokes = tuple(s if isinstance(s, Stroke) else Stroke(s) for s in self.strokes)
        if not strokes:
            raise InvalidInputError("a handwriting sample needs at least one stroke")
        object.__setattr__(self, "strokes", strokes)

    def __eq__(self, other):
        return (
            isinstance(other, HandwritingSample)
            and self.text == other.text
            and len(self.strokes) == len(other.strokes)
            and all(a == b for a, b in zip(self.strokes, other.strokes))
        )

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]], text: str | None = None) -> "HandwritingSample":
        """Build a sample from ``(x, y, pen)`` rows; a stroke ends at every pen=1 row."""
        rows = np.asarray(list(points), dtype=np.float64).reshape(-1, 3)
        if len(rows) == 0:
            raise InvalidInputError("no points given")
        ends = np.flatnonzero(rows[:, 2] == 1) + 1
        if len(ends) == 0 or ends[-1] != len(rows):
            ends = np.append(ends, len(rows))
        starts = np.concatenate([[0], ends[:-1]])
        return cls(tuple(Stroke(rows[a:b, :2]) for a, b in zip(starts, ends)), text)

    @property
    def num_points(self) -> int:
        return sum(len(s) for s in self.strokes)

    def points(self) -> np.ndarray:
        """Flattened ``(n, 3)`` array of ``(x, y, pen)`` rows in temporal order."""
        return np.concatenate([np.column_stack([s.points, s.pens]) for s in self.strokes])

    def xy(self) -> np.ndarray:
        return np.concatenate([s.points for s in self.strokes])

    def bbox(self) -> tuple[float, float, float, float]:
        """``(min_x, min_y, max_x, max_y)``."""
        xy = self.xy()
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def map_points(self, fn) -> "HandwritingSample":
        return HandwritingSample(tuple(Stroke(fn(s.points)) for s in self.strokes), self.text)

    def translate(self, dx: float, dy: float) -> "HandwritingSample":
        shift = np.array([dx, dy])
        return self.map_points(lambda p: p + shift)

    def scale(self, sx: float, sy: float | None = None) -> "HandwritingSample":
        factors = np.array([sx, sx if sy is None else sy])
        return self.map_points(lambda p: p * factors)


def to_offsets(sample: HandwritingSample) -> np.ndarray:
    """Return the ``(n, 3)`` offset encoding; row 0 is ``(0, 0, pen_0)``."""
    if not isinstance(sample, HandwritingSample) or sample.num_points == 0:
        raise InvalidInputError("to_offsets needs a non-empty HandwritingSample")
    pts = sample.points()
    out = np.empty_like(pts)
    out[0, :2] = 0.0
    out[1:, :2] = np.diff(pts[:, :2], axis=0)
    out[:, 2] = pts[:, 2]
    return out


def from_offsets(offsets, origin=(0.0, 0.0), text: str | None = None) -> HandwritingSample:
    """Inverse of :func:`to_offsets`: cumulative sums from ``origin``.

    A new stroke starts after every ``eos == 1`` row.  A trailing run without a
    closing eos still forms a stroke whose last point gets pen=1.
    """
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    if len(off) == 0:
        raise InvalidInputError("cannot build a sample from an empty offset sequence")
    xy = np.cumsum(off[:, :2], axis=0) + np.asarray(origin, dtype=np.float64)
    return HandwritingSample.from_points(np.column_stack([xy, off[:, 2] > 0.5]), text)


def scale_to_height(sample: HandwritingSample, target_height: int = 128) -> HandwritingSample:
    """Uniformly scale to the given bounding-box height with the min corner at the origin."""
    x0, y0, _, y1 = sample.bbox()
    height = y1 - y0
    if not height > 0:
        raise DegenerateGeometryError("sample has zero bounding-box height")
    k = target_height / height
    origin = np.array([x0, y0])
    return sample.map_points(lambda p: (p - origin) * k)


def resample_uniform(stroke: Stroke, step: float, keep_vertices: bool = False) -> Stroke:
    """Resample a stroke at arc-length multiples of ``step``.

    Both endpoints are always kept.  With ``keep_vertices`` the original polyline
    vertices are kept as well, which preserves the arc length exactly at corners.
    """
    if not step > 0:
        raise InvalidInputError(f"resampling step must be positive, got {step}")
    pts = stroke.points
    if len(pts) < 2:
        return stroke
    seg = np.hypot(*np.diff(pts, axis=0).T)
    if not np.any(seg > 0):
        return Stroke(pts[[0, -1]])
    # drop repeated points so the arc-length abscissa is strictly increasing
    keep = np.concatenate([[True], seg > 0])
    pts, seg = pts[keep], seg[seg > 0]
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = int(np.floor(total / step))
    targets = np.arange(n + 1) * step
    if targets[-1] < total:
        targets = np.append(targets, total)
    if keep_vertices:
        targets = np.union1d(targets, cum)
    x = np.interp(targets, cum, pts[:, 0])
    y = np.interp(targets, cum, pts[:, 1])
    out = np.column_stack([x, y])
    out[0], out[-1] = pts[0], pts[-1]
    return Stroke(out)


def resample_sample(sample: HandwritingSample, step: float, keep_vertices: bool = False) -> HandwritingSample:
    return HandwritingSample(tuple(resample_uniform(s, step, keep_vertices) for s in sample.strokes), sample.text)


# -- interchange format ------------------------------------------------------

def sample_to_record(sample: HandwritingSample) -> dict:
    record = {"strokes": [s.points.tolist() for s in sample.strokes]}
    if sample.text is not None:
        record["text"] = sample.text
    return record


def sample_from_record(record: dict) -> HandwritingSample:
    try:
        strokes = tuple(Stroke(np.asarray(s, dtype=np.float64)) for s in record["strokes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed sample record: {exc}") from exc
    return HandwritingSample(strokes, record.get("text"))


def dumps_samples(samples: Iterable[HandwritingSample]) -> str:
    return "".join(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n" for s in samples)


def write_samples(path, samples: Iterable[HandwritingSample]) -> None:
    Path(path).write_text(dumps_samples(samples), encoding="utf-8")


def iter_samples(path) -> Iterator[HandwritingSample]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            try:
                yield sample_from_record(record)
            except InvalidInputError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc


def read_samples(path) -> list[HandwritingSample]:
    return list(iter_samples(path))
