"""IAM-OnDB ingestion, text encoding and training batches."""
from __future__ import annotations

import logging
import string
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError
from .ink import HandwritingSample, Stroke, to_offsets

log = logging.getLogger(__name__)

UNKNOWN = "\0"


class Vocabulary:
    """Fixed 54-symbol alphabet: unknown placeholder, space, A-Z, a-z."""

    def __init__(self, chars: str = " " + string.ascii_uppercase + string.ascii_lowercase):
        self.chars = [UNKNOWN] + list(chars)
        self.index = {c: i for i, c in enumerate(self.chars) if i > 0}

    def __len__(self):
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index.get(c, 0) for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join("?" if i == 0 else self.chars[i] for i in ids)

    def filter(self, text: str) -> str:
        return "".join(c if c in self.index else "?" for c in text)


VOCAB = Vocabulary()


def encode_text(text: str, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """One-hot ``(len(text), len(vocab))`` matrix; unknown characters go to index 0."""
    onehot = np.zeros((len(text), len(vocab)), dtype=np.float32)
    onehot[np.arange(len(text)), vocab.encode(text)] = 1.0
    return onehot


# -- IAM parsing ---------------------------------------------------------------

def parse_iam_linestrokes(xml_document: bytes | str, text: str | None = None) -> HandwritingSample:
    try:
        root = ET.fromstring(xml_document)
    except ET.ParseError as exc:
        raise ParseError(f"malformed lineStrokes XML: {exc}") from exc

    stroke_set = root.find("StrokeSet") if root.tag != "StrokeSet" else root
    if stroke_set is None:
        raise ParseError(f"/{root.tag}: no StrokeSet element")
    strokes = []
    for si, elem in enumerate(stroke_set.findall("Stroke")):
        points = []
        for pi, pt in enumerate(elem.findall("Point")):
            try:
                points.append((float(pt.attrib["x"]), float(pt.attrib["y"])))
            except (KeyError, ValueError) as exc:
                raise ParseError(
                    f"/{root.tag}/StrokeSet/Stroke[{si}]/Point[{pi}]: bad x/y attributes ({exc})"
                ) from exc
        if not points:
            log.debug("skipping empty Stroke[%d]", si)
            continue
        strokes.append(Stroke(np.array(points)))
    if not strokes:
        raise InvalidInputError(f"/{root.tag}/StrokeSet: no strokes with points")
    return HandwritingSample(tuple(strokes), text)


def read_ascii_lines(path: Path) -> list[str]:
    """Transcription lines that follow the ``CSR:`` marker of an IAM ascii file."""
    lines = Path(path).read_text(encoding="latin-1").splitlines()
    try:
        start = next(i for i, line in enumerate(lines) if line.strip() == "CSR:")
    except StopIteration:
        raise ParseError(f"{path}: no CSR: section") from None
    return [line.strip() for line in lines[start + 1:] if line.strip()]


def discover_iam(root: Path) -> list[tuple[Path, Path, int]]:
    """Find ``(xml_path, ascii_path, line_number)`` triples under an IAM root.

    Expects ``lineStrokes-all/`` and ``ascii-all/`` below ``root``; a line file
    ``a01-000u-01.xml`` maps to line 1 of ``a01-000u.txt``.
    """
    root = Path(root)
    stroke_dir, ascii_dir = root / "lineStrokes-all", root / "ascii-all"
    missing = [str(p) for p in (root, stroke_dir, ascii_dir) if not p.is_dir()]
    if missing:
        raise FileNotFoundError("missing IAM directories: " + ", ".join(missing))
    ascii_files = {p.stem: p for p in ascii_dir.rglob("*.txt")}
    found = []
    for xml_path in sorted(stroke_dir.rglob("*.xml")):
        form, _, line = xml_path.stem.rpartition("-")
        if form in ascii_files and line.isdigit():
            found.append((xml_path, ascii_files[form], int(line)))
        else:
            log.warning("no transcription for %s", xml_path)
    return found


def load_iam(root: Path, vocab: Vocabulary = VOCAB) -> list[HandwritingSample]:
    samples = []
    cache: dict[Path, list[str]] = {}
    for xml_path, ascii_path, line in discover_iam(root):
        if ascii_path not in cache:
            cache[ascii_path] = read_ascii_lines(ascii_path)
        lines = cache[ascii_path]
        if not 1 <= line <= len(lines):
            log.warning("%s: line %d out of range", ascii_path, line)
            continue
        try:
            sample = parse_iam_linestrokes(xml_path.read_bytes(), text=lines[line - 1])
        except (ParseError, InvalidInputError) as exc:
            log.warning("skipping %s: %s", xml_path, exc)
            continue
        samples.append(sample)
    return samples


def vocabulary_stats(samples: Sequence[HandwritingSample], vocab: Vocabulary = VOCAB) -> dict:
    counts = Counter(c for s in samples for c in (s.text or ""))
    unknown = sum(n for c, n in counts.items() if c not in vocab.index)
    return {
        "samples": len(samples),
        "points": int(sum(s.num_points for s in samples)),
        "characters": dict(sorted(counts.items())),
        "unknown_characters": unknown,
    }


# -- splits and batches ----------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[HandwritingSample, ...]
    validation: tuple[HandwritingSample, ...]
    seed: int = 0

    @classmethod
    def from_samples(cls, samples: Sequence[HandwritingSample], validation_fraction: float = 0.05,
                     seed: int = 0) -> "DatasetSplit":
        order = np.random.default_rng(seed).permutation(len(samples))
        n_val = int(round(len(samples) * validation_fraction))
        val = tuple(samples[i] for i in sorted(order[:n_val]))
        train = tuple(samples[i] for i in sorted(order[n_val:]))
        return cls(train, val, seed)


@dataclass(frozen=True)
class Batch:
    offsets: np.ndarray        # (B, T, 3) float32, zero padded
    lengths: np.ndarray        # (B,) true sequence lengths
    text: np.ndarray | None    # (B, U, vocab) one-hot, zero padded
    text_lengths: np.ndarray | None
    samples: tuple[HandwritingSample, ...]

    def __len__(self):
        return len(self.lengths)


def sequence_offsets(sample: HandwritingSample, max_len: int | None = None, scale: float = 1.0) -> np.ndarray:
    """Offsets truncated to ``max_len`` rows; a cut stroke is closed with eos=1."""
    off = to_offsets(sample)
    if max_len is not None and len(off) > max_len:
        off = off[:max_len].copy()
        off[-1, 2] = 1.0
    off[:, :2] /= scale
    return off


def collate(samples: Sequence[HandwritingSample], max_len: int | None = None, scale: float = 1.0,
            vocab: Vocabulary | None = VOCAB) -> Batch:
    if len(samples) == 0:
        raise InvalidInputError("cannot collate an empty batch")
    seqs = [sequence_offsets(s, max_len, scale) for s in samples]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    offsets = np.zeros((len(seqs), lengths.max(), 3), dtype=np.float32)
    for i, s in enumerate(seqs):
        offsets[i, :len(s)] = s
    text = text_lengths = None
    if vocab is not None and all(s.text is not None for s in samples):
        encoded = [encode_text(s.text, vocab) for s in samples]
        text_lengths = np.array([len(e) for e in encoded], dtype=np.int64)
        text = np.zeros((len(encoded), max(1, text_lengths.max()), len(vocab)), dtype=np.float32)
        for i, e in enumerate(encoded):
            text[i, :len(e)] = e
    return Batch(offsets, lengths, text, text_lengths, tuple(samples))


def make_batches(samples: Sequence[HandwritingSample], batch_size: int, max_len: int = 800, seed: int = 0,
                 scale: float = 1.0, vocab: Vocabulary | None = VOCAB) -> Iterator[Batch]:
    """One epoch of batches in a seed-determined shuffled order."""
    if isinstance(samples, DatasetSplit):
        samples = samples.train
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    if len(samples) == 0:
        raise InvalidInputError("cannot batch an empty split")
    order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]], max_len, scale, vocab)
