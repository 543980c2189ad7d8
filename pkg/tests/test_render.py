import json
import math
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from hwgan.errors import InvalidInputError
from hwgan.ink import HandwritingSample, Stroke
from hwgan.render import eval_report, render_png, render_svg, uniformity_cv

from helpers import cursive

SVG = "{http://www.w3.org/2000/svg}"


def two_strokes():
    return HandwritingSample((Stroke([[0, 0], [10, 5], [20, 0]]), Stroke([[30, 0], [30, 10]])))


def test_svg_structure():
    doc = render_svg(two_strokes())
    root = ET.fromstring(doc)
    paths = root.findall(f".//{SVG}path")
    assert len(paths) == 2
    assert paths[0].get("d") == "M0 0 l10 5 10 -5"
    assert root.get("viewBox") == "-1.5 -0.5 33 11"


def test_svg_translation_only_moves_viewbox_and_origins():
    sample = cursive(np.random.default_rng(0))
    a, b = render_svg(sample), render_svg(sample.translate(100, -40))
    rel = lambda doc: re.findall(r" l([^\"]*)\"", doc)
    assert rel(a) == rel(b)
    va = [float(v) for v in ET.fromstring(a).get("viewBox").split()]
    vb = [float(v) for v in ET.fromstring(b).get("viewBox").split()]
    assert vb[0] == pytest.approx(va[0] + 100, abs=2e-3) and vb[1] == pytest.approx(va[1] - 40, abs=2e-3)
    assert vb[2:] == va[2:]


def test_svg_stable_and_errors():
    sample = cursive(np.random.default_rng(1))
    assert render_svg(sample) == render_svg(sample)
    single = render_svg(HandwritingSample((Stroke([[3, 4]]),)))
    assert ET.fromstring(single).get("viewBox") == "2 3 2 2"
    with pytest.raises(InvalidInputError):
        render_svg(HandwritingSample(()))


def test_png(tmp_path):
    path = render_png(two_strokes(), tmp_path / "a.png", height=64)
    img = np.asarray(Image.open(path))
    assert img.shape[0] == 64 + 1 + 8
    assert (img == 0).any() and (img == 255).any()
    assert path.read_bytes() == render_png(two_strokes(), tmp_path / "b.png", height=64).read_bytes()


def test_uniformity_examples():
    line = HandwritingSample((Stroke(np.column_stack([np.arange(6.0), np.zeros(6)])),))
    assert uniformity_cv(line) == 0
    uneven = HandwritingSample((Stroke([[0, 0], [1, 0], [4, 0]]),))
    assert uniformity_cv(uneven) == pytest.approx(0.5, abs=1e-15)


def test_uniformity_invariances():
    sample = cursive(np.random.default_rng(2))
    base = uniformity_cv(sample)
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    assert uniformity_cv(sample.scale(3.7)) == pytest.approx(base, rel=1e-12)
    assert uniformity_cv(sample.translate(5, -9)) == pytest.approx(base, rel=1e-12)
    assert uniformity_cv(sample.map_points(lambda p: p @ rot.T)) == pytest.approx(base, rel=1e-12)


def test_uniformity_ignores_pen_up_gaps():
    a = HandwritingSample((Stroke([[0, 0], [1, 0]]), Stroke([[50, 0], [51, 0]])))
    assert uniformity_cv(a) == 0


def test_uniformity_errors():
    with pytest.raises(InvalidInputError):
        uniformity_cv(HandwritingSample((Stroke([[0, 0], [1, 1]]),)))
    with pytest.raises(InvalidInputError):
        uniformity_cv(HandwritingSample((Stroke([[1, 1], [1, 1], [1, 1]]),)))


def test_eval_report():
    samples = [cursive(np.random.default_rng(i)) for i in range(3)]
    single = eval_report(samples[:1])
    assert single.uniformity_mean == single.uniformity[0]
    report = eval_report(samples, ["a", "b", "c"])
    assert len(report.uniformity) == 3 and report.point_counts == [40, 40, 40] and report.stroke_counts == [2, 2, 2]
    data = json.loads(report.to_json())
    assert all(math.isfinite(v) for v in data["uniformity"]) and data["names"] == ["a", "b", "c"]
    assert report.to_json() == eval_report(samples, ["a", "b", "c"]).to_json()
    with pytest.raises(InvalidInputError):
        eval_report([])
