"""Synthetic ink used across the test suite."""
import numpy as np
import torch

from hwgan.ink import HandwritingSample, Stroke


def cursive(rng, strokes=2, points=20, loop=3.0, advance=1.2):
    """Smooth looping strokes, roughly like a cursive 'eeee' written left to right."""
    out, x_start = [], 0.0
    for _ in range(strokes):
        t = np.linspace(0, 2 * np.pi * rng.uniform(1.5, 2.5), points)
        r = loop * rng.uniform(0.8, 1.2)
        x = x_start + advance * r * t / np.pi + r * np.cos(t + np.pi)
        y = r * np.sin(t) * rng.uniform(0.9, 1.1) + rng.normal(0, 0.05, points)
        out.append(Stroke(np.column_stack([x, -y])))
        x_start = x.max() + rng.uniform(1.0, 2.0)
    return HandwritingSample(tuple(out))


def random_walk(rng, strokes=2, points=20, step=1.5):
    out, origin = [], np.zeros(2)
    for _ in range(strokes):
        pts = origin + np.cumsum(rng.normal(0, step, (points, 2)), axis=0)
        out.append(Stroke(pts))
        origin = pts[-1] + np.array([2.0, 0.0])
    return HandwritingSample(tuple(out))


def random_sample(rng, max_strokes=4, max_points=15, text=None):
    strokes = tuple(Stroke(rng.normal(0, 10, (rng.integers(1, max_points + 1), 2)))
                    for _ in range(rng.integers(1, max_strokes + 1)))
    return HandwritingSample(strokes, text)


IAM_XML = """<?xml version="1.0" encoding="ISO-8859-1"?>
<WhiteboardCaptureSession>
  <WhiteboardDescription><SensorLocation corner="top_left"/></WhiteboardDescription>
  <StrokeSet>
{strokes}
  </StrokeSet>
</WhiteboardCaptureSession>
"""


def iam_xml(strokes):
    body = []
    for pts in strokes:
        inner = "".join(f'<Point x="{x}" y="{y}" time="0.0"/>' for x, y in pts)
        body.append(f'    <Stroke colour="black" start_time="0" end_time="1">{inner}</Stroke>')
    return IAM_XML.format(strokes="\n".join(body)).encode("latin-1")


def write_iam_tree(root, rng, forms=2, lines=3):
    """A miniature IAM-OnDB layout: lineStrokes-all/ and ascii-all/."""
    texts = ["A MOVE to stop", "Mr Gaitskell from", "nominating any more", "Labour life Peers"]
    for f in range(forms):
        form = f"a01-00{f}u"
        ascii_dir = root / "ascii-all" / "ascii" / "a01" / f"a01-00{f}"
        stroke_dir = root / "lineStrokes-all" / "lineStrokes" / "a01" / f"a01-00{f}"
        ascii_dir.mkdir(parents=True, exist_ok=True)
        stroke_dir.mkdir(parents=True, exist_ok=True)
        chosen = [texts[(f + i) % len(texts)] for i in range(lines)]
        (ascii_dir / f"{form}.txt").write_text("OCR:\n\nsome text\n\nCSR:\n\n" + "\n".join(chosen) + "\n")
        for i in range(lines):
            sample = cursive(rng, strokes=2, points=12)
            strokes = [np.round(s.points * 30 + 1000).astype(int) for s in sample.strokes]
            (stroke_dir / f"{form}-{i + 1:02d}.xml").write_bytes(iam_xml(strokes))


def finite_difference_check(model, loss_fn, h=1e-5):
    """Max over parameter tensors of ||analytic - central FD|| / max(||analytic||, ||FD||)."""
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst


def well_conditioned(model, std=0.5):
    # default init leaves the 1-unit LSTM nearly saturated and conv gradients ~1e-8,
    # where central differences are dominated by round-off
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, std)
    return model


def small_discriminator_config(height=32):
    """A few-channel discriminator that reduces a height-32 raster to one row."""
    from hwgan.discriminator import DiscriminatorConfig

    layers = (("conv", 4, (1, 1)), ("pool",), ("conv", 4, (2, 1)), ("pool",), ("conv", 4, (2, 1)),
              ("conv", 4, (2, 1)))
    return DiscriminatorConfig(height=height, layers=layers, lstm_hidden=8, fc_hidden=4)


def tiny_cli_config(path):
    """Write a JSON config with desk-sized networks and return its path."""
    import json

    config = {
        "train": {"batch_size": 3, "max_points": 30, "points_per_char": 6, "width_buckets": [64, 128],
                  "checkpoint_every": 0, "sample_every": 0},
        "generator": {"prediction": {"kind": "prediction", "hidden": [8, 8, 8], "mixtures": 2, "offset_scale": 20.0},
                      "synthesis": {"kind": "synthesis", "hidden": [8, 8], "mixtures": 2, "window": 2,
                                    "offset_scale": 20.0}},
        "discriminator": small_discriminator_config().to_dict(),
        "psf": {"height": 32, "step": 2.0, "multiple": 16, "scale": None},
        "data": {"validation_fraction": 0.2, "split_seed": 0},
        "sampler": {"bias": 3.0, "max_points": 30},
    }
    path.write_text(json.dumps(config))
    return path
