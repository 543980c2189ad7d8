"""Acceptance suite: one test per criterion, each checked at its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py`` to get a PASS/FAIL line per criterion in the summary.
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from hwgan.data import collate, encode_text
from hwgan.discriminator import Discriminator, DiscriminatorConfig, accuracy, cnn_encode, d_loss, d_train_step
from hwgan.generator import GeneratorConfig, PredictionNet, SynthesisNet, batch_nll, build_generator, gs_forward
from hwgan.ink import HandwritingSample
from hwgan.mdn import apply_bias, mdn_log_prob, mdn_split, sample_next
from hwgan.psf import psf_pair, psf_pipeline
from hwgan.train import TrainConfig, TrainingState, gan_loop, pretrain_loop, rasterize_batch, score_function_loss

from helpers import (cursive, finite_difference_check, random_walk, tiny_cli_config, well_conditioned,
                     write_iam_tree)


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False

    def check(self):
        assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


# 1 ------------------------------------------------------------------------------------------

def oracle_signature(a, b):
    """Level 0, level 1 and the four level-2 products, term by term."""
    dx = float(b[0]) - float(a[0])
    dy = float(b[1]) - float(a[1])
    return [1.0, dx, dy, dx * dx, dx * dy, dy * dx, dy * dy]


@pytest.mark.criterion(1, "PSF oracle equivalence (1000 pairs, bit-exact)")
def test_psf_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)
    pairs = rng.normal(0, 100, (1000, 2, 2))
    with Budget(1.0) as budget:
        mismatches = sum(psf_pair(a, b).tolist() != oracle_signature(a, b) for a, b in pairs)
    record_property("measured", f"{mismatches} mismatches, {budget.elapsed:.3f}s")
    assert mismatches == 0
    budget.check()


# 2 ------------------------------------------------------------------------------------------

@pytest.mark.criterion(2, "Discriminator shape chain")
def test_discriminator_shape_chain(record_property):
    with Budget(10.0) as budget:
        torch.manual_seed(0)
        model = Discriminator()
        shapes = {w: tuple(cnn_encode(model, np.zeros((w, 128, 7), dtype=np.float32)).shape)
                  for w in (16, 32, 128, 144, 160, 512)}
    record_property("measured", f"{shapes}, {budget.elapsed:.2f}s")
    assert shapes == {w: (w // 16, 256) for w in shapes}
    budget.check()


# 3 ------------------------------------------------------------------------------------------

@pytest.mark.criterion(3, "Output-head arithmetic (121 at M=20, 1+6M otherwise)")
def test_output_head_arithmetic(record_property):
    with Budget(1.0) as budget:
        x = torch.zeros(1, 2, 3)
        text = torch.as_tensor(encode_text("ab"))[None]
        sizes = {"Gp": PredictionNet()(x)[0].shape[-1], "Gs": SynthesisNet()(x, None, text)[0].shape[-1]}
        varied = {}
        for m in (1, 2, 5, 7, 33):
            gp = PredictionNet(GeneratorConfig.prediction(hidden=(4, 4, 4), mixtures=m))
            gs = SynthesisNet(GeneratorConfig.synthesis(hidden=(4, 4), mixtures=m))
            raw_p, raw_s = gp(x)[0], gs(x, None, text)[0]
            varied[m] = (raw_p.shape[-1], raw_s.shape[-1], mdn_split(raw_p, m).mixtures)
    record_property("measured", f"{sizes}, {budget.elapsed:.2f}s")
    assert sizes == {"Gp": 121, "Gs": 121}
    assert all(v == (1 + 6 * m, 1 + 6 * m, m) for m, v in varied.items())
    budget.check()


# 4 ------------------------------------------------------------------------------------------

TINY_D = DiscriminatorConfig(height=8, layers=(("conv", 2, (1, 1)), ("pool",), ("conv", 3, (2, 1)), ("pool",)),
                             lstm_hidden=1, fc_hidden=2)


@pytest.mark.criterion(4, "Gradient correctness vs central finite differences (< 1e-4)")
def test_gradient_correctness(record_property):
    errors = {}
    with Budget(30.0) as budget:
        torch.manual_seed(0)
        disc = well_conditioned(Discriminator(TINY_D).double())
        x = torch.randn(4, 8, 8, 7, dtype=torch.float64)
        errors["D"] = finite_difference_check(disc, lambda: d_loss(disc(x), [1, 0, 1, 0], smoothing=0.1))

        rng = np.random.default_rng(0)
        batch = collate([HandwritingSample(cursive(rng, 2, 4).strokes, t) for t in ("ab", "cd")])
        for name, cfg in (("Gp", GeneratorConfig.prediction(hidden=(4, 4, 4), mixtures=2)),
                          ("Gs", GeneratorConfig.synthesis(hidden=(4, 4), mixtures=2))):
            net = well_conditioned(build_generator(cfg, seed=0).double())
            errors[name] = finite_difference_check(net, lambda: batch_nll(net, batch))
    record_property("measured", ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f", {budget.elapsed:.1f}s")
    assert max(errors.values()) < 1e-4
    budget.check()


# 5 ------------------------------------------------------------------------------------------

@pytest.mark.criterion(5, "Sampler statistics (100k draws)")
def test_sampler_statistics(record_property):
    n = 100_000
    with Budget(10.0) as budget:
        raw = torch.tensor([0.0, 0.0, 1.0, 2.0, math.log(0.5), math.log(0.25), math.atanh(0.3)], dtype=torch.float64)
        draws = sample_next(mdn_split(raw.expand(n, 7), 1), np.random.default_rng(0))
        mean = draws[:, :2].mean(0)
        corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    record_property("measured", f"mean ({mean[0]:.4f}, {mean[1]:.4f}), corr {corr:.4f}, {budget.elapsed:.2f}s")
    assert abs(mean[0] - 1.0) < 3 * 0.5 / math.sqrt(n)
    assert abs(mean[1] - 2.0) < 3 * 0.25 / math.sqrt(n)
    assert abs(corr - 0.3) < 0.02
    budget.check()


# 6 ------------------------------------------------------------------------------------------

@pytest.mark.criterion(6, "Bias behavior")
def test_bias_behavior(record_property):
    with Budget(1.0) as budget:
        raw = torch.randn(256, 121, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        plain = mdn_split(raw)
        identity = all(torch.equal(a, b) for a, b in zip(plain, apply_bias(raw, 0.0)))
        biases = [0.0, 0.25, 1.0, 3.0, 5.0, 10.0]
        sigmas = [apply_bias(raw, b).sigma for b in biases]
        decreasing = all(torch.all(hi > lo) for hi, lo in zip(sigmas, sigmas[1:]))
        argmax = all(torch.equal(apply_bias(raw, b).pi.argmax(-1), plain.pi.argmax(-1)) for b in biases)
        sigma10 = apply_bias(torch.zeros(121, dtype=torch.float64), 10.0).sigma
        err10 = (sigma10 - math.exp(-10)).abs().max().item()
    record_property("measured", f"|sigma(b=10) - e^-10| = {err10:.1e}, {budget.elapsed:.3f}s")
    assert identity and decreasing and argmax
    assert err10 < 1e-12
    budget.check()


# 7 ------------------------------------------------------------------------------------------

@pytest.mark.criterion(7, "Window monotonicity over 1000 gs_forward steps")
def test_window_monotonicity(record_property):
    rng = np.random.default_rng(0)
    text = encode_text("the quick brown fox jumps over")
    net = build_generator(GeneratorConfig.synthesis(), seed=0)
    increasing, state, kappa = True, None, None
    with Budget(10.0) as budget, torch.no_grad():
        for _ in range(1000):
            _, state = gs_forward(net, rng.normal(0, 2, 3) * [1, 1, 0] + [0, 0, rng.integers(0, 2)], text, state)
            if kappa is not None:
                increasing &= bool(torch.all(state.kappa > kappa))
            kappa = state.kappa.clone()
    record_property("measured", f"final kappa {kappa.min().item():.1f}..{kappa.max().item():.1f}, "
                                f"{budget.elapsed:.1f}s")
    assert increasing
    budget.check()


# 8 ------------------------------------------------------------------------------------------

def toy_expected_reward(theta):
    """Closed-form E[r] of the one-step mixture for r = -(dx-1)^2 - (dy+0.5)^2/2 + 0.8 dx dy + 1.5 eos."""
    e_hat, pi_hat = theta[0], theta[1:3]
    mx, my, lsx, lsy, rho_hat = theta[3:5], theta[5:7], theta[7:9], theta[9:11], theta[11:13]
    pi = np.exp(pi_hat - pi_hat.max())
    pi /= pi.sum()
    sx, sy, rho = np.exp(lsx), np.exp(lsy), np.tanh(rho_hat)
    e = 1.0 / (1.0 + np.exp(-e_hat))
    ex, ey = pi @ mx, pi @ my
    exx, eyy = pi @ (sx ** 2 + mx ** 2), pi @ (sy ** 2 + my ** 2)
    exy = pi @ (rho * sx * sy + mx * my)
    return -(exx - 2 * ex + 1) - 0.5 * (eyy + ey + 0.25) + 0.8 * exy + 1.5 * e


def toy_reward(x):
    return -(x[:, 0] - 1) ** 2 - 0.5 * (x[:, 1] + 0.5) ** 2 + 0.8 * x[:, 0] * x[:, 1] + 1.5 * x[:, 2]


@pytest.mark.criterion(8, "Score-function estimator vs finite differences (10^6 samples, 5%)")
def test_score_function_estimator(record_property):
    n, h = 10 ** 6, 1e-6
    theta0 = np.random.default_rng(15).normal(0, 0.6, 13)
    with Budget(60.0) as budget:
        fd = np.array([(toy_expected_reward(theta0 + h * e) - toy_expected_reward(theta0 - h * e)) / (2 * h)
                       for e in np.eye(13)])
        theta = torch.tensor(theta0, requires_grad=True)
        params = mdn_split(theta.expand(n, 13), 2)
        draws = sample_next(params, np.random.default_rng(0))
        rewards = torch.as_tensor(toy_reward(draws))
        loss = score_function_loss(rewards, mdn_log_prob(params, torch.as_tensor(draws)), rewards.mean().item())
        loss.backward()
        estimate = -theta.grad.numpy()
    rel = np.abs(estimate - fd) / np.abs(fd)
    record_property("measured", f"max relative error {rel.max():.4f}, min |grad| {np.abs(fd).min():.3f}, "
                                f"{budget.elapsed:.1f}s")
    assert np.all(rel < 0.05)
    budget.check()


# 9 ------------------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(9, "Desk-scale pretraining (NLL drop >= 20% in 500 steps)")
def test_desk_scale_pretraining(record_property):
    rng = np.random.default_rng(0)
    samples = [cursive(rng, 2, 20) for _ in range(16)]
    state = TrainingState.create(TrainConfig(lr_g=1e-3, batch_size=16, seed=0), GeneratorConfig.prediction())
    batch = collate(samples)
    with Budget(300.0) as budget:
        with torch.no_grad():
            before = batch_nll(state.gen, batch).item()
        pretrain_loop(state, samples, 500)
        with torch.no_grad():
            after = batch_nll(state.gen, batch).item()
    drop = (before - after) / abs(before)
    record_property("measured", f"NLL {before:.3f} -> {after:.3f} ({100 * drop:.0f}% drop), {budget.elapsed:.0f}s")
    assert drop >= 0.2
    budget.check()


# 10 -----------------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(10, "Desk-scale discrimination (held-out accuracy >= 0.95)")
def test_desk_scale_discrimination(record_property):
    rng = np.random.default_rng(0)
    with Budget(300.0) as budget:
        real = [psf_pipeline(cursive(rng, 2, 20), width=64).astype(np.float32) for _ in range(96)]
        fake = [psf_pipeline(random_walk(rng, 2, 20), width=64).astype(np.float32) for _ in range(96)]
        torch.manual_seed(0)
        model = Discriminator()
        opt = torch.optim.Adam(model.parameters(), 1e-3)
        for step in range(300):
            i = (step * 8) % 64
            d_train_step(model, opt, real[i:i + 8], fake[i:i + 8], smoothing=0.1, step=step)
        acc = accuracy(model, real[64:], fake[64:])
    record_property("measured", f"held-out accuracy {acc:.3f} on 64, {budget.elapsed:.0f}s")
    assert acc >= 0.95
    budget.check()


# 11 -----------------------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(11, "GAN smoke (200 iterations, unit-norm G gradients, bit-identical reload)")
def test_gan_smoke(tmp_path, record_property):
    rng = np.random.default_rng(0)
    samples = [cursive(rng, 2, 20) for _ in range(16)]
    config = TrainConfig(batch_size=4, max_points=60, width_buckets=(64,), checkpoint_every=100, sample_every=100)
    state = TrainingState.create(config, GeneratorConfig.prediction(hidden=(32, 32, 32), mixtures=5),
                                 disc_config=DiscriminatorConfig())
    with Budget(600.0) as budget:
        history = gan_loop(state, samples, 200, tmp_path)
    finite = all(math.isfinite(v) for m in history for v in m.values() if v is not None)
    stepped = [m for m in history if m["g_grad_norm_raw"] > 0]
    worst = max(abs(m["g_grad_norm"] - 1) for m in stepped)

    x = torch.as_tensor(collate(samples[:3]).offsets)
    raster = torch.as_tensor(np.stack(rasterize_batch(samples[:3], state.psf, 64)), dtype=torch.float32)
    with torch.no_grad():
        before = state.gen(x)[0], state.disc(raster)
    path = state.save(tmp_path / "final.hwgn")
    loaded = TrainingState.load(path)
    with torch.no_grad():
        after = loaded.gen(x)[0], loaded.disc(raster)
    identical = torch.equal(before[0], after[0]) and torch.equal(before[1], after[1])
    record_property("measured", f"{len(stepped)}/200 steps updated, max |norm-1| {worst:.1e}, "
                                f"reload identical={identical}, {budget.elapsed:.0f}s")
    assert len(history) == 200 and finite
    assert len(stepped) == 200 and worst <= 1e-6
    assert identical and loaded.step == 200
    budget.check()


# 12 -----------------------------------------------------------------------------------------

def _cli(*argv):
    subprocess.run([sys.executable, "-m", "hwgan", *argv], check=True, capture_output=True)


def _cli_session(root: Path, work: Path, config: Path):
    cfg = ["--config", str(config)]
    cache = str(work / "cache.jsonl")
    _cli(*cfg, "preprocess", "--data-root", str(root), "--cache", cache)
    _cli(*cfg, "pretrain", "--mode", "prediction", "--cache", cache, "--out", str(work / "gp"), "--steps", "3",
         "--seed", "5")
    _cli(*cfg, "pretrain", "--mode", "synthesis", "--cache", cache, "--out", str(work / "gs"), "--steps", "3",
         "--seed", "5")
    _cli(*cfg, "train-gan", "--mode", "synthesis", "--cache", cache, "--out", str(work / "gan"), "--steps", "2",
         "--seed", "5", "--pretrained", str(work / "gs" / "last.hwgn"))
    _cli(*cfg, "sample", "--checkpoint", str(work / "gan" / "last.hwgn"), "--text", "hello", "--bias", "3.0",
         "--seed", "7", "--count", "2", "--out", str(work / "samples"))
    _cli(*cfg, "sample", "--checkpoint", str(work / "gp" / "last.hwgn"), "--bias", "3.0", "--seed", "7",
         "--count", "2", "--max-points", "40", "--out", str(work / "samples_gp"))
    _cli(*cfg, "eval", str(work / "samples"))
    return {p.relative_to(work).as_posix(): p.read_bytes() for p in sorted(work.rglob("*")) if p.is_file()}


@pytest.mark.slow
@pytest.mark.criterion(12, "CLI determinism (byte-identical reruns)")
def test_cli_determinism(tmp_path, record_property):
    write_iam_tree(tmp_path / "iam", np.random.default_rng(0), forms=2, lines=4)
    config = tiny_cli_config(tmp_path / "config.json")
    first = _cli_session(tmp_path / "iam", tmp_path / "run1", config)
    second = _cli_session(tmp_path / "iam", tmp_path / "run2", config)
    differing = sorted(k for k in first if first[k] != second.get(k))
    record_property("measured", f"{len(first)} artifacts compared, {len(differing)} differ")
    assert set(first) == set(second)
    assert {"cache.jsonl", "gp/last.hwgn", "gan/last.hwgn", "gan/metrics.jsonl", "samples/samples.jsonl",
            "samples/sample_000.svg", "samples/sample_000.png", "samples/report.json"} <= set(first)
    assert not differing, differing


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
