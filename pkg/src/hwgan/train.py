"""Maximum-likelihood pretraining and the adversarial generator/discriminator loop."""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .data import collate, encode_text
from .discriminator import Discriminator, DiscriminatorConfig, as_batch, d_train_step
from .errors import (ContractError, CorruptCheckpointError, DegenerateGeometryError,
                     InvalidConfigError, TrainingDivergenceError)
from .generator import (GeneratorConfig, SampleResult, SamplerConfig, build_generator, pad_offsets,
                        pretrain_step, sample_batch, sequence_log_prob)
from .ink import HandwritingSample, write_samples
from .psf import PsfConfig, natural_width, psf_pipeline

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    decay_factor: float = 0.97
    decay_interval: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)
    label_smoothing: float = 0.1
    train_bias: float = 0.0
    batch_size: int = 16
    max_len: int = 800
    max_points: int = 700
    points_per_char: int = 25
    width_buckets: tuple[int, ...] = (256, 512, 1024, 2048)
    d_steps: int = 1
    g_steps: int = 1
    baseline_momentum: float = 0.9
    clip_norm: float | None = 10.0
    seed: int = 0
    checkpoint_every: int = 1000
    sample_every: int = 1000

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise InvalidConfigError("decay factor must lie in (0, 1]")
        if not 0 <= self.label_smoothing < 0.5:
            raise InvalidConfigError("label smoothing must lie in [0, 0.5)")
        if not self.width_buckets or any(w % 16 for w in self.width_buckets):
            raise InvalidConfigError("width buckets must be non-empty multiples of 16")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "width_buckets", tuple(sorted(self.width_buckets)))

    def lr_at(self, base: float, step: int) -> float:
        return base * self.decay_factor ** (step // self.decay_interval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["width_buckets"] = list(self.betas), list(self.width_buckets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def psf_config_from_dict(d: dict) -> PsfConfig:
    d = dict(d)
    if d.get("scale") is not None:
        d["scale"] = tuple(d["scale"])
    return PsfConfig(**d)


def psf_config_to_dict(c: PsfConfig) -> dict:
    d = asdict(c)
    if d["scale"] is not None:
        d["scale"] = list(d["scale"])
    return d


# -- rasters -----------------------------------------------------------------------

def choose_bucket(widths: Sequence[int], buckets: Sequence[int]) -> int:
    """Smallest bucket holding every width, else the largest bucket."""
    need = max(widths)
    return next((b for b in sorted(buckets) if b >= need), max(buckets))


def blank_raster(width: int, config: PsfConfig) -> np.ndarray:
    raster = np.zeros((width, config.height, 7))
    raster[..., 0] = -1.0
    return raster


def rasterize_batch(samples: Sequence[HandwritingSample], config: PsfConfig, width: int) -> list[np.ndarray]:
    out = []
    for s in samples:
        try:
            out.append(psf_pipeline(s, config, width))
        except DegenerateGeometryError:
            # flat or single-point ink has no height to scale; treat it as empty
            out.append(blank_raster(width, config))
    return out


@dataclass
class FakeBatch:
    rasters: list[np.ndarray]
    log_probs: np.ndarray
    result: SampleResult
    width: int


def make_fake_batch(net: nn.Module, config: TrainConfig, psf: PsfConfig, count: int,
                    texts: Sequence[str] | None = None, width: int | None = None,
                    rng: np.random.Generator | None = None) -> FakeBatch:
    sampler = SamplerConfig(bias=config.train_bias, max_points=config.max_points,
                            points_per_char=config.points_per_char)
    result = sample_batch(net, count, sampler, texts, rng if rng is not None else np.random.default_rng(config.seed))
    if width is None:
        width = choose_bucket([natural_width(s, psf) for s in result.samples], config.width_buckets)
    elif width not in config.width_buckets:
        raise ContractError(f"width {width} is not one of the buckets {config.width_buckets}")
    return FakeBatch(rasterize_batch(result.samples, psf, width), result.log_probs, result, width)


# -- adversarial steps ---------------------------------------------------------------------

def d_adv_step(disc: Discriminator, optimizer, real_rasters, fake_rasters, config: TrainConfig,
               step: int | None = None) -> dict:
    """Supervised discriminator update with one-sided label smoothing."""
    if len(real_rasters) == 0 or len(fake_rasters) == 0:
        raise ContractError("discriminator step needs real and fake rasters")
    if real_rasters[0].shape != fake_rasters[0].shape:
        raise ContractError(f"real width {real_rasters[0].shape[0]} != fake width {fake_rasters[0].shape[0]}")
    return d_train_step(disc, optimizer, real_rasters, fake_rasters, config.label_smoothing, step)


def score_function_loss(rewards: torch.Tensor, log_probs: torch.Tensor, baseline: float) -> torch.Tensor:
    """Surrogate whose gradient is the centred likelihood-ratio estimate of -grad E[reward]."""
    return -((rewards - baseline) * log_probs).mean()


def normalize_gradients(params: Sequence[torch.Tensor]) -> float:
    """Rescale gradients in place to unit global norm; return the raw norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if norm > 0 and math.isfinite(norm):
        for g in grads:
            g.div_(norm)
    return norm


def global_grad_norm(params) -> float:
    return torch.sqrt(sum((p.grad.double() ** 2).sum() for p in params if p.grad is not None)).item()


def g_adv_step(gen: nn.Module, disc: Discriminator, optimizer, fake: FakeBatch, baseline: float | None,
               config: TrainConfig, step: int | None = None) -> tuple[dict, float]:
    """Policy-gradient generator update driven by the discriminator's genuineness score.

    Returns the metrics and the updated reward baseline.  A zero gradient (all
    rewards equal to the baseline) skips the optimizer step.
    """
    with torch.no_grad():
        disc.eval()
        rewards = disc(as_batch(fake.rasters).to(next(disc.parameters()).dtype)).double()
    if baseline is None:
        baseline = rewards.mean().item()
    offsets, lengths = pad_offsets(fake.result.offsets)
    text = None
    if gen.config.kind == "synthesis":
        text = text_batch(fake.result.texts, gen.config.vocab_size)

    gen.train()
    optimizer.zero_grad()
    log_probs = sequence_log_prob(gen, offsets, lengths, text)
    loss = score_function_loss(rewards.to(log_probs.dtype), log_probs, baseline)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("generator surrogate loss is not finite", step)
    loss.backward()
    params = list(gen.parameters())
    raw_norm = normalize_gradients(params)
    if not math.isfinite(raw_norm):
        raise TrainingDivergenceError("generator gradient is not finite", step)
    stepped = raw_norm > 0
    if stepped:
        optimizer.step()
    metrics = {
        "g_reward_mean": rewards.mean().item(),
        "g_grad_norm_raw": raw_norm,
        "g_grad_norm": global_grad_norm(params) if stepped else 0.0,
        "g_log_prob_mean": log_probs.mean().item(),
        "baseline": baseline,
    }
    m = config.baseline_momentum
    return metrics, m * baseline + (1 - m) * rewards.mean().item()


def text_batch(texts: Sequence[str], vocab_size: int) -> np.ndarray:
    enc = [encode_text(t) for t in texts]
    out = np.zeros((len(enc), max(1, max(len(e) for e in enc)), vocab_size), dtype=np.float32)
    for i, e in enumerate(enc):
        out[i, :len(e)] = e
    return out


# -- training state and checkpoints ---------------------------------------------------------

def _rng_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


@dataclass
class TrainingState:
    """Everything needed to continue training bit-identically."""
    config: TrainConfig
    gen_config: GeneratorConfig
    gen: nn.Module
    opt_g: torch.optim.Optimizer
    psf: PsfConfig = field(default_factory=PsfConfig)
    disc_config: DiscriminatorConfig | None = None
    disc: Discriminator | None = None
    opt_d: torch.optim.Optimizer | None = None
    step: int = 0
    baseline: float | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    phase: str = "pretrain"

    @property
    def gen_prefix(self) -> str:
        return "Gp" if self.gen_config.kind == "prediction" else "Gs"

    @classmethod
    def create(cls, config: TrainConfig, gen_config: GeneratorConfig, psf: PsfConfig = PsfConfig(),
               disc_config: DiscriminatorConfig | None = None) -> "TrainingState":
        gen = build_generator(gen_config, config.seed)
        opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=config.betas)
        state = cls(config, gen_config, gen, opt_g, psf, rng=np.random.default_rng(config.seed))
        if disc_config is not None:
            state.attach_discriminator(disc_config)
        return state

    def attach_discriminator(self, disc_config: DiscriminatorConfig) -> None:
        torch.manual_seed(self.config.seed + 1)
        self.disc_config = disc_config
        self.disc = Discriminator(disc_config)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=self.config.lr_d, betas=self.config.betas)

    def set_learning_rates(self) -> tuple[float, float]:
        lr_g = self.config.lr_at(self.config.lr_g, self.step)
        lr_d = self.config.lr_at(self.config.lr_d, self.step)
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        if self.opt_d is not None:
            for group in self.opt_d.param_groups:
                group["lr"] = lr_d
        return lr_g, lr_d

    def tensors(self) -> dict:
        out = ckpt.module_tensors(self.gen_prefix, self.gen)
        out.update(ckpt.optimizer_tensors(self.gen_prefix, self.gen, self.opt_g))
        if self.disc is not None:
            out.update(ckpt.module_tensors("D", self.disc))
            out.update(ckpt.optimizer_tensors("D", self.disc, self.opt_d))
        return out

    def meta(self) -> dict:
        return {
            "phase": self.phase,
            "step": self.step,
            "baseline": self.baseline,
            "train_config": self.config.to_dict(),
            "generator_config": self.gen_config.to_dict(),
            "discriminator_config": self.disc_config.to_dict() if self.disc_config else None,
            "psf_config": psf_config_to_dict(self.psf),
            "rng": _rng_to_json(self.rng),
            "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
        }

    def save(self, path) -> Path:
        return ckpt.save_checkpoint(path, self.tensors(), self.meta())

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainingState":
        tensors, meta = ckpt.load_checkpoint(path)
        try:
            saved = TrainConfig.from_dict(meta["train_config"])
            gen_config = GeneratorConfig.from_dict(meta["generator_config"])
            psf = psf_config_from_dict(meta["psf_config"])
            disc_config = meta.get("discriminator_config")
        except (KeyError, TypeError) as exc:
            raise CorruptCheckpointError(f"checkpoint metadata incomplete: {exc}") from exc
        config = config or saved
        gen = build_generator(gen_config)
        opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=config.betas)
        state = cls(config, gen_config, gen, opt_g, psf, step=int(meta["step"]), baseline=meta.get("baseline"),
                    rng=_rng_from_json(meta["rng"]), phase=meta.get("phase", "pretrain"))
        ckpt.load_module(state.gen_prefix, gen, tensors)
        ckpt.load_optimizer(state.gen_prefix, gen, opt_g, tensors)
        if disc_config is not None:
            state.disc_config = DiscriminatorConfig.from_dict(disc_config)
            state.disc = Discriminator(state.disc_config)
            state.opt_d = torch.optim.Adam(state.disc.parameters(), lr=config.lr_d, betas=config.betas)
            ckpt.load_module("D", state.disc, tensors)
            ckpt.load_optimizer("D", state.disc, state.opt_d, tensors)
        if "torch_rng" in meta:
            raw = np.frombuffer(base64.b64decode(meta["torch_rng"]), dtype=np.uint8).copy()
            torch.set_rng_state(torch.from_numpy(raw))
        return state


# -- loops -------------------------------------------------------------------------------------

def _append_jsonl(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def pretrain_loop(state: TrainingState, samples: Sequence[HandwritingSample], steps: int,
                  out_dir: Path | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Teacher-forced maximum-likelihood training for ``steps`` more steps.

    Batch order depends only on (seed, step), so resumed runs see the same batches.
    """
    cfg = state.config
    if state.gen_config.kind == "synthesis":
        samples = [s for s in samples if s.text]
    if not samples:
        raise ContractError("no training samples")
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    scale = state.gen_config.offset_scale
    history = []
    log_path = Path(out_dir) / "metrics.jsonl" if out_dir is not None else None
    end = state.step + steps
    while state.step < end:
        epoch, index = divmod(state.step, per_epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        chosen = [samples[i] for i in order[index * cfg.batch_size:(index + 1) * cfg.batch_size]]
        lr_g, _ = state.set_learning_rates()
        metrics = pretrain_step(state.gen, state.opt_g, collate(chosen, cfg.max_len, scale), state.step, cfg.clip_norm)
        record = {"step": state.step, "nll": metrics["nll"], "lr_g": lr_g}
        history.append(record)
        _append_jsonl(log_path, record)
        if callback:
            callback(record)
        state.step += 1
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            state.save(Path(out_dir) / f"step{state.step:07d}.hwgn")
    return history


LOG_KEYS = ("step", "d_loss", "g_reward_mean", "d_acc_real", "d_acc_fake", "lr_g", "lr_d")


def gan_iteration(state: TrainingState, samples: Sequence[HandwritingSample]) -> tuple[dict, FakeBatch]:
    cfg = state.config
    lr_g, lr_d = state.set_learning_rates()
    n = min(cfg.batch_size, len(samples))
    metrics: dict = {"step": state.step, "lr_g": lr_g, "lr_d": lr_d}
    fake = None
    for _ in range(cfg.d_steps):
        real = [samples[i] for i in np.sort(state.rng.choice(len(samples), n, replace=False))]
        width = choose_bucket([natural_width(s, state.psf) for s in real], cfg.width_buckets)
        real_rasters = rasterize_batch(real, state.psf, width)
        texts = [s.text for s in real] if state.gen_config.kind == "synthesis" else None
        fake = make_fake_batch(state.gen, cfg, state.psf, n, texts, width, state.rng)
        metrics.update(d_adv_step(state.disc, state.opt_d, real_rasters, fake.rasters, cfg, state.step))
    for _ in range(cfg.g_steps):
        g_metrics, state.baseline = g_adv_step(state.gen, state.disc, state.opt_g, fake, state.baseline,
                                               cfg, state.step)
        metrics.update(g_metrics)
    return metrics, fake


def gan_loop(state: TrainingState, samples: Sequence[HandwritingSample], steps: int,
             out_dir: Path | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Alternate one discriminator step and one generator step per iteration."""
    if state.disc is None:
        raise ContractError("adversarial training needs a discriminator")
    if state.gen_config.kind == "synthesis":
        samples = [s for s in samples if s.text]
    if not samples:
        raise ContractError("no real samples")
    state.phase = "gan"
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "metrics.jsonl" if out_dir is not None else None
    history = []
    end = state.step + steps
    while state.step < end:
        try:
            metrics, fake = gan_iteration(state, samples)
        except TrainingDivergenceError:
            if out_dir is not None:
                state.save(out_dir / "diverged.hwgn")
            raise
        history.append(metrics)
        _append_jsonl(log_path, {k: metrics[k] for k in LOG_KEYS})
        if callback:
            callback(metrics)
        state.step += 1
        if out_dir is not None:
            if state.config.sample_every and state.step % state.config.sample_every == 0:
                write_samples(out_dir / f"samples_step{state.step:07d}.jsonl", fake.result.samples)
            if state.config.checkpoint_every and state.step % state.config.checkpoint_every == 0:
                state.save(out_dir / f"step{state.step:07d}.hwgn")
    return history
