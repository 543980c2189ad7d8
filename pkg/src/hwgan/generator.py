"""Recurrent stroke generators: unconditioned prediction and text-conditioned synthesis."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import VOCAB, Batch, encode_text
from .errors import ContractError, InvalidConfigError, TrainingDivergenceError
from .ink import HandwritingSample, from_offsets
from .mdn import MdnParams, mdn_log_prob, mdn_split, output_size, sample_next

START_POINT = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "prediction"
    hidden: tuple[int, ...] = (512, 256, 512)
    mixtures: int = 20
    window: int = 5
    vocab_size: int = len(VOCAB)
    offset_scale: float = 1.0

    def __post_init__(self):
        expected = {"prediction": 3, "synthesis": 2}
        if self.kind not in expected:
            raise InvalidConfigError(f"unknown generator kind {self.kind!r}")
        if len(self.hidden) != expected[self.kind]:
            raise InvalidConfigError(f"{self.kind} generator needs {expected[self.kind]} hidden sizes")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def prediction(cls, **kw) -> "GeneratorConfig":
        return cls(kind="prediction", **kw)

    @classmethod
    def synthesis(cls, hidden=(512, 512), **kw) -> "GeneratorConfig":
        return cls(kind="synthesis", hidden=hidden, **kw)

    @property
    def output_size(self) -> int:
        return output_size(self.mixtures)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**{**d, "hidden": tuple(d["hidden"])})


class PredictionNet(nn.Module):
    """Three stacked LSTMs with input skip connections; the head reads all hidden layers."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        h1, h2, h3 = config.hidden
        self.lstm1 = nn.LSTM(3, h1, batch_first=True)
        self.lstm2 = nn.LSTM(3 + h1, h2, batch_first=True)
        self.lstm3 = nn.LSTM(3 + h2, h3, batch_first=True)
        self.fc = nn.Linear(h1 + h2 + h3, config.output_size)

    def forward(self, x: torch.Tensor, state=None, text=None):
        s1, s2, s3 = state if state is not None else (None, None, None)
        o1, s1 = self.lstm1(x, s1)
        o2, s2 = self.lstm2(torch.cat([o1, x], -1), s2)
        o3, s3 = self.lstm3(torch.cat([o2, x], -1), s3)
        return self.fc(torch.cat([o1, o2, o3], -1)), (s1, s2, s3)


class SynthesisState(NamedTuple):
    h1: torch.Tensor
    c1: torch.Tensor
    lstm2: tuple[torch.Tensor, torch.Tensor] | None
    kappa: torch.Tensor    # (B, K)
    window: torch.Tensor   # (B, vocab)
    text_len: int


def gaussian_window(alpha: torch.Tensor, beta: torch.Tensor, kappa: torch.Tensor, text: torch.Tensor):
    """Soft attention over character positions 1..U.

    ``alpha``, ``beta``, ``kappa`` are ``(B, K)``; ``text`` is ``(B, U, V)``.
    Returns the window vector ``(B, V)`` and weights ``phi`` ``(B, U)``.
    """
    u = torch.arange(1, text.shape[1] + 1, dtype=kappa.dtype, device=kappa.device)
    phi = (alpha[..., None] * torch.exp(-beta[..., None] * (kappa[..., None] - u) ** 2)).sum(1)
    return torch.bmm(phi[:, None, :], text).squeeze(1), phi


class SynthesisNet(nn.Module):
    """Two LSTMs conditioned on text through a Gaussian window over the one-hot string."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig.synthesis()):
        super().__init__()
        self.config = config
        h1, h2 = config.hidden
        v, k = config.vocab_size, config.window
        self.lstm1 = nn.LSTMCell(3 + v, h1)
        self.fc1 = nn.Linear(h1, 3 * k)
        self.lstm2 = nn.LSTM(3 + h1 + v, h2, batch_first=True)
        self.fc2 = nn.Linear(h2, config.output_size)

    def initial_state(self, text: torch.Tensor) -> SynthesisState:
        b = text.shape[0]
        ref = self.fc1.weight
        h1 = ref.new_zeros(b, self.config.hidden[0])
        return SynthesisState(h1, h1.clone(), None, ref.new_zeros(b, self.config.window),
                              ref.new_zeros(b, self.config.vocab_size), text.shape[1])

    def window_step(self, h1: torch.Tensor, kappa: torch.Tensor, text: torch.Tensor):
        """Advance the window given the first layer's hidden state; returns (w, kappa, phi)."""
        if text.shape[1] == 0:
            raise ContractError("synthesis needs a non-empty text")
        a_hat, b_hat, k_hat = self.fc1(h1).chunk(3, dim=-1)
        kappa = kappa + torch.exp(k_hat)
        w, phi = gaussian_window(torch.exp(a_hat), torch.exp(b_hat), kappa, text)
        return w, kappa, phi

    def forward(self, x: torch.Tensor, state: SynthesisState | None = None, text: torch.Tensor | None = None):
        if text is None:
            raise ContractError("synthesis generator needs a text encoding")
        text = text.to(x.dtype)
        if state is None:
            state = self.initial_state(text)
        elif state.text_len != text.shape[1] or state.kappa.shape[0] != text.shape[0]:
            raise ContractError(f"window state built for text length {state.text_len}, got {text.shape[1]}")
        h1, c1, kappa, w = state.h1, state.c1, state.kappa, state.window
        hs, ws = [], []
        for t in range(x.shape[1]):
            h1, c1 = self.lstm1(torch.cat([x[:, t], w], -1), (h1, c1))
            w, kappa, _ = self.window_step(h1, kappa, text)
            hs.append(h1)
            ws.append(w)
        h1_seq, w_seq = torch.stack(hs, 1), torch.stack(ws, 1)
        o2, s2 = self.lstm2(torch.cat([x, h1_seq, w_seq], -1), state.lstm2)
        return self.fc2(o2), SynthesisState(h1, c1, s2, kappa, w, text.shape[1])


def build_generator(config: GeneratorConfig, seed: int | None = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return PredictionNet(config) if config.kind == "prediction" else SynthesisNet(config)


def _as_step_input(x, ref: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=ref.dtype)
    return x.reshape(-1, 1, 3)


def gp_forward(net: PredictionNet, x, state=None) -> tuple[MdnParams, tuple]:
    """One prediction step from point(s) ``x`` of shape ``(3,)`` or ``(B, 3)``."""
    raw, state = net(_as_step_input(x, net.fc.weight), state)
    return mdn_split(raw[:, 0], net.config.mixtures), state


def gs_forward(net: SynthesisNet, x, text, state: SynthesisState | None = None):
    """One synthesis step; ``text`` is a ``(U, V)`` or ``(B, U, V)`` one-hot encoding."""
    text = torch.as_tensor(np.asarray(text), dtype=net.fc2.weight.dtype)
    if text.dim() == 2:
        text = text[None]
    raw, state = net(_as_step_input(x, net.fc2.weight), state, text)
    return mdn_split(raw[:, 0], net.config.mixtures), state


# -- likelihood -------------------------------------------------------------------

def teacher_inputs(targets: torch.Tensor) -> torch.Tensor:
    start = targets.new_tensor(START_POINT).expand(targets.shape[0], 1, 3)
    return torch.cat([start, targets[:, :-1]], 1)


def length_mask(lengths, steps: int, like: torch.Tensor) -> torch.Tensor:
    lengths = torch.as_tensor(np.asarray(lengths), device=like.device)
    return (torch.arange(steps, device=like.device)[None, :] < lengths[:, None]).to(like.dtype)


def sequence_log_prob(net: nn.Module, targets, lengths, text=None) -> torch.Tensor:
    """Teacher-forced ``sum_t log p(target_t | target_<t)`` per sequence, shape ``(B,)``."""
    ref = next(net.parameters())
    targets = torch.as_tensor(np.asarray(targets) if not isinstance(targets, torch.Tensor) else targets,
                              dtype=ref.dtype)
    if text is not None:
        text = torch.as_tensor(np.asarray(text) if not isinstance(text, torch.Tensor) else text, dtype=ref.dtype)
    raw, _ = net(teacher_inputs(targets), None, text)
    lp = mdn_log_prob(mdn_split(raw, net.config.mixtures), targets)
    return (lp * length_mask(lengths, targets.shape[1], lp)).sum(1)


def batch_nll(net: nn.Module, batch: Batch) -> torch.Tensor:
    """Mean per-point negative log-likelihood of a batch."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    text = batch.text if net.config.kind == "synthesis" else None
    if net.config.kind == "synthesis" and text is None:
        raise ContractError("synthesis pretraining needs transcriptions")
    lp = sequence_log_prob(net, batch.offsets, batch.lengths, text)
    return -lp.sum() / float(np.sum(batch.lengths))


def pretrain_step(net: nn.Module, optimizer: torch.optim.Optimizer, batch: Batch,
                  step: int | None = None, clip_norm: float | None = None) -> dict:
    net.train()
    optimizer.zero_grad()
    loss = batch_nll(net, batch)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("pretraining NLL is not finite", step)
    loss.backward()
    if clip_norm is not None:
        nn.utils.clip_grad_norm_(net.parameters(), clip_norm)
    optimizer.step()
    return {"nll": loss.item()}


# -- sampling ------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    bias: float = 0.0
    seed: int = 0
    max_points: int = 700
    points_per_char: int = 25

    def __post_init__(self):
        if self.bias < 0:
            raise InvalidConfigError(f"sampling bias must be >= 0, got {self.bias}")


@dataclass
class SampleResult:
    offsets: list[np.ndarray]          # sampled (dx, dy, eos) rows, model units
    log_probs: np.ndarray              # unbiased log-likelihood of each sequence
    samples: list[HandwritingSample] = field(default_factory=list)
    texts: list[str] | None = None


def sample_batch(net: nn.Module, count: int, config: SamplerConfig = SamplerConfig(),
                 texts: Sequence[str] | None = None, rng: np.random.Generator | None = None) -> SampleResult:
    """Autoregressively sample ``count`` sequences starting from the pen-up origin point.

    Synthesis stops per sequence at ``points_per_char * len(text)`` points or once
    the furthest window component has moved past ``len(text) + 1``.  Log-probabilities
    always use the unbiased distribution.
    """
    synthesis = net.config.kind == "synthesis"
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ref = next(net.parameters())
    text = None
    if synthesis:
        if texts is None or len(texts) != count or any(len(t) == 0 for t in texts):
            raise ContractError("synthesis sampling needs one non-empty text per sample")
        enc = [encode_text(t) for t in texts]
        lens = np.array([len(e) for e in enc])
        text = torch.zeros(count, lens.max(), net.config.vocab_size, dtype=ref.dtype)
        for i, e in enumerate(enc):
            text[i, :len(e)] = torch.as_tensor(e)
        caps = lens * config.points_per_char
    else:
        caps = np.full(count, config.max_points)

    was_training = net.training
    net.eval()
    x = ref.new_tensor(START_POINT).expand(count, 1, 3).contiguous()
    state = None
    points = np.zeros((count, int(caps.max()), 3))
    lengths = np.zeros(count, dtype=np.int64)
    log_probs = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    with torch.no_grad():
        for t in range(int(caps.max())):
            raw, state = net(x, state, text)
            raw = raw[:, 0]
            unbiased = mdn_split(raw, net.config.mixtures)
            drawn = sample_next(mdn_split(raw, net.config.mixtures, config.bias) if config.bias else unbiased, rng)
            if not np.all(np.isfinite(drawn[alive])):
                net.train(was_training)
                raise TrainingDivergenceError(f"generator produced non-finite points at sampling step {t}")
            lp = mdn_log_prob(unbiased, torch.as_tensor(drawn, dtype=ref.dtype)).double().numpy()
            points[alive, t] = drawn[alive]
            log_probs[alive] += lp[alive]
            lengths[alive] += 1
            alive &= (t + 1) < caps
            if synthesis:
                past_end = state.kappa.max(1).values.double().numpy() > lens + 1
                alive &= ~past_end
            if not alive.any():
                break
            x = torch.as_tensor(drawn, dtype=ref.dtype)[:, None, :]
    net.train(was_training)

    offsets = [points[i, :lengths[i]] for i in range(count)]
    scale = np.array([net.config.offset_scale, net.config.offset_scale, 1.0])
    text_list = list(texts) if synthesis else None
    samples = [from_offsets(o * scale, text=text_list[i] if synthesis else None) for i, o in enumerate(offsets)]
    return SampleResult(offsets, log_probs, samples, text_list)


def sample_sequence(net: nn.Module, config: SamplerConfig = SamplerConfig(), text: str | None = None,
                    rng: np.random.Generator | None = None) -> tuple[HandwritingSample, float]:
    result = sample_batch(net, 1, config, [text] if text is not None else None, rng)
    return result.samples[0], float(result.log_probs[0])


def pad_offsets(offsets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(o) for o in offsets], dtype=np.int64)
    out = np.zeros((len(offsets), lengths.max(), 3), dtype=np.float32)
    for i, o in enumerate(offsets):
        out[i, :len(o)] = o
    return out, lengths
