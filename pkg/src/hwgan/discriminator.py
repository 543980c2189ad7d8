"""CNN-LSTM real/fake classifier over PSF rasters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ShapeError, TrainingDivergenceError


def _default_layers():
    # ("conv", out_channels, (stride_h, stride_w)) or ("pool",)
    return (
        ("conv", 32, (1, 1)), ("pool",),
        ("conv", 64, (1, 1)), ("pool",),
        ("conv", 128, (1, 1)),
        ("conv", 256, (2, 1)), ("pool",),
        ("conv", 128, (2, 1)),
        ("conv", 256, (2, 1)), ("pool",),
    )


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 7
    height: int = 128
    layers: tuple = field(default_factory=_default_layers)
    lstm_hidden: int = 256
    fc_hidden: int = 128

    @property
    def width_divisor(self) -> int:
        return 2 ** sum(1 for layer in self.layers if layer[0] == "pool")

    @property
    def feature_size(self) -> int:
        return [layer[1] for layer in self.layers if layer[0] == "conv"][-1]

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "height": self.height,
                "layers": [list(layer) for layer in self.layers],
                "lstm_hidden": self.lstm_hidden, "fc_hidden": self.fc_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        layers = tuple(
            ("conv", int(layer[1]), tuple(layer[2])) if layer[0] == "conv" else ("pool",)
            for layer in d["layers"]
        )
        return cls(d["in_channels"], d["height"], layers, d["lstm_hidden"], d["fc_hidden"])


class Discriminator(nn.Module):
    """Conv/AvgPool stack, then an LSTM reading encoded columns left to right.

    Inputs are rasters shaped ``(B, W, H, C)`` (the PSF raster layout); they are
    permuted to NCHW internally.
    """

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        blocks = []
        channels, height = config.in_channels, config.height
        for layer in config.layers:
            if layer[0] == "conv":
                _, out, stride = layer
                blocks += [nn.Conv2d(channels, out, 3, stride=stride, padding=1), nn.ReLU()]
                channels = out
                height = (height - 1) // stride[0] + 1
            else:
                blocks.append(nn.AvgPool2d(2, 2))
                height //= 2
        if height != 1:
            raise ContractError(f"conv stack leaves height {height}, expected 1")
        self.cnn = nn.Sequential(*blocks)
        self.lstm = nn.LSTM(channels, config.lstm_hidden, batch_first=True)
        self.fc1 = nn.Linear(config.lstm_hidden, config.fc_hidden)
        self.fc2 = nn.Linear(config.fc_hidden, 1)

    def _check(self, x: torch.Tensor):
        cfg = self.config
        if x.dim() != 4 or x.shape[2] != cfg.height or x.shape[3] != cfg.in_channels:
            raise ShapeError(f"expected rasters (B, W, {cfg.height}, {cfg.in_channels}), got {tuple(x.shape)}")
        if x.shape[1] == 0 or x.shape[1] % cfg.width_divisor:
            raise ShapeError(f"raster width {x.shape[1]} is not a positive multiple of {cfg.width_divisor}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, W, H, C)`` rasters to ``(B, W/divisor, features)`` column sequences."""
        self._check(x)
        fmap = self.cnn(x.permute(0, 3, 2, 1))  # (B, F, 1, W/d)
        return fmap.squeeze(2).transpose(1, 2)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        seq = self.encode(x)
        _, (h, _) = self.lstm(seq)
        return self.fc2(F.relu(self.fc1(h[-1]))).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def as_batch(rasters, dtype=torch.float32) -> torch.Tensor:
    """Stack a list of ``(W, H, C)`` numpy rasters into a tensor; all widths must agree."""
    if isinstance(rasters, torch.Tensor):
        return rasters.to(dtype)
    if len(rasters) == 0:
        raise ContractError("empty raster batch")
    widths = {r.shape[0] for r in rasters}
    if len(widths) != 1:
        raise ContractError(f"rasters in one batch must share a width, got {sorted(widths)}")
    return torch.as_tensor(np.stack(rasters), dtype=dtype)


def cnn_encode(model: Discriminator, raster) -> torch.Tensor:
    """Encode one raster to its ``(W/16, 256)`` column matrix."""
    x = torch.as_tensor(np.asarray(raster), dtype=next(model.parameters()).dtype)[None]
    with torch.no_grad():
        return model.encode(x)[0]


def d_forward(model: Discriminator, raster) -> float:
    x = torch.as_tensor(np.asarray(raster), dtype=next(model.parameters()).dtype)[None]
    with torch.no_grad():
        return float(model(x)[0])


def smoothed_targets(labels, smoothing: float) -> torch.Tensor:
    """One-sided smoothing: real labels become ``1 - smoothing``, fake labels stay 0."""
    if not 0.0 <= smoothing < 0.5:
        raise ContractError(f"label smoothing must lie in [0, 0.5), got {smoothing}")
    labels = torch.as_tensor(labels, dtype=torch.float64)
    return labels * (1.0 - smoothing)


def d_loss(probabilities, labels, smoothing: float = 0.0) -> torch.Tensor:
    """Mean binary cross entropy against one-sided smoothed targets."""
    p = probabilities if isinstance(probabilities, torch.Tensor) else \
        torch.as_tensor(probabilities, dtype=torch.float64)
    y = smoothed_targets(labels, smoothing).to(p.dtype)
    if p.shape != y.shape:
        raise ContractError(f"{p.numel()} probabilities vs {y.numel()} labels")
    if torch.any((p <= 0) | (p >= 1)) or torch.any(torch.isnan(p)):
        raise ContractError("probabilities must lie strictly inside (0, 1)")
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def d_loss_logits(logits: torch.Tensor, labels, smoothing: float = 0.0) -> torch.Tensor:
    """Same loss as :func:`d_loss`, computed from logits for float32 stability."""
    y = smoothed_targets(labels, smoothing).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, y)


def d_train_step(model: Discriminator, optimizer: torch.optim.Optimizer, real, fake,
                 smoothing: float = 0.0, step: int | None = None) -> dict:
    """One optimizer step on the concatenated real+fake batch."""
    real, fake = as_batch(real), as_batch(fake)
    if len(real) == 0 or len(fake) == 0:
        raise ContractError("d_train_step needs non-empty real and fake batches")
    if real.shape[1:] != fake.shape[1:]:
        raise ContractError(f"real width {real.shape[1]} does not match fake width {fake.shape[1]}")
    dtype = next(model.parameters()).dtype
    x = torch.cat([real, fake]).to(dtype)
    labels = torch.cat([torch.ones(len(real)), torch.zeros(len(fake))])
    model.train()
    optimizer.zero_grad()
    logits = model.logits(x)
    loss = d_loss_logits(logits, labels, smoothing)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("discriminator loss is not finite", step)
    loss.backward()
    optimizer.step()
    with torch.no_grad():
        pred = logits.detach() > 0
        acc_real = pred[:len(real)].float().mean().item()
        acc_fake = (~pred[len(real):]).float().mean().item()
    return {
        "d_loss": loss.item(),
        "d_acc": (acc_real * len(real) + acc_fake * len(fake)) / len(x),
        "d_acc_real": acc_real,
        "d_acc_fake": acc_fake,
    }


def accuracy(model: Discriminator, real, fake) -> float:
    with torch.no_grad():
        p_real = model(as_batch(real).to(next(model.parameters()).dtype))
        p_fake = model(as_batch(fake).to(next(model.parameters()).dtype))
    correct = (p_real > 0.5).sum().item() + (p_fake <= 0.5).sum().item()
    return correct / (len(p_real) + len(p_fake))

