"""Mixture-density output head: bivariate Gaussian mixture plus a Bernoulli pen flag.

Raw output layout (length ``1 + 6M``)::

    [eos_hat | pi_hat (M) | mu_x (M) | mu_y (M) | sigma_hat_x (M) | sigma_hat_y (M) | rho_hat (M)]
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidConfigError, ShapeError

RHO_LIMIT = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def output_size(mixtures: int) -> int:
    return 1 + 6 * mixtures


class MdnParams(NamedTuple):
    eos_logit: torch.Tensor   # (...)
    log_pi: torch.Tensor      # (..., M)
    mu: torch.Tensor          # (..., M, 2)
    log_sigma: torch.Tensor   # (..., M, 2)
    rho: torch.Tensor         # (..., M)

    @property
    def e(self) -> torch.Tensor:
        return torch.sigmoid(self.eos_logit)

    @property
    def pi(self) -> torch.Tensor:
        return self.log_pi.exp()

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    @property
    def mixtures(self) -> int:
        return self.log_pi.shape[-1]


def mdn_split(raw: torch.Tensor, mixtures: int | None = None, bias: float = 0.0) -> MdnParams:
    """Squash a raw output vector into mixture parameters.

    ``bias`` sharpens the distribution: sigma = exp(sigma_hat - bias) and
    pi = softmax(pi_hat * (1 + bias)).  ``bias=0`` is the plain split.
    """
    raw = torch.as_tensor(raw)
    size = raw.shape[-1]
    if mixtures is None:
        mixtures, rem = divmod(size - 1, 6)
        if rem or mixtures < 1:
            raise ShapeError(f"raw output length {size} is not 1 + 6M")
    elif size != output_size(mixtures):
        raise ShapeError(f"raw output length {size} != 1 + 6*{mixtures}")
    m = mixtures
    pi_hat = raw[..., 1:1 + m]
    mu = torch.stack([raw[..., 1 + m:1 + 2 * m], raw[..., 1 + 2 * m:1 + 3 * m]], dim=-1)
    log_sigma = torch.stack([raw[..., 1 + 3 * m:1 + 4 * m], raw[..., 1 + 4 * m:1 + 5 * m]], dim=-1)
    rho = torch.tanh(raw[..., 1 + 5 * m:1 + 6 * m]).clamp(-RHO_LIMIT, RHO_LIMIT)
    if bias:
        pi_hat = pi_hat * (1.0 + bias)
        log_sigma = log_sigma - bias
    return MdnParams(raw[..., 0], F.log_softmax(pi_hat, dim=-1), mu, log_sigma, rho)


def apply_bias(raw: torch.Tensor, bias: float, mixtures: int | None = None) -> MdnParams:
    if bias < 0:
        raise InvalidConfigError(f"sampling bias must be >= 0, got {bias}")
    return mdn_split(raw, mixtures, bias)


def gaussian_log_density(params: MdnParams, dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    """Per-component log N(dx, dy | mu, sigma, rho), shape (..., M)."""
    zx = (dx.unsqueeze(-1) - params.mu[..., 0]) / params.log_sigma[..., 0].exp()
    zy = (dy.unsqueeze(-1) - params.mu[..., 1]) / params.log_sigma[..., 1].exp()
    one_minus_r2 = 1.0 - params.rho ** 2
    z = zx ** 2 + zy ** 2 - 2.0 * params.rho * zx * zy
    return (-z / (2.0 * one_minus_r2) - LOG_2PI - params.log_sigma.sum(-1)
            - 0.5 * torch.log(one_minus_r2))


def mdn_log_prob(params: MdnParams, target: torch.Tensor) -> torch.Tensor:
    """log p(target) for ``(..., 3)`` targets ``(dx, dy, eos)``, computed in log space."""
    target = torch.as_tensor(target, dtype=params.mu.dtype)
    dx, dy, eos = target[..., 0], target[..., 1], target[..., 2]
    mix = torch.logsumexp(params.log_pi + gaussian_log_density(params, dx, dy), dim=-1)
    bern = torch.where(eos > 0.5, F.logsigmoid(params.eos_logit), F.logsigmoid(-params.eos_logit))
    return mix + bern


def mdn_nll(params: MdnParams, target: torch.Tensor) -> torch.Tensor:
    return -mdn_log_prob(params, target)


def sample_next(params: MdnParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``(dx, dy, eos)`` for every leading index of ``params``.

    Randomness comes only from ``rng``: per row one uniform for the component,
    two standard normals, one uniform for the pen flag.
    """
    pi = params.pi.detach().double().cpu().numpy()
    mu = params.mu.detach().double().cpu().numpy()
    sigma = params.sigma.detach().double().cpu().numpy()
    rho = params.rho.detach().double().cpu().numpy()
    e = params.e.detach().double().cpu().numpy()
    lead = pi.shape[:-1]
    m = pi.shape[-1]
    pi, mu, sigma, rho, e = (pi.reshape(-1, m), mu.reshape(-1, m, 2), sigma.reshape(-1, m, 2),
                             rho.reshape(-1, m), e.reshape(-1))
    n = len(pi)
    u = rng.random(n)
    z = rng.standard_normal((n, 2))
    u_eos = rng.random(n)
    j = np.minimum((np.cumsum(pi, axis=1) < u[:, None]).sum(axis=1), m - 1)
    rows = np.arange(n)
    mx, my = mu[rows, j, 0], mu[rows, j, 1]
    sx, sy = sigma[rows, j, 0], sigma[rows, j, 1]
    r = rho[rows, j]
    out = np.empty((n, 3))
    out[:, 0] = mx + sx * z[:, 0]
    out[:, 1] = my + sy * (r * z[:, 0] + np.sqrt(1.0 - r * r) * z[:, 1])
    out[:, 2] = (u_eos < e).astype(np.float64)
    return out.reshape(*lead, 3)
