"""Shallow feature uncertainty modeling.

Per-instance channel statistics of a feature map are perturbed with noise
drawn from their batch-level spread (Gaussian) plus a signed, scaled Poisson
burst term, and the features are re-standardized onto the new statistics.

Random draws always come from an explicit ``torch.Generator``. For one call of
:func:`sample_perturbed_stats` the draw order is fixed:

1. ``randn(B, C)`` for the mean branch
2. ``poisson(rate_mean)`` for the mean branch (only if the mode uses Poisson)
3. ``randn(B, C)`` for the std branch
4. ``poisson(rate_std)`` for the std branch (only if the mode uses Poisson)

:func:`sufm_forward` draws one ``rand(1)`` for the apply gate before those.
"""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

NOISE_MODES = ("gaussian", "poisson", "united")
SAMPLING_MODES = ("reparameterized", "literal")


class InvalidInputError(ValueError):
    pass


class SufmConfigError(ValueError):
    pass


@dataclass
class SufmConfig:
    noise_mode: str = "united"
    sampling_mode: str = "reparameterized"
    apply_probability: float = 0.5
    gamma_floor: float = 1e-4
    epsilon_std: float = 1e-6
    poisson_scale: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.noise_mode not in NOISE_MODES:
            raise SufmConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise SufmConfigError(
                f"sampling_mode must be one of {SAMPLING_MODES}, got {self.sampling_mode!r}"
            )
        if not 0.0 <= self.apply_probability <= 1.0:
            raise SufmConfigError(f"apply_probability must lie in [0, 1], got {self.apply_probability}")
        if self.gamma_floor <= 0:
            raise SufmConfigError("gamma_floor must be > 0")
        if self.epsilon_std <= 0:
            raise SufmConfigError("epsilon_std must be > 0")
        if self.poisson_scale < 0:
            raise SufmConfigError("poisson_scale must be >= 0")


class FeatureStatistics(NamedTuple):
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C)


class UncertaintyEstimate(NamedTuple):
    sigma_mu: torch.Tensor  # (C,)
    sigma_sigma: torch.Tensor  # (C,)


class PerturbedStatistics(NamedTuple):
    beta: torch.Tensor  # (B, C)
    gamma: torch.Tensor  # (B, C)


def _check_feature_map(f):
    if f.dim() != 4:
        raise InvalidInputError(f"expected a (B, C, H, W) feature map, got shape {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise InvalidInputError("feature map contains non-finite values")


def instance_channel_stats(f, epsilon_std=1e-6):
    """Mean and std of every (instance, channel) plane, reduced over H and W.

    The std uses the population variance and is stabilized as
    ``sqrt(var + epsilon_std**2)`` so it is never zero.
    """
    _check_feature_map(f)
    mean = f.mean(dim=(2, 3))
    var = ((f - mean[:, :, None, None]) ** 2).mean(dim=(2, 3))
    std = torch.sqrt(var + epsilon_std**2)
    return FeatureStatistics(mean, std)


def uncertainty_estimates(stats):
    """Batch standard deviation (1/B normalization) of the mean and std statistics."""
    mean, std = stats
    if mean.shape != std.shape or mean.dim() != 2:
        raise InvalidInputError(
            f"mean/std must both be (B, C); got {tuple(mean.shape)} and {tuple(std.shape)}"
        )
    return UncertaintyEstimate(_batch_std(mean), _batch_std(std))


def _batch_std(x):
    # Shifting by the first instance keeps identical instances exactly zero.
    d = x - x[:1]
    var = ((d - d.mean(dim=0, keepdim=True)) ** 2).mean(dim=0)
    # zero variance gets a zero gradient instead of sqrt's infinite slope
    safe = torch.sqrt(var.clamp_min(torch.finfo(var.dtype).tiny))
    return torch.where(var > 0, safe, torch.zeros_like(var))


def _perturb_branch(center, spread, cfg, generator):
    eps = torch.randn(center.shape, generator=generator, dtype=center.dtype, device=center.device)
    # The sampled statistic mean + eps*spread is the Gaussian draw N(center, spread^2).
    sampled = center + eps * spread
    if cfg.sampling_mode == "reparameterized":
        gaussian_term = eps * spread
    else:
        gaussian_term = sampled * spread

    out = center
    if cfg.noise_mode in ("gaussian", "united"):
        out = out + gaussian_term
    if cfg.noise_mode in ("poisson", "united"):
        rate_source = sampled.detach()
        k = torch.poisson(rate_source.abs(), generator=generator)
        out = out + torch.sign(rate_source) * cfg.poisson_scale * k
    return out


def sample_perturbed_stats(stats, unc, cfg, generator):
    """Draw new statistics (beta, gamma) around the observed ones.

    Gaussian and Poisson draws are constants of the forward pass; gradients
    only flow through ``stats`` and ``unc``.
    """
    if cfg.noise_mode not in NOISE_MODES:
        raise SufmConfigError(f"noise_mode must be one of {NOISE_MODES}, got {cfg.noise_mode!r}")
    if cfg.sampling_mode not in SAMPLING_MODES:
        raise SufmConfigError(f"unknown sampling_mode {cfg.sampling_mode!r}")
    mean, std = stats
    if unc.sigma_mu.shape != mean.shape[1:] or unc.sigma_sigma.shape != std.shape[1:]:
        raise InvalidInputError("uncertainty shape does not match statistics channels")

    beta = _perturb_branch(mean, unc.sigma_mu[None, :], cfg, generator)
    gamma = _perturb_branch(std, unc.sigma_sigma[None, :], cfg, generator)
    gamma = torch.clamp(gamma, min=cfg.gamma_floor)
    return PerturbedStatistics(beta, gamma)


def perturb_features(f, stats, pert):
    """Re-standardize ``f`` from its own statistics onto (beta, gamma)."""
    mean, std = stats
    beta, gamma = pert
    if mean.shape != f.shape[:2] or beta.shape != f.shape[:2]:
        raise InvalidInputError("statistics do not match the feature map's (B, C)")
    normed = (f - mean[:, :, None, None]) / std[:, :, None, None]
    return normed * gamma[:, :, None, None] + beta[:, :, None, None]


def sufm_forward(f, cfg, generator, training):
    if not training:
        return f
    if cfg.apply_probability <= 0.0:
        return f
    gate = torch.rand(1, generator=generator).item()
    if gate >= cfg.apply_probability:
        return f
    stats = instance_channel_stats(f, cfg.epsilon_std)
    unc = uncertainty_estimates(stats)
    pert = sample_perturbed_stats(stats, unc, cfg, generator)
    return perturb_features(f, stats, pert)


class SUFM(nn.Module):
    """Module wrapper around :func:`sufm_forward` owning its own generator."""

    def __init__(self, cfg=None, generator=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else SufmConfig()
        if generator is None:
            generator = torch.Generator().manual_seed(self.cfg.rng_seed)
        self.generator = generator

    def forward(self, x):
        return sufm_forward(x, self.cfg, self.generator, self.training)

    def extra_repr(self):
        return f"noise_mode={self.cfg.noise_mode}, p={self.cfg.apply_probability}"
