"""Training objectives: decomposition loss, cross-road loss and the final demorphing loss.

All functions accept single images ``(C, H, W)`` or batches ``(N, C, H, W)``.
Every L1 term is a *mean* absolute difference, which keeps the exponents
bounded (roughly ``[-2k, 1]`` for images in [0, 1]) whatever the resolution.
For batches each sample's loss is computed separately and the batch mean is
returned.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

from .errors import ConfigError, DimensionError


def default_lambda(k):
    """Reconstruction weight ``1 / (k + 1)``: one part reconstruction, k parts decomposition."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return 1.0 / (k + 1)


@dataclass(frozen=True)
class LossConfig:
    k: int = 3
    lam: float | None = None

    @property
    def lambda_(self):
        lam = default_lambda(self.k) if self.lam is None else self.lam
        if not 0.0 < lam <= 1.0:
            raise ConfigError(f"lambda must be in (0, 1], got {lam}")
        return lam


def _check_same(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _per_sample_l1(a, b):
    _check_same(a, b)
    diff = (a - b).abs()
    if diff.dim() == 4:
        return diff.flatten(1).mean(dim=1)
    return diff.mean()


def l1(a, b):
    """Mean absolute difference over all elements."""
    _check_same(a, b)
    return (a - b).abs().mean()


def decomposition_penalty(reference, components):
    """``exp(-sum_i L1(X, I_i)) + exp(-sum_{i<j} L1(I_i, I_j))`` per sample."""
    to_input = sum(_per_sample_l1(reference, c) for c in components)
    between = sum(_per_sample_l1(a, b) for a, b in itertools.combinations(components, 2))
    return torch.exp(-to_input) + torch.exp(-between)


def _checked_k(components, cfg):
    if len(components) != cfg.k:
        raise DimensionError(f"expected {cfg.k} components, got {len(components)}")
    if len(components) < 2:
        raise DimensionError("need at least two components")


def decomposition_loss(image, reconstruction, components, cfg=LossConfig()):
    _checked_k(components, cfg)
    lam = cfg.lambda_
    recon = torch.exp(_per_sample_l1(image, reconstruction))
    total = lam * recon + (1.0 - lam) * decomposition_penalty(image, components)
    return total.mean()


def crossroad_loss(o1, o2, b1, b2):
    """Minimum over the natural and swapped output-to-bonafide pairings."""
    _check_same(o1, o2, b1, b2)
    natural = _per_sample_l1(o1, b1) + _per_sample_l1(o2, b2)
    swapped = _per_sample_l1(o1, b2) + _per_sample_l1(o2, b1)
    return torch.minimum(natural, swapped).mean()


def final_loss(morph, o1, o2, b1, b2, components, cfg=LossConfig()):
    _checked_k(components, cfg)
    lam = cfg.lambda_
    _check_same(o1, o2, b1, b2)
    natural = _per_sample_l1(o1, b1) + _per_sample_l1(o2, b2)
    swapped = _per_sample_l1(o1, b2) + _per_sample_l1(o2, b1)
    cross = torch.minimum(natural, swapped)
    total = lam * cross + (1.0 - lam) * decomposition_penalty(morph, components)
    return total.mean()
