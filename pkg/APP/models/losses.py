"""
Reconstruction objective: pixel L2 plus weighted perceptual and similarity terms.

The perceptual and similarity terms use fixed, randomly initialised, frozen
networks (seeded) in place of pretrained LPIPS and identity/MoCo encoders.
Both are built once per (seed, device, dtype) and cached.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from APP.helpers.config_manager import LossConfig
from APP.helpers.errors import SpecMismatchError

PYRAMID_WIDTHS = (16, 32, 64)
EMBEDDING_WIDTHS = (16, 32, 64)


def _check_pair(x: torch.Tensor, y: torch.Tensor):
    if x.shape != y.shape:
        raise SpecMismatchError(f"Image batches differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class FeaturePyramid(nn.Module):
    """Random conv pyramid; returns the feature map of every scale."""

    def __init__(self, widths=PYRAMID_WIDTHS):
        super().__init__()
        stages = []
        prev = 3
        for i, width in enumerate(widths):
            stages.append(nn.Sequential(
                nn.Conv2d(prev, width, kernel_size=3, stride=1 if i == 0 else 2, padding=1),
                nn.GELU(),
                nn.Conv2d(width, width, kernel_size=3, padding=1),
                nn.GELU(),
            ))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class EmbeddingNet(nn.Module):
    """Random conv net with global average pooling to a flat embedding."""

    def __init__(self, widths=EMBEDDING_WIDTHS):
        super().__init__()
        layers = []
        prev = 3
        for width in widths:
            layers += [nn.Conv2d(prev, width, kernel_size=3, stride=2, padding=1), nn.GELU()]
            prev = width
        self.net = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.net(x)).flatten(1)


@lru_cache(maxsize=16)
def perceptual_net(seed: int, device: str, dtype: torch.dtype) -> FeaturePyramid:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = FeaturePyramid()
    return _freeze(net).to(device=device, dtype=dtype)


@lru_cache(maxsize=16)
def embedding_net(seed: int, device: str, dtype: torch.dtype) -> EmbeddingNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = EmbeddingNet()
    return _freeze(net).to(device=device, dtype=dtype)


def per_sample_l2(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared error of each image pair, shape (N,)."""
    _check_pair(x, y)
    return (x - y).pow(2).flatten(1).mean(dim=1)


def l2_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_pair(x, y)
    return F.mse_loss(x, y)


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Mean over scales of the squared distance between random-pyramid features."""
    _check_pair(x, y)
    net = perceptual_net(seed, str(x.device), x.dtype)
    fx, fy = net(x), net(y)
    return sum(F.mse_loss(a, b) for a, b in zip(fx, fy)) / len(fx)


def similarity_loss(x: torch.Tensor, y: torch.Tensor, config: Optional[LossConfig] = None) -> torch.Tensor:
    """1 - cosine similarity of frozen embeddings, averaged over the batch; 0 when sim_mode is off."""
    _check_pair(x, y)
    config = config or LossConfig()
    if config.sim_mode == "off":
        return x.new_zeros(())
    net = embedding_net(config.similarity_seed, str(x.device), x.dtype)
    cos = F.cosine_similarity(net(x), net(y), dim=1, eps=1e-8)
    return (1.0 - cos).clamp(min=0.0).mean()


@dataclass
class LossReport:
    l2: torch.Tensor
    perceptual: torch.Tensor
    similarity: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "l2": float(self.l2.detach()),
            "perceptual": float(self.perceptual.detach()),
            "similarity": float(self.similarity.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(x: torch.Tensor, y: torch.Tensor, config: Optional[LossConfig] = None) -> LossReport:
    """
    Weighted objective l2 + lambda_lpips * perceptual + lambda_sim * similarity

    Args:
        x (torch.Tensor): Targets (N, 3, H, W)
        y (torch.Tensor): Reconstructions, same shape
        config (LossConfig, optional): Weights and proxy seeds

    Returns:
        LossReport: Components and total (tensors, differentiable)
    """
    config = config or LossConfig()
    l2 = l2_loss(x, y)
    perceptual = perceptual_loss(x, y, seed=config.perceptual_seed) if config.lambda_lpips > 0 else x.new_zeros(())
    similarity = similarity_loss(x, y, config) if config.lambda_sim > 0 else x.new_zeros(())
    total = l2 + config.lambda_lpips * perceptual + config.lambda_sim * similarity
    return LossReport(l2=l2, perceptual=perceptual, similarity=similarity, total=total)
