"""
Hypernetwork and encoder.

The hypernetwork runs a ResNet34-shaped backbone over the 6-channel
(target, current reconstruction) pair and feeds the feature map to one
refinement head per refined generator layer. Heads emit weight offsets:

- per_channel_standard: down-sampling convs, pooling, FC to C_in * C_out
- per_channel_shared_mix: square convs as wide as the shared FC use slim
  convs and a per-head FC, then one shared mixing pair (D -> D*D, then a
  per-channel D -> D) common to all of them; other layers use the standard head
- separable: FC to rank-1 factors a (k x k x C_in) and b (k x k x C_out)
- per_parameter_naive: FC to the full k x k x C_in x C_out kernel

The encoder reuses the backbone with a 3-channel stem and predicts a W code as
a residual over the generator's average latent.
"""
from __future__ import annotations

import logging
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
from torchvision.models.resnet import BasicBlock

from APP.helpers.config_manager import HyperNetConfig
from APP.helpers.errors import SpecMismatchError
from APP.helpers.tensor_io import load_tensor_dir, read_sidecar, save_tensor_dir
from APP.models.generator import LatentCode
from APP.models.genspec import (GeneratorSpec, LayerSpec, head_output_size, select_refined_layers,
                                shared_head_convs, standard_head_convs, uses_shared_block)
from APP.models.modulation import OffsetSet

logger = logging.getLogger("HyperNet")


class Backbone(nn.Module):
    """ResNet34-shaped feature extractor: 7x7 stem + BN + PReLU, four BasicBlock stages, no max-pool."""

    def __init__(self, in_channels: int, widths: Sequence[int], blocks: Sequence[int], stem_stride: int = 2):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], kernel_size=7, stride=stem_stride, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.PReLU(widths[0]),
        )
        stages = []
        prev = widths[0]
        for stage, (width, n_blocks) in enumerate(zip(widths, blocks)):
            layers = []
            for b in range(n_blocks):
                stride = 2 if (stage > 0 and b == 0) else 1
                downsample = None
                if stride != 1 or prev != width:
                    downsample = nn.Sequential(
                        nn.Conv2d(prev, width, kernel_size=1, stride=stride, bias=False),
                        nn.BatchNorm2d(width),
                    )
                layers.append(BasicBlock(prev, width, stride=stride, downsample=downsample))
                prev = width
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))


def _conv_chain(plan) -> nn.Sequential:
    layers = []
    for cin, cout, stride in plan:
        layers.append(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1))
        layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


class RefinementBlock(nn.Module):
    """Standard head: stride-2 convs, adaptive pooling and one FC (no activation after it)."""

    def __init__(self, layer: LayerSpec, channels: int, height: int, variant: str):
        super().__init__()
        self.layer = layer
        self.variant = variant
        self.convs = _conv_chain(standard_head_convs(channels, height))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(channels, head_output_size(layer, variant))
        k, _, cin, _ = layer.shape
        if variant == "separable":
            # zero only the b factor so a still receives gradient through b
            with torch.no_grad():
                self.fc.weight[k * k * cin:].zero_()
                self.fc.bias[k * k * cin:].zero_()
        else:
            nn.init.zeros_(self.fc.weight)
            nn.init.zeros_(self.fc.bias)

    @property
    def final_fc(self) -> nn.Linear:
        return self.fc

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        n = features.shape[0]
        out = self.fc(self.pool(self.convs(features)).flatten(1))
        k, _, cin, cout = self.layer.shape
        if self.variant == "per_parameter_naive":
            return out.view(n, k, k, cin, cout)
        if self.variant == "separable":
            a = out[:, :k * k * cin].reshape(n, k, k, cin, 1)
            b = out[:, k * k * cin:].reshape(n, k, k, 1, cout)
            return a * b
        return out.view(n, 1, 1, cin, cout)


class SharedRefinementBlock(nn.Module):
    """Per-layer part of a shared-mix head: slim convs and a D -> D FC."""

    def __init__(self, layer: LayerSpec, channels: int, height: int, shared_dim: int):
        super().__init__()
        self.layer = layer
        self.convs = _conv_chain(shared_head_convs(channels, height, shared_dim))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(shared_dim, shared_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(self.pool(self.convs(features)).flatten(1))


class SharedMixer(nn.Module):
    """The FC pair shared by every shared-mix head: D -> D x D, then per-row D -> D."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim * dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        n = v.shape[0]
        rows = self.fc1(v).view(n, self.dim, self.dim)
        return self.fc2(rows).view(n, 1, 1, self.dim, self.dim)


class HyperNetwork(nn.Module):
    def __init__(self, spec: GeneratorSpec, config: HyperNetConfig):
        super().__init__()
        self.spec = spec
        self.config = config
        self.refined_layers: List[int] = select_refined_layers(spec, config.layer_policy)
        height, _, channels = config.backbone_feature_shape
        if config.backbone_widths[-1] != channels:
            raise SpecMismatchError(
                f"Backbone ends at {config.backbone_widths[-1]} channels, feature shape says {channels}"
            )

        self.backbone = Backbone(6, config.backbone_widths, config.backbone_blocks, config.stem_stride)
        heads = {}
        shared_layers = []
        for index in self.refined_layers:
            layer = spec.layer(index)
            if uses_shared_block(layer, config):
                heads[str(index)] = SharedRefinementBlock(layer, channels, height, config.shared_fc_dim)
                shared_layers.append(index)
            else:
                heads[str(index)] = RefinementBlock(layer, channels, height, config.head_variant)
        self.heads = nn.ModuleDict(heads)
        self.shared_layers = shared_layers
        self.shared: Optional[SharedMixer] = SharedMixer(config.shared_fc_dim) if shared_layers else None
        logger.debug(f"Built hypernetwork with {len(heads)} heads ({len(shared_layers)} shared) for '{spec.name}'")

    @property
    def per_parameter(self) -> bool:
        return self.config.head_variant in ("per_parameter_naive", "separable")

    def final_fc(self, index: int) -> nn.Linear:
        """The layer producing a head's offsets (the shared per-channel FC for shared heads)."""
        if index in self.shared_layers:
            return self.shared.fc2
        return self.heads[str(index)].final_fc

    def extract_features(self, x: torch.Tensor, y_current: torch.Tensor) -> torch.Tensor:
        """Backbone features of the channel concatenation (target, current reconstruction)."""
        if x.shape != y_current.shape:
            raise SpecMismatchError(f"Target {tuple(x.shape)} and reconstruction {tuple(y_current.shape)} differ")
        if x.dim() != 4 or x.shape[1] != 3:
            raise SpecMismatchError(f"Images must be (N, 3, H, W), got {tuple(x.shape)}")
        features = self.backbone(torch.cat([x, y_current], dim=1))
        h, w, c = self.config.backbone_feature_shape
        if tuple(features.shape[1:]) != (c, h, w):
            raise SpecMismatchError(
                f"Backbone produced {features.shape[2]}x{features.shape[3]}x{features.shape[1]} features, "
                f"configured backbone_feature_shape is {h}x{w}x{c}"
            )
        return features

    def predict_offsets(self, features: torch.Tensor) -> OffsetSet:
        """One offset tensor per refined layer, each with a leading batch dimension."""
        h, w, c = self.config.backbone_feature_shape
        if tuple(features.shape[1:]) != (c, h, w):
            raise SpecMismatchError(f"Features {tuple(features.shape[1:])} do not match ({c}, {h}, {w})")
        offsets: Dict[int, torch.Tensor] = {}
        for index in self.refined_layers:
            out = self.heads[str(index)](features)
            offsets[index] = self.shared(out) if index in self.shared_layers else out
        return OffsetSet(spec=self.spec, offsets=offsets)

    def forward(self, x: torch.Tensor, y_current: torch.Tensor) -> OffsetSet:
        return self.predict_offsets(self.extract_features(x, y_current))


class Encoder(nn.Module):
    """Image -> W code: backbone, global pooling and an FC residual over the average latent."""

    def __init__(self, latent_dim: int, widths: Sequence[int], blocks: Sequence[int], stem_stride: int = 1,
                 latent_avg: Optional[torch.Tensor] = None):
        super().__init__()
        self.latent_dim = latent_dim
        self.widths = tuple(widths)
        self.blocks = tuple(blocks)
        self.stem_stride = stem_stride
        self.backbone = Backbone(3, widths, blocks, stem_stride)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[-1], latent_dim)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)
        if latent_avg is None:
            latent_avg = torch.zeros(1, latent_dim)
        self.register_buffer("latent_avg", latent_avg.detach().clone().reshape(1, latent_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.latent_avg + self.fc(self.pool(self.backbone(x)).flatten(1))

    def encode(self, x: torch.Tensor) -> LatentCode:
        return LatentCode(self(x), "W")

    def freeze(self) -> "Encoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def realized_param_count(module: nn.Module) -> int:
    """Number of scalars in the module's unique parameter objects."""
    unique = {id(p): p for p in module.parameters()}
    return sum(p.numel() for p in unique.values())


def save_hypernet(hypernet: HyperNetwork, directory: str) -> str:
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(hypernet.config).items()}
    sidecars = {"config.json": {"hypernet": config, "spec": hypernet.spec.to_dict()}}
    save_tensor_dir(directory, hypernet.state_dict(), sidecars)
    logger.info(f"Hypernetwork checkpoint written to {directory}")
    return directory


def load_hypernet(directory: str, device=None) -> HyperNetwork:
    meta = read_sidecar(directory, "config.json")
    hypernet = HyperNetwork(GeneratorSpec.from_dict(meta["spec"]), HyperNetConfig(**meta["hypernet"]))
    _load_state(hypernet, directory)
    return hypernet.to(device) if device is not None else hypernet


def save_encoder(encoder: Encoder, directory: str) -> str:
    sidecars = {
        "encoder.json": {
            "latent_dim": encoder.latent_dim,
            "backbone_widths": list(encoder.widths),
            "backbone_blocks": list(encoder.blocks),
            "stem_stride": encoder.stem_stride,
        }
    }
    save_tensor_dir(directory, encoder.state_dict(), sidecars)
    logger.info(f"Encoder checkpoint written to {directory}")
    return directory


def load_encoder(directory: str, device=None) -> Encoder:
    meta = read_sidecar(directory, "encoder.json")
    encoder = Encoder(int(meta["latent_dim"]), meta["backbone_widths"], meta["backbone_blocks"],
                      int(meta["stem_stride"]))
    _load_state(encoder, directory)
    return encoder.to(device) if device is not None else encoder


def _load_state(module: nn.Module, directory: str):
    tensors = load_tensor_dir(directory)
    state = module.state_dict()
    loaded = {}
    for name, value in state.items():
        if name not in tensors:
            raise SpecMismatchError(f"Checkpoint {directory} lacks tensor {name}")
        array = tensors[name]
        if tuple(array.shape) != tuple(value.shape):
            raise SpecMismatchError(f"Tensor {name} has shape {array.shape}, expected {tuple(value.shape)}")
        # BatchNorm's num_batches_tracked is an integer buffer
        loaded[name] = torch.from_numpy(array).to(value.dtype)
    module.load_state_dict(loaded)
