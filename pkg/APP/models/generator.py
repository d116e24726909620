"""
Toy style-based generator built from a GeneratorSpec.

Weight-modulated convolutions with demodulation, a learned 4x4 constant
input, skip toRGB accumulation and no noise inputs. One w is broadcast to
every layer (W space). Synthesis accepts an external weight set so modulated
weights can be injected without touching the module's own parameters; a
weight may carry a leading batch dimension to give every sample its own
kernel.

Images are torch tensors shaped (N, 3, H, W) with values in [-1, 1].
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from APP.helpers.errors import SpecMismatchError
from APP.helpers.tensor_io import load_tensor_dir, read_sidecar, save_tensor_dir
from APP.models.genspec import GeneratorSpec, LayerSpec

logger = logging.getLogger("Generator")

LATENT_SPACES = ("Z", "W")


def layer_key(index: int) -> str:
    """Parameter name of a spec layer's k x k x C_in x C_out kernel."""
    return f"layers.{index - 1}.weight"


@dataclass
class LatentCode:
    """A batch of latent codes (N, latent_dim) tagged with their space."""

    values: torch.Tensor
    space: str = "W"

    def __post_init__(self):
        if self.space not in LATENT_SPACES:
            raise ValueError(f"Latent space must be Z or W, got {self.space!r}")
        if self.values.dim() == 1:
            self.values = self.values.unsqueeze(0)
        if self.values.dim() != 2:
            raise SpecMismatchError(f"Latent codes are (N, latent_dim), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("Latent code has non-finite entries")

    def __len__(self):
        return self.values.shape[0]

    def to(self, device) -> "LatentCode":
        return LatentCode(self.values.to(device), self.space)

    def detach(self) -> "LatentCode":
        return LatentCode(self.values.detach(), self.space)


class GeneratorWeights:
    """
    Named parameter tensors of one generator, validated against its spec.

    Conv and toRGB kernels are stored k x k x C_in x C_out, optionally with a
    leading batch dimension (per-sample modulated weights). Instances are
    treated as immutable: every update returns a new object.
    """

    def __init__(self, spec: GeneratorSpec, tensors: Mapping[str, torch.Tensor]):
        self.spec = spec
        self.tensors: Dict[str, torch.Tensor] = dict(tensors)
        self.validate()

    def validate(self):
        for layer in self.spec.layers:
            key = layer_key(layer.index)
            if key not in self.tensors:
                raise SpecMismatchError(f"Weights have no tensor for layer {layer.index} ({layer.name})")
            shape = tuple(self.tensors[key].shape)
            if shape[-4:] != layer.shape or len(shape) not in (4, 5):
                raise SpecMismatchError(
                    f"Layer {layer.index} ({layer.name}) expects {layer.shape}, got {shape}"
                )

    def layer(self, index: int) -> torch.Tensor:
        self.spec.layer(index)
        return self.tensors[layer_key(index)]

    def with_layers(self, updates: Mapping[int, torch.Tensor]) -> "GeneratorWeights":
        tensors = dict(self.tensors)
        for index, tensor in updates.items():
            tensors[layer_key(index)] = tensor
        return GeneratorWeights(self.spec, tensors)

    def clone(self) -> "GeneratorWeights":
        return GeneratorWeights(self.spec, {k: v.detach().clone() for k, v in self.tensors.items()})

    def __iter__(self):
        return iter(self.tensors.items())


class MappingNetwork(nn.Module):
    """MLP from z to w with LeakyReLU(0.2) after every layer."""

    def __init__(self, latent_dim: int, n_layers: int):
        super().__init__()
        layers = []
        for _ in range(n_layers):
            layers.append(nn.Linear(latent_dim, latent_dim))
            layers.append(nn.LeakyReLU(negative_slope=0.2))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # pixel norm
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class ModulatedConv(nn.Module):
    """
    Convolution whose kernel is scaled by a per-sample style and, for feature
    convs, demodulated. toRGB layers skip demodulation.
    """

    def __init__(self, layer: LayerSpec, latent_dim: int, eps: float = 1e-8):
        super().__init__()
        self.spec = layer
        self.demodulate = layer.is_conv
        self.padding = layer.kernel // 2
        self.eps = eps
        # equalized learning rate: raw weights are N(0, 1) and scaled at runtime
        self.gain = 1.0 / math.sqrt(layer.c_in * layer.kernel * layer.kernel)
        self.weight = nn.Parameter(torch.randn(layer.shape))
        self.bias = nn.Parameter(torch.zeros(layer.c_out))
        self.affine = nn.Linear(latent_dim, layer.c_in)
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        n, _, h, wd = x.shape
        style = self.affine(w)

        weight = self.weight * self.gain
        if weight.dim() == 4:
            weight = weight.unsqueeze(0)
        # (N|1, k, k, C_in, C_out) -> (N|1, C_out, C_in, k, k)
        weight = weight.permute(0, 4, 3, 1, 2)
        weight = (weight * style[:, None, :, None, None]).contiguous()
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)

        weight = weight.reshape(n * self.spec.c_out, self.spec.c_in, self.spec.kernel, self.spec.kernel)
        out = F.conv2d(x.reshape(1, -1, h, wd), weight, padding=self.padding, groups=n)
        return out.reshape(n, self.spec.c_out, h, wd) + self.bias[None, :, None, None]


def _upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class Generator(nn.Module):
    """
    Synthesis network for one GeneratorSpec plus its mapping network.

    ``self.layers[i]`` realises spec layer ``i + 1``; its kernel is the
    parameter ``layers.{i}.weight``.
    """

    def __init__(self, spec: GeneratorSpec, n_mapping: int = 4, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.n_mapping = n_mapping
        self.seed = seed
        self.plan = [([c.index for c in convs], rgb.index) for convs, rgb in spec.blocks()]
        for b, (convs, _) in enumerate(self.plan):
            if len(convs) != (1 if b == 0 else 2):
                raise SpecMismatchError(
                    f"Spec '{spec.name}' block {b} has {len(convs)} convs; expected {1 if b == 0 else 2}"
                )

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.mapping = MappingNetwork(spec.latent_dim, n_mapping)
            first = spec.layer(self.plan[0][0][0])
            self.const = nn.Parameter(torch.randn(1, first.c_in, 4, 4))
            self.layers = nn.ModuleList(ModulatedConv(layer, spec.latent_dim) for layer in spec.layers)

    @property
    def resolution(self) -> int:
        return self.spec.resolution

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.const.expand(w.shape[0], -1, -1, -1)
        rgb = None
        for b, (convs, rgb_index) in enumerate(self.plan):
            if b > 0:
                x = _upsample(x)
            for index in convs:
                x = F.leaky_relu(self.layers[index - 1](x, w), 0.2) * math.sqrt(2.0)
            y = self.layers[rgb_index - 1](x, w)
            rgb = y if rgb is None else _upsample(rgb) + y
        return torch.tanh(rgb)

    def weights(self, detach: bool = True) -> GeneratorWeights:
        """The module's own parameters as a GeneratorWeights (detached clones by default)."""
        tensors = {
            name: (p.detach().clone() if detach else p)
            for name, p in self.named_parameters()
        }
        return GeneratorWeights(self.spec, tensors)

    def map_latent(self, z: LatentCode, weights: Optional[GeneratorWeights] = None) -> LatentCode:
        """Map Z codes to W codes row-wise."""
        if z.space != "Z":
            raise ValueError(f"map_latent expects a Z code, got {z.space}")
        if weights is None:
            return LatentCode(self.mapping(z.values), "W")
        sub = {name[len("mapping."):]: t for name, t in weights.tensors.items() if name.startswith("mapping.")}
        return LatentCode(functional_call(self.mapping, sub, (z.values,)), "W")

    def synthesize(self, w: LatentCode, weights: Optional[GeneratorWeights] = None) -> torch.Tensor:
        """
        Render images from W codes

        Args:
            w (LatentCode): Codes in W, one per image
            weights (GeneratorWeights, optional): Weights to use instead of the module's parameters

        Returns:
            torch.Tensor: (N, 3, R, R) images in [-1, 1]
        """
        if w.space != "W":
            raise ValueError(f"synthesize expects a W code, got {w.space}")
        if w.values.shape[1] != self.latent_dim:
            raise SpecMismatchError(f"Latent dim {w.values.shape[1]} does not match spec ({self.latent_dim})")
        if weights is None:
            return self(w.values)
        if weights.spec != self.spec:
            raise SpecMismatchError(f"Weights for spec '{weights.spec.name}' cannot drive '{self.spec.name}'")
        for index in range(1, len(self.spec.layers) + 1):
            kernel = weights.layer(index)
            if kernel.dim() == 5 and kernel.shape[0] != len(w):
                raise SpecMismatchError(
                    f"Per-sample weights for layer {index} have batch {kernel.shape[0]}, latents have {len(w)}"
                )
        return functional_call(self, weights.tensors, (w.values,))

    def freeze(self) -> "Generator":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def sample_latents(n: int, seed: int, latent_dim: int, device=None) -> LatentCode:
    """n standard-normal Z codes, reproducible per seed."""
    if n < 1:
        raise ValueError(f"sample_latents needs n >= 1 (got {n})")
    rng = torch.Generator().manual_seed(seed)
    values = torch.randn(n, latent_dim, generator=rng)
    return LatentCode(values.to(device) if device is not None else values, "Z")


@torch.no_grad()
def mean_latent(generator: Generator, n: int = 4096, seed: int = 0) -> LatentCode:
    """Average W code of n mapped samples, shape (1, latent_dim)."""
    device = next(generator.parameters()).device
    z = sample_latents(n, seed, generator.latent_dim, device)
    return LatentCode(generator.map_latent(z).values.mean(dim=0, keepdim=True), "W")


def sample_images(generator: Generator, n: int, seed: int, batch_size: int = 256):
    """Generator-sampled targets x = G(map(z)) with their W codes."""
    device = next(generator.parameters()).device
    z = sample_latents(n, seed, generator.latent_dim, device)
    with torch.no_grad():
        w = generator.map_latent(z)
        images = torch.cat([
            generator.synthesize(LatentCode(w.values[i:i + batch_size], "W"))
            for i in range(0, n, batch_size)
        ])
    return images, w


def perturbed_copy(generator: Generator, scale: float = 0.05, seed: int = 0) -> Generator:
    """
    A "fine-tuned" relative of a generator sharing its spec

    Every conv and toRGB kernel gets Gaussian noise with std scale * std(kernel);
    the mapping network and affines are kept so W codes stay meaningful.
    """
    target = copy.deepcopy(generator)
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for index in range(1, len(target.spec.layers) + 1):
            weight = target.layers[index - 1].weight
            noise = torch.randn(weight.shape, generator=rng).to(weight)
            weight.add_(noise * weight.std() * scale)
    return target


def save_generator(generator: Generator, directory: str) -> str:
    """Write spec.json, generator.json and one tensor file per parameter."""
    sidecars = {
        "spec.json": generator.spec.to_dict(),
        "generator.json": {"n_mapping": generator.n_mapping, "seed": generator.seed},
    }
    save_tensor_dir(directory, {n: p for n, p in generator.state_dict().items()}, sidecars)
    logger.info(f"Generator checkpoint written to {directory}")
    return directory


def load_generator(directory: str, device=None) -> Generator:
    spec = GeneratorSpec.from_dict(read_sidecar(directory, "spec.json"))
    meta = read_sidecar(directory, "generator.json")
    generator = Generator(spec, n_mapping=int(meta["n_mapping"]), seed=int(meta.get("seed", 0)))
    tensors = load_tensor_dir(directory)
    state = generator.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise SpecMismatchError(f"Generator checkpoint {directory} lacks tensors: {', '.join(missing[:5])}")
    for name, value in state.items():
        if tuple(tensors[name].shape) != tuple(value.shape):
            raise SpecMismatchError(f"Tensor {name} has shape {tensors[name].shape}, expected {tuple(value.shape)}")
    generator.load_state_dict({name: torch.from_numpy(tensors[name]) for name in state})
    return generator.to(device) if device is not None else generator
