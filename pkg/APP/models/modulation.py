"""
Weight-update algebra for predicted offsets.

Offsets are multiplicative: a refined kernel becomes theta * (1 + delta).
A per-channel delta is 1 x 1 x C_in x C_out and broadcasts over the k x k
kernel; a per-parameter delta has the kernel's full shape. Iterative
refinement sums the deltas of all steps and applies the sum once to the
original kernel. Any delta may carry a leading batch dimension, in which case
the modulated kernel is per-sample.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import torch

from APP.helpers.errors import SpecMismatchError
from APP.helpers.tensor_io import load_tensor_dir, read_sidecar, save_tensor_dir
from APP.models.generator import GeneratorWeights
from APP.models.genspec import GeneratorSpec

logger = logging.getLogger("Modulation")

MANIFEST = "layers.json"


def _tensor_name(index: int) -> str:
    return f"layer_{index:02d}"


@dataclass
class OffsetSet:
    """Offsets for the refined layers of one generator, keyed by spec layer index."""

    spec: GeneratorSpec
    offsets: Dict[int, torch.Tensor]

    def __post_init__(self):
        self.offsets = dict(sorted(self.offsets.items()))
        for index, delta in self.offsets.items():
            layer = self.spec.layer(index)
            k, _, cin, cout = layer.shape
            tail = tuple(delta.shape[-4:])
            if delta.dim() not in (4, 5) or tail not in ((1, 1, cin, cout), (k, k, cin, cout)):
                raise SpecMismatchError(
                    f"Offset for layer {index} ({layer.name}) has shape {tuple(delta.shape)}; "
                    f"expected 1x1x{cin}x{cout} or {k}x{k}x{cin}x{cout}"
                )

    @property
    def layers(self) -> List[int]:
        return list(self.offsets)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.offsets[index]

    def detach(self):
        return type(self)(**{**self.__dict__, "offsets": {i: d.detach() for i, d in self.offsets.items()}})


@dataclass
class AccumulatedOffsets(OffsetSet):
    """Running sum of the offsets predicted over ``step`` refinement steps."""

    step: int = 0

    @classmethod
    def zeros(cls, spec: GeneratorSpec, layers: Iterable[int], per_parameter: bool = False,
              batch_size: Optional[int] = None, device=None, dtype=torch.float32) -> "AccumulatedOffsets":
        offsets = {}
        for index in layers:
            k, _, cin, cout = spec.layer(index).shape
            shape = (k, k, cin, cout) if per_parameter else (1, 1, cin, cout)
            if batch_size is not None:
                shape = (batch_size,) + shape
            offsets[index] = torch.zeros(shape, device=device, dtype=dtype)
        return cls(spec=spec, offsets=offsets, step=0)


def modulate(theta: GeneratorWeights, offsets: OffsetSet) -> GeneratorWeights:
    """
    Apply offsets to a weight set: theta_hat = theta * (1 + delta)

    Args:
        theta (GeneratorWeights): Base weights, never mutated
        offsets (OffsetSet): Per-layer deltas (per-channel or per-parameter)

    Returns:
        GeneratorWeights: New weights; unrefined layers are the same tensors
    """
    if offsets.spec != theta.spec:
        raise SpecMismatchError(f"Offsets for spec '{offsets.spec.name}' do not fit weights of '{theta.spec.name}'")
    updates = {}
    for index, delta in offsets.offsets.items():
        if index < 1 or index > len(theta.spec.layers):
            raise SpecMismatchError(f"Offset for layer {index} which the weights do not have")
        kernel = theta.layer(index)
        updates[index] = kernel * (1.0 + delta)
    return theta.with_layers(updates)


def accumulate(prior: AccumulatedOffsets, new_offsets: OffsetSet) -> AccumulatedOffsets:
    """Add one step's offsets to the running sum."""
    if set(prior.offsets) != set(new_offsets.offsets):
        raise SpecMismatchError(
            f"Cannot accumulate offsets for layers {new_offsets.layers} onto layers {prior.layers}"
        )
    summed = {index: prior.offsets[index] + new_offsets.offsets[index] for index in prior.offsets}
    return AccumulatedOffsets(spec=prior.spec, offsets=summed, step=prior.step + 1)


def transfer_offsets(offsets: AccumulatedOffsets, theta_target: GeneratorWeights) -> GeneratorWeights:
    """Apply offsets predicted against one generator to another with the identical layer table."""
    if offsets.spec != theta_target.spec:
        raise SpecMismatchError(
            f"Offsets were predicted for spec '{offsets.spec.name}', target generator uses '{theta_target.spec.name}'"
        )
    return modulate(theta_target, offsets)


def save_offsets(offsets: OffsetSet, directory: str) -> str:
    manifest = {
        "spec": offsets.spec.to_dict(),
        "step": getattr(offsets, "step", 1),
        "layers": [
            {"index": index, "name": offsets.spec.layer(index).name, "file": _tensor_name(index),
             "shape": list(delta.shape)}
            for index, delta in offsets.offsets.items()
        ],
    }
    save_tensor_dir(directory, {_tensor_name(i): d for i, d in offsets.offsets.items()}, {MANIFEST: manifest})
    logger.debug(f"Saved offsets for {len(offsets.offsets)} layers to {directory}")
    return directory


def load_offsets(directory: str, device=None) -> AccumulatedOffsets:
    manifest = read_sidecar(directory, MANIFEST)
    spec = GeneratorSpec.from_dict(manifest["spec"])
    tensors = load_tensor_dir(directory)
    offsets = {}
    for entry in manifest["layers"]:
        name = entry["file"]
        if name not in tensors:
            raise SpecMismatchError(f"Offset tensor {name} missing from {os.path.abspath(directory)}")
        offsets[int(entry["index"])] = torch.from_numpy(tensors[name]).to(device or "cpu")
    return AccumulatedOffsets(spec=spec, offsets=offsets, step=int(manifest.get("step", 1)))
