"""
Latent-direction editing of inverted images and PCA direction discovery.

Edits move the inverted code along a unit direction and re-synthesise with
the offsets predicted for the unedited image.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from APP.helpers.errors import SpecMismatchError
from APP.models.generator import Generator, LatentCode, sample_latents
from APP.models.modulation import AccumulatedOffsets, modulate
from APP.workers.inversion import InversionResult, eval_mode

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("Editing")

UNIT_NORM_TOLERANCE = 1e-6


@dataclass
class EditDirection:
    vector: torch.Tensor
    name: str
    explained_variance: Optional[float] = None

    def __post_init__(self):
        self.vector = torch.as_tensor(self.vector, dtype=torch.float32).flatten()
        norm = float(self.vector.double().norm())
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"Direction '{self.name}' must have unit norm (got {norm:.8f})")

    @classmethod
    def from_vector(cls, vector, name: str, explained_variance: Optional[float] = None) -> "EditDirection":
        """Normalise an arbitrary non-zero vector into a direction."""
        v = torch.as_tensor(vector, dtype=torch.float64).flatten()
        return cls(v / v.norm(), name, explained_variance)


def _sample(result: InversionResult, index: int) -> InversionResult:
    offsets = AccumulatedOffsets(
        spec=result.offsets.spec,
        offsets={i: d[index:index + 1] for i, d in result.offsets.offsets.items()},
        step=result.offsets.step,
    )
    return InversionResult(
        w_init=LatentCode(result.w_init.values[index:index + 1], "W"),
        offsets=offsets,
        reconstruction=result.reconstruction[index:index + 1],
        per_step_distortion=result.per_step_distortion,
    )


def apply_edit(result: InversionResult, direction: EditDirection, strength: float,
               generator: Generator) -> torch.Tensor:
    """
    Render G(w_init + strength * d; theta_hat) with the result's accumulated offsets

    Args:
        result (InversionResult): Output of invert
        direction (EditDirection): Unit direction in W
        strength (float): Step length along the direction
        generator (Generator): The generator the result was inverted with

    Returns:
        torch.Tensor: Edited images (N, 3, R, R)
    """
    w = result.w_init.values
    if direction.vector.numel() != w.shape[1]:
        raise SpecMismatchError(
            f"Direction '{direction.name}' has {direction.vector.numel()} dims, latent codes have {w.shape[1]}"
        )
    d = direction.vector.to(device=w.device, dtype=w.dtype)
    with torch.no_grad(), eval_mode(generator):
        theta_hat = modulate(generator.weights(detach=False), result.offsets)
        return generator.synthesize(LatentCode(w + strength * d, "W"), theta_hat)


def edit_sweep(result: InversionResult, directions: Sequence[EditDirection], strengths: Sequence[float],
               generator: Generator, sample: int = 0) -> List[torch.Tensor]:
    """One row per direction, one column per strength, for a single inverted image."""
    single = _sample(result, sample)
    rows = []
    for direction in directions:
        rows.append(torch.cat([apply_edit(single, direction, s, generator) for s in strengths]))
    return rows


def pca_directions(samples: np.ndarray, n_components: int):
    """
    Principal axes of a sample matrix via the covariance eigendecomposition

    Returns:
        tuple: (mean, eigenvalues descending, components as rows)
    """
    mu = samples.mean(axis=0, keepdims=True)
    centered = samples - mu
    cov = (centered.T @ centered) / (centered.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)      # ascending
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    components = evecs[:, order].T[:n_components]
    # sign convention: largest-magnitude entry positive
    signs = np.sign(components[np.arange(len(components)), np.abs(components).argmax(axis=1)])
    signs[signs == 0] = 1.0
    return mu[0], evals, components * signs[:, None]


def discover_directions_pca(generator: Generator, n_samples: int, n_components: int,
                            seed: int = 0) -> List[EditDirection]:
    """Principal components of n_samples mapped latents, unit-normalised and deterministic per seed."""
    if n_components > generator.latent_dim:
        raise ValueError(f"n_components ({n_components}) exceeds latent_dim ({generator.latent_dim})")
    if n_samples < n_components:
        raise ValueError(f"n_samples ({n_samples}) must be >= n_components ({n_components})")
    device = next(generator.parameters()).device
    with torch.no_grad():
        w = generator.map_latent(sample_latents(n_samples, seed, generator.latent_dim, device)).values
    samples = w.double().cpu().numpy()
    _, evals, components = pca_directions(samples, n_components)
    total = float(np.clip(evals, 0.0, None).sum()) or 1.0
    logger.info(f"PCA over {n_samples} latents: top {n_components} components explain "
                f"{100.0 * float(np.clip(evals[:n_components], 0.0, None).sum()) / total:.1f}% of variance")
    return [
        EditDirection.from_vector(component, f"pc{i}", float(evals[i]) / total)
        for i, component in enumerate(components)
    ]


def save_directions(directions: Sequence[EditDirection], path: str) -> str:
    payload = [
        {"name": d.name, "vector": [float(v) for v in d.vector], "explained_variance": d.explained_variance}
        for d in directions
    ]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def load_directions(path: str) -> List[EditDirection]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        payload = [payload]
    # stored vectors went through float32 text, so renormalise on the way in
    return [EditDirection.from_vector(entry["vector"], entry["name"], entry.get("explained_variance"))
            for entry in payload]
