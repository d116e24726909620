"""
Inference: hypernetwork inversion with iterative refinement, and the two
optimisation baselines (latent optimisation, per-image generator fine-tuning).
"""
from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import torch

from APP.helpers.config_manager import LossConfig
from APP.helpers.errors import ConfigError
from APP.models.generator import Generator, GeneratorWeights, LatentCode, mean_latent
from APP.models.hypernet import Encoder, HyperNetwork
from APP.models.losses import per_sample_l2, total_loss
from APP.models.modulation import AccumulatedOffsets, accumulate, modulate

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("Inversion")

MAX_INFERENCE_STEPS = 10


@contextlib.contextmanager
def eval_mode(*modules):
    """Put modules in eval mode for the duration of the block, restoring their flags after."""
    flags = [m.training for m in modules]
    try:
        for m in modules:
            m.eval()
        yield
    finally:
        for m, flag in zip(modules, flags):
            m.train(flag)


def refinement_steps(x: torch.Tensor, generator: Generator, theta: GeneratorWeights, w: LatentCode,
                     hypernet: HyperNetwork, steps: int,
                     detach_between_steps: bool = False) -> Iterator[Tuple[int, AccumulatedOffsets, torch.Tensor]]:
    """
    Iterative refinement loop shared by training and inference

    Yields (t, accumulated offsets, reconstruction) for t = 0..steps; t = 0 is the
    unmodulated reconstruction G(w; theta). Step t feeds (x, y_{t-1}) to the
    hypernetwork, adds the new offsets to the running sum and re-synthesises
    with theta * (1 + sum).
    """
    y = generator.synthesize(w, theta)
    acc = AccumulatedOffsets.zeros(theta.spec, hypernet.refined_layers, per_parameter=hypernet.per_parameter,
                                   batch_size=x.shape[0], device=x.device, dtype=x.dtype)
    yield 0, acc, y
    for t in range(1, steps + 1):
        if detach_between_steps:
            y, acc = y.detach(), acc.detach()
        acc = accumulate(acc, hypernet(x, y))
        y = generator.synthesize(w, modulate(theta, acc))
        yield t, acc, y


@dataclass
class InversionResult:
    w_init: LatentCode
    offsets: AccumulatedOffsets
    reconstruction: torch.Tensor
    per_step_distortion: List[float]
    per_sample_distortion: torch.Tensor = field(repr=False, default=None)
    wall_seconds: float = 0.0

    @property
    def final_l2(self) -> float:
        return self.per_step_distortion[-1]


def invert(x: torch.Tensor, generator: Generator, encoder: Encoder, hypernet: HyperNetwork,
           T: int = 5, stop_when_no_improvement: bool = False) -> InversionResult:
    """
    Invert images with the frozen encoder and T hypernetwork refinement steps

    Args:
        x (torch.Tensor): Targets (N, 3, R, R) in [-1, 1]
        generator (Generator): Frozen generator
        encoder (Encoder): Frozen encoder giving w_init
        hypernet (HyperNetwork): Offset predictor
        T (int): Refinement steps, 1..10
        stop_when_no_improvement (bool): Stop early once the mean L2 stops decreasing

    Returns:
        InversionResult: per_step_distortion[t] is the batch-mean L2 after t steps
    """
    if not 1 <= T <= MAX_INFERENCE_STEPS:
        raise ConfigError(f"Inference steps must be within 1..{MAX_INFERENCE_STEPS} (got {T})")
    start = time.perf_counter()
    with torch.no_grad(), eval_mode(generator, encoder, hypernet):
        w_init = encoder.encode(x)
        theta = generator.weights(detach=False)
        distortions, per_sample = [], []
        best_acc, best_y = None, None
        for t, acc, y in refinement_steps(x, generator, theta, w_init, hypernet, T):
            l2 = per_sample_l2(x, y)
            mean_l2 = float(l2.mean())
            if stop_when_no_improvement and distortions and mean_l2 >= distortions[-1]:
                logger.debug(f"Refinement stopped at step {t - 1}: L2 {mean_l2:.6f} >= {distortions[-1]:.6f}")
                break
            distortions.append(mean_l2)
            per_sample.append(l2)
            best_acc, best_y = acc, y

    return InversionResult(
        w_init=w_init,
        offsets=best_acc.detach(),
        reconstruction=best_y,
        per_step_distortion=distortions,
        per_sample_distortion=torch.stack(per_sample),
        wall_seconds=time.perf_counter() - start,
    )


def optimize_latent(x: torch.Tensor, generator: Generator, steps: int = 500, lr: float = 0.01,
                    w_init: Optional[LatentCode] = None,
                    loss_config: Optional[LossConfig] = None) -> LatentCode:
    """
    Gradient descent on w minimising total_loss(x, G(w; theta)); returns the per-image best w

    The search starts at w_init, or at the generator's average latent.
    """
    if steps < 1:
        raise ConfigError(f"optimize_latent needs steps >= 1 (got {steps})")
    loss_config = loss_config or LossConfig()
    theta = generator.weights()
    if w_init is None:
        w_init = LatentCode(mean_latent(generator).values.expand(x.shape[0], -1), "W")
    w = w_init.values.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([w], lr=lr)

    best_w = w.detach().clone()
    best_l2 = torch.full((x.shape[0],), float("inf"), device=x.device, dtype=x.dtype)

    def track(values, l2):
        nonlocal best_w, best_l2
        improved = l2 < best_l2
        best_l2 = torch.where(improved, l2, best_l2)
        best_w = torch.where(improved[:, None], values.detach(), best_w)

    for _ in range(steps):
        y = generator.synthesize(LatentCode(w, "W"), theta)
        track(w, per_sample_l2(x, y).detach())
        optimizer.zero_grad(set_to_none=True)
        total_loss(x, y, loss_config).total.backward()
        optimizer.step()

    with torch.no_grad():
        track(w, per_sample_l2(x, generator.synthesize(LatentCode(w, "W"), theta)))
    return LatentCode(best_w, "W")


def finetune_generator(x: torch.Tensor, generator: Generator, w_init: LatentCode, steps: int = 200,
                       lr: float = 0.001, loss_config: Optional[LossConfig] = None) -> GeneratorWeights:
    """
    Gradient descent on the synthesis weights for a fixed w_init; returns the best weights seen

    With steps = 0 the generator's weights come back unchanged.
    """
    loss_config = loss_config or LossConfig()
    w = LatentCode(w_init.values.detach(), "W")
    base = generator.weights()
    if steps <= 0:
        return base

    trainable = {name: t.clone().requires_grad_(True) for name, t in base.tensors.items()
                 if not name.startswith("mapping.")}
    theta = GeneratorWeights(base.spec, {**base.tensors, **trainable})
    optimizer = torch.optim.Adam(list(trainable.values()), lr=lr)

    best = base
    with torch.no_grad():
        best_l2 = float(per_sample_l2(x, generator.synthesize(w, base)).mean())

    for _ in range(steps):
        y = generator.synthesize(w, theta)
        optimizer.zero_grad(set_to_none=True)
        total_loss(x, y, loss_config).total.backward()
        optimizer.step()
        with torch.no_grad():
            l2 = float(per_sample_l2(x, generator.synthesize(w, theta)).mean())
        if l2 < best_l2:
            best_l2 = l2
            best = theta.clone()
    return best


def compare_baselines(x: torch.Tensor, generator: Generator, encoder: Encoder, hypernet: HyperNetwork,
                      T: int = 5, latent_steps: int = 500, finetune_steps: int = 200,
                      latent_lr: float = 0.01, finetune_lr: float = 0.001,
                      loss_config: Optional[LossConfig] = None) -> List[Dict[str, float]]:
    """
    Time/distortion table for the hypernetwork and both optimisation baselines

    Returns:
        list: One row per method with final_l2, wall_seconds and seconds_per_image
    """
    n = x.shape[0]
    rows = []

    result = invert(x, generator, encoder, hypernet, T)
    rows.append({"method": "hypernetwork", "final_l2": result.final_l2, "wall_seconds": result.wall_seconds})

    start = time.perf_counter()
    w = optimize_latent(x, generator, latent_steps, latent_lr, w_init=result.w_init, loss_config=loss_config)
    elapsed = time.perf_counter() - start
    with torch.no_grad():
        l2 = float(per_sample_l2(x, generator.synthesize(w)).mean())
    rows.append({"method": "latent_optimization", "final_l2": l2, "wall_seconds": elapsed})

    start = time.perf_counter()
    theta = finetune_generator(x, generator, result.w_init, finetune_steps, finetune_lr, loss_config)
    elapsed = time.perf_counter() - start
    with torch.no_grad():
        l2 = float(per_sample_l2(x, generator.synthesize(result.w_init, theta)).mean())
    rows.append({"method": "generator_finetuning", "final_l2": l2, "wall_seconds": elapsed})

    for row in rows:
        row["seconds_per_image"] = row["wall_seconds"] / n
        logger.info(f"{row['method']:<22} L2 {row['final_l2']:.5f}  {row['seconds_per_image']:.4f}s/image")
    return rows
