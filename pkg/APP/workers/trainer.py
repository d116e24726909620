"""
Training pipelines: encoder pretraining (the frozen initialiser) and the
hypernetwork loop with iterative refinement, plus the end-to-end experiment
runner used by the ``train`` command.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from scipy import stats

from APP.helpers.checkpoint_manager import resolve_checkpoint, run_paths
from APP.helpers.config_manager import (EncoderConfig, ExperimentConfig, HyperNetConfig, LossConfig,
                                        TrainConfig, load_experiment_config, save_config)
from APP.helpers.errors import ConfigError, HyperInvertError, SpecMismatchError
from APP.models.generator import Generator, load_generator, mean_latent, sample_images, save_generator
from APP.models.genspec import GeneratorSpec, count_hypernet_params, toy_spec
from APP.models.hypernet import (Encoder, HyperNetwork, load_encoder, load_hypernet, realized_param_count,
                                 save_encoder, save_hypernet)
from APP.models.losses import total_loss
from APP.workers.inversion import invert, refinement_steps
from APP.workers.optim import build_optimizer
from APP.workers.sample_worker import BatchPrefetcher

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("Trainer")


@dataclass
class StepRecord:
    step: int
    losses: List[Dict[str, float]]
    objective: float
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainLog:
    steps: List[StepRecord] = field(default_factory=list)
    checkpoint_paths: Dict[str, str] = field(default_factory=dict)

    def totals(self) -> List[float]:
        """Mean per-refinement-step total loss of every optimisation step."""
        return [float(np.mean([r["total"] for r in s.losses])) for s in self.steps]

    def moving_average(self, window: int = 100) -> List[float]:
        totals = np.asarray(self.totals())
        if len(totals) < window:
            return [float(totals.mean())] if len(totals) else []
        kernel = np.ones(window) / window
        return np.convolve(totals, kernel, mode="valid").tolist()


def build_hypernetwork(spec: GeneratorSpec, config: HyperNetConfig, seed: int = 0) -> HyperNetwork:
    """Construct a hypernetwork with seeded initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return HyperNetwork(spec, config)


def _device_of(module: torch.nn.Module) -> torch.device:
    return next(module.parameters()).device


def _hold_batchnorm_for_single_images(module: torch.nn.Module, dataset_size: int, batch_size: int):
    """With one image per batch, BatchNorm keeps its running statistics instead of batch ones."""
    if min(dataset_size, batch_size) > 1:
        return
    held = 0
    for layer in module.modules():
        if isinstance(layer, torch.nn.modules.batchnorm._BatchNorm):
            layer.eval()
            held += 1
    if held:
        logger.info(f"Batches hold a single image: {held} BatchNorm layers use running statistics")


def pretrain_encoder(dataset: torch.Tensor, generator: Generator, config: EncoderConfig,
                     loss_config: Optional[LossConfig] = None, seed: int = 0, log_every: int = 100) -> Encoder:
    """
    Train an encoder E minimising total_loss(x, G(E(x); theta)), then freeze it

    Args:
        dataset (torch.Tensor): Training images (N, 3, R, R)
        generator (Generator): Frozen generator
        config (EncoderConfig): Backbone shape, steps, learning rate and batch size
        loss_config (LossConfig, optional): Objective weights
        seed (int): Initialisation and batch-order seed

    Returns:
        Encoder: Frozen encoder whose outputs live in W
    """
    if len(dataset) == 0:
        raise HyperInvertError("pretrain_encoder needs a non-empty dataset")
    loss_config = loss_config or LossConfig()
    generator.freeze()
    device = _device_of(generator)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = Encoder(generator.latent_dim, config.backbone_widths, config.backbone_blocks,
                          config.stem_stride, latent_avg=mean_latent(generator, seed=seed).values).to(device)
    optimizer = build_optimizer(encoder.parameters(), "ranger", config.learning_rate)
    encoder.train()
    _hold_batchnorm_for_single_images(encoder, len(dataset), config.batch_size)

    logger.info(f"Pretraining encoder for {config.steps} steps on {len(dataset)} images")
    start = time.time()
    running = []
    with BatchPrefetcher(dataset, config.batch_size, seed=seed, device=device) as batches:
        for step in range(1, config.steps + 1):
            x = batches.next()
            y = generator.synthesize(encoder.encode(x))
            report = total_loss(x, y, loss_config)
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()
            running.append(float(report.total.detach()))
            if log_every and step % log_every == 0:
                logger.info(f"encoder step {step}: loss {np.mean(running[-log_every:]):.5f} "
                            f"({time.time() - start:.1f}s)")
    return encoder.freeze()


def train_hypernetwork(dataset: torch.Tensor, generator: Generator, encoder: Encoder, hypernet: HyperNetwork,
                       config: TrainConfig, log_path: Optional[str] = None,
                       checkpoint_dir: Optional[str] = None,
                       on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainLog:
    """
    Train the hypernetwork with T unrolled refinement steps per batch

    Per batch: w_init = E(x); y_0 = G(w_init; theta); for t = 1..T predict offsets
    from (x, y_{t-1}), accumulate, re-synthesise and score total_loss(x, y_t). The
    per-step losses are averaged (or summed) and back-propagated; only the
    hypernetwork's parameters change.

    Args:
        dataset (torch.Tensor): Training images (N, 3, R, R)
        generator (Generator): Frozen generator
        encoder (Encoder): Frozen encoder
        hypernet (HyperNetwork): Network to train
        config (TrainConfig): Optimiser, T, steps and loss settings
        log_path (str, optional): JSON-lines file the step records are appended to
        checkpoint_dir (str, optional): Where periodic hypernetwork checkpoints go

    Returns:
        TrainLog: One record (T loss reports) per optimisation step
    """
    if hypernet.spec != generator.spec:
        raise SpecMismatchError(
            f"Hypernetwork was built for '{hypernet.spec.name}', generator uses '{generator.spec.name}'"
        )
    if len(dataset) == 0:
        raise HyperInvertError("train_hypernetwork needs a non-empty dataset")
    if not hypernet.refined_layers:
        raise ConfigError("The layer policy selects no layers, so there is nothing to train")
    generator.freeze()
    encoder.freeze()
    device = _device_of(generator)
    hypernet.to(device).train()
    _hold_batchnorm_for_single_images(hypernet, len(dataset), config.batch_size)
    torch.manual_seed(config.seed)

    theta = generator.weights(detach=False)
    optimizer = build_optimizer(hypernet.parameters(), config.optimizer, config.learning_rate)
    log = TrainLog()
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    logger.info(f"Training hypernetwork: {config.steps} steps, batch {config.batch_size}, "
                f"T={config.refinement_steps}, lr={config.learning_rate}, optimizer={config.optimizer}")
    start = time.time()
    try:
        with BatchPrefetcher(dataset, config.batch_size, seed=config.seed, device=device) as batches:
            for step in range(1, config.steps + 1):
                step_start = time.time()
                x = batches.next()
                with torch.no_grad():
                    w_init = encoder.encode(x)

                reports = []
                for t, _, y in refinement_steps(x, generator, theta, w_init, hypernet, config.refinement_steps,
                                                detach_between_steps=config.detach_between_steps):
                    if t > 0:
                        reports.append(total_loss(x, y, config.loss))
                objective = torch.stack([r.total for r in reports]).sum()
                if config.loss.step_reduction == "mean":
                    objective = objective / len(reports)

                optimizer.zero_grad(set_to_none=True)
                objective.backward()
                optimizer.step()

                record = StepRecord(step=step, losses=[r.as_floats() for r in reports],
                                    objective=float(objective.detach()), wall_seconds=time.time() - step_start)
                log.steps.append(record)
                if log_file:
                    log_file.write(record.to_json() + "\n")
                if on_step:
                    on_step(record)
                if config.log_every and step % config.log_every == 0:
                    recent = log.totals()[-config.log_every:]
                    logger.info(f"step {step}/{config.steps}: loss {np.mean(recent):.5f} ({time.time() - start:.1f}s)")
                if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_hypernet(hypernet, checkpoint_dir)
    finally:
        if log_file:
            log_file.close()

    if checkpoint_dir:
        log.checkpoint_paths["hypernet"] = save_hypernet(hypernet, checkpoint_dir)
    logger.info(f"Hypernetwork training finished in {time.time() - start:.1f}s")
    return log


def evaluate_heldout(images: torch.Tensor, generator: Generator, encoder: Encoder, hypernet: HyperNetwork,
                     T: int = 5, batch_size: int = 50) -> Dict[str, object]:
    """
    Held-out distortion report

    Returns:
        dict: per_step_mean_l2 (length T+1), win_rate (share of images whose step-T
        L2 beats the zero-offset step 0), mean_reduction and the one-sided paired
        t-test p-value for step 0 > step T
    """
    per_sample = torch.cat([
        invert(images[i:i + batch_size], generator, encoder, hypernet, T).per_sample_distortion
        for i in range(0, len(images), batch_size)
    ], dim=1).cpu().double().numpy()
    baseline, final = per_sample[0], per_sample[-1]
    if len(baseline) > 1 and np.any(baseline != final):
        p_value = float(stats.ttest_rel(baseline, final, alternative="greater").pvalue)
    else:
        p_value = 1.0
    return {
        "n_images": int(len(baseline)),
        "per_step_mean_l2": per_sample.mean(axis=1).tolist(),
        "win_rate": float(np.mean(final < baseline)),
        "mean_reduction": float(np.mean(baseline - final)),
        "p_value": p_value,
    }


def build_generator(config: ExperimentConfig, device=None) -> Generator:
    """Load the configured generator checkpoint, or build the seeded toy generator."""
    gen = config.generator
    if gen.checkpoint:
        return load_generator(resolve_checkpoint(gen.checkpoint), device)
    spec = toy_spec(gen.max_resolution, gen.base_channels, gen.latent_dim)
    generator = Generator(spec, n_mapping=gen.n_mapping, seed=gen.seed)
    return generator.to(device) if device is not None else generator


def describe_models(config: ExperimentConfig, generator: Generator) -> Dict[str, int]:
    """Realised and analytical parameter counts of the configured networks."""
    hypernet = build_hypernetwork(generator.spec, config.hypernet, config.seed)
    enc = config.encoder
    encoder = Encoder(generator.latent_dim, enc.backbone_widths, enc.backbone_blocks, enc.stem_stride)
    return {
        "generator": realized_param_count(generator),
        "encoder": realized_param_count(encoder),
        "hypernet": realized_param_count(hypernet),
        "hypernet_analytical": count_hypernet_params(generator.spec, config.hypernet).total,
    }


def run_experiment(config: ExperimentConfig, device=None) -> Dict[str, object]:
    """
    Full training run: generator, generator-sampled data, encoder (pretrained unless
    a checkpoint is given), hypernetwork training and held-out evaluation.
    Everything is written under config.output_dir.
    """
    paths = run_paths(config.output_dir)
    os.makedirs(config.output_dir, exist_ok=True)
    save_config(config, paths["config"])

    generator = build_generator(config, device).freeze()
    save_generator(generator, paths["generator"])

    train = config.train
    train_images, _ = sample_images(generator, train.train_images, seed=config.seed)
    heldout_images, _ = sample_images(generator, train.heldout_images, seed=config.seed + 1)

    if config.encoder.checkpoint:
        encoder = load_encoder(resolve_checkpoint(config.encoder.checkpoint), _device_of(generator)).freeze()
    else:
        encoder = pretrain_encoder(train_images, generator, config.encoder, config.loss, seed=config.seed,
                                   log_every=train.log_every)
    save_encoder(encoder, paths["encoder"])

    hypernet = build_hypernetwork(generator.spec, config.hypernet, config.seed).to(_device_of(generator))
    if os.path.exists(paths["train_log"]):
        os.remove(paths["train_log"])
    log = train_hypernetwork(train_images, generator, encoder, hypernet, train,
                             log_path=paths["train_log"], checkpoint_dir=paths["hypernet"])

    metrics = evaluate_heldout(heldout_images, generator, encoder, hypernet, T=train.refinement_steps)
    metrics["config_hash"] = config.config_hash()
    with open(paths["heldout"], "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2)
    logger.info(f"Held-out: win rate {metrics['win_rate']:.3f}, p={metrics['p_value']:.2e}, "
                f"L2 per step {', '.join(f'{v:.5f}' for v in metrics['per_step_mean_l2'])}")
    return {"paths": paths, "train_log": log, "heldout": metrics}


def load_run(location: str, device=None):
    """
    Load a finished training run (local directory or archive URL)

    Returns:
        tuple: (ExperimentConfig, Generator, Encoder, HyperNetwork), networks frozen and in eval mode
    """
    run_dir = resolve_checkpoint(location)
    paths = run_paths(run_dir)
    config = load_experiment_config(paths["config"]) if os.path.exists(paths["config"]) else ExperimentConfig()
    generator = load_generator(paths["generator"], device).freeze()
    encoder = load_encoder(paths["encoder"], device).freeze()
    hypernet = load_hypernet(paths["hypernet"], device)
    if hypernet.spec != generator.spec:
        raise SpecMismatchError(f"Run {run_dir}: hypernetwork and generator were built for different specs")
    hypernet.eval()
    logger.info(f"Loaded run {run_dir} ({generator.spec.name}, {len(hypernet.refined_layers)} refined layers)")
    return config, generator, encoder, hypernet
