"""
Command-line interface.

Commands: count-params, train, invert, edit, adapt and directions. Exit codes:
0 success, 2 configuration or usage error, 3 generator spec mismatch, 1 anything else.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from typing import Optional

import click
import torch

from APP.helpers.checkpoint_manager import resolve_checkpoint
from APP.helpers.config_manager import (HEAD_VARIANTS, LAYER_POLICIES, LOSS_PRESETS, ExperimentConfig,
                                        HyperNetConfig, LossConfig, load_experiment_config)
from APP.helpers.device import resolve_device
from APP.helpers.errors import ConfigError, HyperInvertError, SpecMismatchError
from APP.helpers.image_support import load_images
from APP.helpers.image_utils import save_grid
from APP.helpers.tensor_io import read_tensor, write_tensor
from APP.models.generator import Generator, LatentCode, load_generator, perturbed_copy, sample_images
from APP.models.genspec import count_hypernet_params, format_variant_table, resolve_spec, variant_report
from APP.models.modulation import load_offsets, save_offsets, transfer_offsets
from APP.workers.editing import discover_directions_pca, edit_sweep, load_directions, save_directions
from APP.workers.inversion import MAX_INFERENCE_STEPS, compare_baselines, invert
from APP.workers.trainer import build_generator, describe_models, load_run, run_experiment

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("CLI")

# Files written by `invert` and read back by `adapt`
INVERSION_FILES = {
    "grid": "reconstruction.png",
    "offsets": "offsets",
    "w_init": "w_init.bin",
    "reconstruction": "reconstruction.bin",
    "metrics": "metrics.json",
    "baselines": "baselines.json",
    "source": "inversion.json",
}


def _write_json(path: str, payload) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def _parse_floats(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Expected comma-separated numbers, got {text!r}") from e


def _generator_from(location: str, device) -> Generator:
    """A generator checkpoint directory, or the generator inside a run directory."""
    directory = resolve_checkpoint(location)
    if not os.path.exists(os.path.join(directory, "spec.json")):
        directory = os.path.join(directory, "generator")
    return load_generator(directory, device).freeze()


def _target_images(generator: Generator, images: Optional[str], sampled: int, seed: int,
                   device) -> torch.Tensor:
    if images:
        return load_images(images, generator.resolution).to(device)
    if sampled < 1:
        raise ConfigError("Pass --images or a positive --sampled count")
    return sample_images(generator, sampled, seed=seed)[0].to(device)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level")
@click.option("--device", default=None, help="cpu, cuda, cuda:N or mps (default: HYPERINVERT_DEVICE or auto)")
@click.pass_context
def cli(ctx, verbose, device):
    """HyperInvert: hypernetwork-based GAN inversion."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
        for handler in logging.getLogger().handlers:
            handler.setLevel(logging.DEBUG)
    ctx.ensure_object(dict)
    ctx.obj["device"] = device


def _device(ctx) -> torch.device:
    return resolve_device(ctx.obj.get("device"))


@cli.command("count-params")
@click.option("--spec", "spec_name", default="stylegan2-1024", show_default=True,
              help="Builtin spec name, toy-<resolution>-<channels>, or a spec JSON path")
@click.option("--heads", type=click.Choice(HEAD_VARIANTS), default=None, help="Head variant")
@click.option("--layers", type=click.Choice(LAYER_POLICIES), default=None, help="Layer policy")
@click.option("--config", "config_path", default=None, help="Take backbone settings from a config's hypernet section")
@click.option("--compare-heads", is_flag=True, help="Compare every head variant under the layer policy")
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table")
def count_params(spec_name, heads, layers, config_path, compare_heads, as_json):
    """Closed-form hypernetwork parameter count for a generator spec."""
    spec = resolve_spec(spec_name)
    config = load_experiment_config(config_path).hypernet if config_path else HyperNetConfig()
    changes = {}
    if heads:
        changes["head_variant"] = heads
    if layers:
        changes["layer_policy"] = layers
    config = config.replace(**changes)

    if compare_heads:
        rows = variant_report(spec, config)
        click.echo(json.dumps(rows, indent=2) if as_json else format_variant_table(rows))
        return
    report = count_hypernet_params(spec, config)
    if as_json:
        payload = report.to_dict()
        payload.update({"spec": spec.name, "head_variant": config.head_variant, "layer_policy": config.layer_policy})
        click.echo(json.dumps(payload, indent=2))
    else:
        click.echo(f"{spec.name}  heads={config.head_variant}  layers={config.layer_policy}")
        click.echo(report.to_table())


@cli.command()
@click.option("--config", "config_path", default=None,
              help="Experiment config JSON with all five sections (default: repository config.json)")
@click.option("--seed", type=int, default=None, help="Override the experiment seed")
@click.option("--out", "output_dir", default=None, help="Override the output directory")
@click.option("--steps", type=int, default=None, help="Override the hypernetwork training steps")
@click.option("-T", "--refinement-steps", "refinement_steps", type=int, default=None,
              help="Override the refinement steps used in training and as the inference default")
@click.option("--loss-preset", type=click.Choice(sorted(LOSS_PRESETS)), default=None,
              help="Replace the loss weights with a named preset")
@click.option("--dry-run", is_flag=True, help="Build the networks, print their sizes and exit")
@click.pass_context
def train(ctx, config_path, seed, output_dir, steps, refinement_steps, loss_preset, dry_run):
    """Pretrain the encoder and train the hypernetwork end to end."""
    config = load_experiment_config(config_path, strict=True)
    data = config.to_dict()
    if output_dir:
        data["output_dir"] = output_dir
    if steps is not None:
        data["train"]["steps"] = steps
    if refinement_steps is not None:
        data["train"]["refinement_steps"] = refinement_steps
        data["hypernet"]["refinement_steps"] = refinement_steps
    if loss_preset:
        data["loss"] = asdict(LossConfig.preset(loss_preset, **{
            k: v for k, v in data["loss"].items() if k not in LOSS_PRESETS[loss_preset]}))
    config = ExperimentConfig.from_dict(data)
    if seed is not None:
        config = config.with_seed(seed)

    device = _device(ctx)
    if dry_run:
        counts = describe_models(config, build_generator(config, device))
        counts["config_hash"] = config.config_hash()
        click.echo(json.dumps(counts, indent=2))
        return

    result = run_experiment(config, device)
    summary = dict(result["heldout"])
    summary["output_dir"] = os.path.abspath(config.output_dir)
    click.echo(json.dumps(summary, indent=2))


@cli.command("invert")
@click.argument("checkpoint")
@click.option("--images", default=None, help="Image file or directory to invert")
@click.option("--sampled", type=int, default=8, show_default=True,
              help="Invert this many generator samples when --images is absent")
@click.option("--seed", type=int, default=None, help="Sampling seed (default: the run's held-out seed)")
@click.option("-T", "--steps", "steps", type=int, default=None,
              help=f"Refinement steps, 1..{MAX_INFERENCE_STEPS} (default: the T the run was trained with)")
@click.option("--out", "out_dir", required=True, help="Output directory")
@click.option("--stop-early", is_flag=True, help="Stop refining once the L2 distortion stops improving")
@click.option("--compare-baselines", "run_baselines", is_flag=True, help="Also run latent optimisation and generator fine-tuning")
@click.option("--latent-steps", type=int, default=500, show_default=True)
@click.option("--finetune-steps", type=int, default=200, show_default=True)
@click.pass_context
def invert_command(ctx, checkpoint, images, sampled, seed, steps, out_dir, stop_early, run_baselines,
                   latent_steps, finetune_steps):
    """Invert images with a trained run (directory or archive URL)."""
    device = _device(ctx)
    config, generator, encoder, hypernet = load_run(checkpoint, device)
    T = steps if steps is not None else config.train.refinement_steps
    x = _target_images(generator, images, sampled, config.seed + 1 if seed is None else seed, device)

    result = invert(x, generator, encoder, hypernet, T=T, stop_when_no_improvement=stop_early)
    with torch.no_grad():
        step0 = generator.synthesize(result.w_init)

    paths = {key: os.path.join(out_dir, name) for key, name in INVERSION_FILES.items()}
    os.makedirs(out_dir, exist_ok=True)
    save_grid([x, step0, result.reconstruction], paths["grid"])
    save_offsets(result.offsets, paths["offsets"])
    write_tensor(paths["w_init"], result.w_init.values)
    write_tensor(paths["reconstruction"], result.reconstruction)
    _write_json(paths["source"], {"checkpoint": checkpoint, "steps": len(result.per_step_distortion) - 1})
    metrics = {
        "per_step_l2": result.per_step_distortion,
        "final_l2": result.final_l2,
        "wall_seconds": result.wall_seconds,
        "config_hash": config.config_hash(),
        "n_images": int(x.shape[0]),
    }
    _write_json(paths["metrics"], metrics)
    logger.info(f"Inverted {x.shape[0]} images: L2 {metrics['per_step_l2'][0]:.5f} -> {metrics['final_l2']:.5f}")

    if run_baselines:
        rows = compare_baselines(x, generator, encoder, hypernet, T=T, latent_steps=latent_steps,
                                 finetune_steps=finetune_steps, loss_config=config.loss)
        _write_json(paths["baselines"], rows)
    click.echo(json.dumps(metrics, indent=2))


@cli.command()
@click.argument("checkpoint")
@click.option("--images", default=None, help="Image file or directory to edit")
@click.option("--sampled", type=int, default=1, show_default=True,
              help="Edit generator samples when --images is absent")
@click.option("--seed", type=int, default=None, help="Sampling seed (default: the run's held-out seed)")
@click.option("--directions", "directions_path", default=None, help="Directions JSON written by `directions`")
@click.option("--pca", "n_components", type=int, default=3, show_default=True,
              help="Discover this many PCA directions when --directions is absent")
@click.option("--strengths", default="-3,-1.5,0,1.5,3", show_default=True, help="Comma-separated edit strengths")
@click.option("--sample", "sample_index", type=int, default=0, show_default=True, help="Which inverted image to edit")
@click.option("-T", "--steps", "steps", type=int, default=None, help="Refinement steps for the inversion")
@click.option("--out", "out_dir", required=True, help="Output directory")
@click.pass_context
def edit(ctx, checkpoint, images, sampled, seed, directions_path, n_components, strengths, sample_index, steps,
         out_dir):
    """Invert an image and sweep it along latent directions, keeping its weight offsets."""
    device = _device(ctx)
    config, generator, encoder, hypernet = load_run(checkpoint, device)
    T = steps if steps is not None else config.train.refinement_steps
    x = _target_images(generator, images, sampled, config.seed + 1 if seed is None else seed, device)
    if not 0 <= sample_index < x.shape[0]:
        raise ConfigError(f"--sample {sample_index} is outside the {x.shape[0]} loaded images")

    if directions_path:
        directions = load_directions(directions_path)
    else:
        directions = discover_directions_pca(generator, n_samples=max(1000, n_components), n_components=n_components,
                                             seed=config.seed)
        save_directions(directions, os.path.join(out_dir, "directions.json"))

    result = invert(x, generator, encoder, hypernet, T=T)
    rows = edit_sweep(result, directions, _parse_floats(strengths), generator, sample=sample_index)
    grid = save_grid(rows, os.path.join(out_dir, "edits.png"))
    click.echo(grid)


@cli.command()
@click.argument("inversion_dir")
@click.option("--target", default=None, help="Target generator checkpoint (generator or run directory, or URL)")
@click.option("--perturb", type=float, default=None,
              help="Without --target, adapt to a noisy copy of the source generator at this scale")
@click.option("--perturb-seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, help="Output directory")
@click.pass_context
def adapt(ctx, inversion_dir, target, perturb, perturb_seed, out_dir):
    """Apply offsets from `invert` to another generator with the same spec."""
    device = _device(ctx)
    offsets = load_offsets(os.path.join(inversion_dir, INVERSION_FILES["offsets"]), device)
    w = LatentCode(torch.from_numpy(read_tensor(os.path.join(inversion_dir, INVERSION_FILES["w_init"]))).to(device),
                   "W")

    if target:
        target_generator = _generator_from(target, device)
    elif perturb is not None:
        with open(os.path.join(inversion_dir, INVERSION_FILES["source"]), "r", encoding="utf-8") as f:
            source = json.load(f)["checkpoint"]
        target_generator = perturbed_copy(_generator_from(source, device), scale=perturb, seed=perturb_seed)
    else:
        raise ConfigError("adapt needs --target or --perturb")

    with torch.no_grad():
        adapted = target_generator.synthesize(w, transfer_offsets(offsets, target_generator.weights()))
        plain = target_generator.synthesize(w)
    os.makedirs(out_dir, exist_ok=True)
    write_tensor(os.path.join(out_dir, "adapted.bin"), adapted)
    grid = save_grid([plain, adapted], os.path.join(out_dir, "adapted.png"))
    click.echo(grid)


@cli.command()
@click.argument("checkpoint")
@click.option("--n-samples", type=int, default=10000, show_default=True)
@click.option("--components", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, help="Where to write the directions JSON")
@click.pass_context
def directions(ctx, checkpoint, n_samples, components, seed, out_path):
    """Discover editing directions by PCA over mapped latents."""
    generator = _generator_from(checkpoint, _device(ctx))
    found = discover_directions_pca(generator, n_samples=n_samples, n_components=components, seed=seed)
    click.echo(save_directions(found, out_path))


def main(argv=None) -> int:
    """Run the CLI and map failures to exit codes."""
    try:
        rv = cli.main(args=argv, prog_name="hyperinvert", standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.exceptions.Abort:
        logger.error("Aborted")
        return 1
    except click.ClickException as e:
        e.show()
        return 2
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return ConfigError.exit_code
    except SpecMismatchError as e:
        logger.error(f"Spec mismatch: {e}")
        return SpecMismatchError.exit_code
    except HyperInvertError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1
