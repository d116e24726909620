"""
Configuration management module for HyperInvert.
Handles loading, saving, and accessing experiment settings.

The experiment file is one JSON document with the sections
generator / encoder / hypernet / train / loss plus output_dir and seed.
Partial files are merged over DEFAULT_CONFIG, so a user only writes the
values that differ from the defaults.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

from APP.helpers.errors import ConfigError

# Setup basic logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("ConfigManager")

HEAD_VARIANTS = ("per_channel_standard", "per_channel_shared_mix", "separable", "per_parameter_naive")
LAYER_POLICIES = ("medium_fine_conv", "all_conv", "all_including_torgb", "none")
OPTIMIZERS = ("ranger", "adam")
SIM_MODES = ("embedding_cosine", "off")
STEP_REDUCTIONS = ("mean", "sum")

# Default configuration values (desk-scale toy benchmark)
DEFAULT_CONFIG = {
    "generator": {
        "max_resolution": 32,
        "base_channels": 32,
        "latent_dim": 32,
        "n_mapping": 4,
        "seed": 0,
        "checkpoint": None
    },
    "encoder": {
        "backbone_widths": [16, 32, 64, 64],
        "backbone_blocks": [1, 1, 1, 1],
        "stem_stride": 1,
        "steps": 3000,
        "learning_rate": 0.001,
        "batch_size": 8,
        "checkpoint": None
    },
    "hypernet": {
        "head_variant": "per_channel_shared_mix",
        "layer_policy": "medium_fine_conv",
        "refinement_steps": 5,
        "backbone_feature_shape": [4, 4, 64],
        "shared_fc_dim": 32,
        "backbone_widths": [16, 32, 64, 64],
        "backbone_blocks": [1, 1, 1, 1],
        "stem_stride": 1
    },
    "train": {
        "learning_rate": 0.0001,
        "batch_size": 8,
        "steps": 20000,
        "refinement_steps": 5,
        "optimizer": "ranger",
        "seed": 0,
        "detach_between_steps": False,
        "log_every": 100,
        "checkpoint_every": 0,
        "train_images": 2000,
        "heldout_images": 200
    },
    "loss": {
        "lambda_lpips": 0.8,
        "lambda_sim": 0.1,
        "sim_mode": "embedding_cosine",
        "perceptual_seed": 0,
        "similarity_seed": 1,
        "step_reduction": "mean"
    },
    "output_dir": "runs/default",
    "seed": 0
}

SECTIONS = ("generator", "encoder", "hypernet", "train", "loss")

# Named lambda_sim settings: facial identity setting and the non-facial setting
LOSS_PRESETS = {
    "faces": {"lambda_lpips": 0.8, "lambda_sim": 0.1},
    "generic": {"lambda_lpips": 0.8, "lambda_sim": 0.5},
}


def _check_choice(section, name, value, choices):
    if value not in choices:
        raise ConfigError(f"{section}.{name} must be one of {', '.join(choices)} (got {value!r})")


def _check_positive(section, name, value, minimum=1):
    if value < minimum:
        raise ConfigError(f"{section}.{name} must be >= {minimum} (got {value!r})")


@dataclass
class GeneratorConfig:
    """Toy generator shape and the optional checkpoint to load instead of building one."""

    max_resolution: int = 32
    base_channels: int = 32
    latent_dim: int = 32
    n_mapping: int = 4
    seed: int = 0
    checkpoint: Optional[str] = None

    def __post_init__(self):
        _check_positive("generator", "base_channels", self.base_channels, 4)
        _check_positive("generator", "latent_dim", self.latent_dim)
        _check_positive("generator", "n_mapping", self.n_mapping)


@dataclass
class EncoderConfig:
    backbone_widths: Tuple[int, ...] = (16, 32, 64, 64)
    backbone_blocks: Tuple[int, ...] = (1, 1, 1, 1)
    stem_stride: int = 1
    steps: int = 3000
    learning_rate: float = 0.001
    batch_size: int = 8
    checkpoint: Optional[str] = None

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        self.backbone_blocks = tuple(self.backbone_blocks)
        if len(self.backbone_widths) != 4 or len(self.backbone_blocks) != 4:
            raise ConfigError("encoder.backbone_widths and encoder.backbone_blocks need four stages")
        _check_positive("encoder", "steps", self.steps, 0)
        _check_positive("encoder", "batch_size", self.batch_size)


@dataclass
class HyperNetConfig:
    """
    Hypernetwork head variant, refined-layer policy and backbone shape.

    Defaults are the full-scale configuration (ResNet34-shaped backbone,
    16x16x512 features, 512-wide shared block). The toy benchmark overrides
    them from config.json.
    """

    head_variant: str = "per_channel_shared_mix"
    layer_policy: str = "medium_fine_conv"
    refinement_steps: int = 5
    backbone_feature_shape: Tuple[int, int, int] = (16, 16, 512)
    shared_fc_dim: int = 512
    backbone_widths: Tuple[int, ...] = (64, 128, 256, 512)
    backbone_blocks: Tuple[int, ...] = (3, 4, 6, 3)
    stem_stride: int = 2

    def __post_init__(self):
        self.backbone_feature_shape = tuple(self.backbone_feature_shape)
        self.backbone_widths = tuple(self.backbone_widths)
        self.backbone_blocks = tuple(self.backbone_blocks)
        _check_choice("hypernet", "head_variant", self.head_variant, HEAD_VARIANTS)
        _check_choice("hypernet", "layer_policy", self.layer_policy, LAYER_POLICIES)
        _check_positive("hypernet", "refinement_steps", self.refinement_steps)
        _check_positive("hypernet", "shared_fc_dim", self.shared_fc_dim)
        if len(self.backbone_feature_shape) != 3:
            raise ConfigError("hypernet.backbone_feature_shape must be (height, width, channels)")
        if len(self.backbone_widths) != 4 or len(self.backbone_blocks) != 4:
            raise ConfigError("hypernet.backbone_widths and hypernet.backbone_blocks need four stages")
        if self.backbone_feature_shape[2] != self.backbone_widths[-1]:
            raise ConfigError(
                f"hypernet.backbone_feature_shape channels ({self.backbone_feature_shape[2]}) "
                f"must equal the last backbone width ({self.backbone_widths[-1]})"
            )

    def replace(self, **changes) -> "HyperNetConfig":
        data = asdict(self)
        data.update(changes)
        return HyperNetConfig(**data)


@dataclass
class LossConfig:
    lambda_lpips: float = 0.8
    lambda_sim: float = 0.1
    sim_mode: str = "embedding_cosine"
    perceptual_seed: int = 0
    similarity_seed: int = 1
    step_reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_lpips < 0 or self.lambda_sim < 0:
            raise ConfigError("loss weights must be non-negative")
        _check_choice("loss", "sim_mode", self.sim_mode, SIM_MODES)
        _check_choice("loss", "step_reduction", self.step_reduction, STEP_REDUCTIONS)

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossConfig":
        """Build a loss config from a named preset ('faces' or 'generic')."""
        if name not in LOSS_PRESETS:
            raise ConfigError(f"Unknown loss preset {name!r}; expected one of {', '.join(LOSS_PRESETS)}")
        values = dict(LOSS_PRESETS[name])
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0001
    batch_size: int = 8
    steps: int = 20000
    refinement_steps: int = 5
    optimizer: str = "ranger"
    seed: int = 0
    detach_between_steps: bool = False
    log_every: int = 100
    checkpoint_every: int = 0
    train_images: int = 2000
    heldout_images: int = 200
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = _build_section(LossConfig, self.loss, "loss")
        _check_choice("train", "optimizer", self.optimizer, OPTIMIZERS)
        _check_positive("train", "batch_size", self.batch_size)
        _check_positive("train", "steps", self.steps, 0)
        _check_positive("train", "refinement_steps", self.refinement_steps)
        _check_positive("train", "train_images", self.train_images)
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")


def _build_section(cls, values, name):
    """Instantiate a section dataclass, rejecting keys it does not know."""
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{name}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid section '{name}': {e}") from e


@dataclass
class ExperimentConfig:
    """All sections of one experiment; round-trips losslessly through to_dict/from_dict."""

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hypernet: HyperNetConfig = field(default_factory=HyperNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        # the train loop reads its objective from train.loss
        self.train.loss = self.loss

    @classmethod
    def from_dict(cls, data: Dict[str, Any], strict: bool = False) -> "ExperimentConfig":
        """
        Build typed sections from a plain dictionary

        Args:
            data (dict): Parsed experiment document
            strict (bool): Require every section to be present

        Returns:
            ExperimentConfig: Validated configuration
        """
        if strict:
            missing = [name for name in SECTIONS if name not in data]
            if missing:
                raise ConfigError(f"Missing config section(s): {', '.join(missing)}")
        unknown = sorted(set(data) - set(SECTIONS) - {"output_dir", "seed"})
        if unknown:
            raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")

        defaults = copy.deepcopy(DEFAULT_CONFIG)
        deep_update(defaults, data)
        train_values = dict(defaults["train"])
        train_values.pop("loss", None)
        return cls(
            generator=_build_section(GeneratorConfig, defaults["generator"], "generator"),
            encoder=_build_section(EncoderConfig, defaults["encoder"], "encoder"),
            hypernet=_build_section(HyperNetConfig, defaults["hypernet"], "hypernet"),
            train=_build_section(TrainConfig, train_values, "train"),
            loss=_build_section(LossConfig, defaults["loss"], "loss"),
            output_dir=str(defaults["output_dir"]),
            seed=int(defaults["seed"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        train = asdict(self.train)
        train.pop("loss")
        data = {
            "generator": asdict(self.generator),
            "encoder": asdict(self.encoder),
            "hypernet": asdict(self.hypernet),
            "train": train,
            "loss": asdict(self.loss),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        # tuples become lists so the dump equals a freshly parsed file
        return json.loads(json.dumps(data))

    def config_hash(self) -> str:
        """SHA-256 hex digest of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = int(seed)
        data["train"]["seed"] = int(seed)
        return ExperimentConfig.from_dict(data)


def get_config_path():
    """Get the absolute path to the default config file"""
    return os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), 'config.json')


def load_config(config_path=None):
    """
    Load configuration from file or create with defaults if not exists

    Args:
        config_path (str, optional): Path to the JSON file (default: repository config.json)

    Returns:
        dict: Configuration dictionary merged over DEFAULT_CONFIG
    """
    config_path = config_path or get_config_path()

    if not os.path.exists(config_path):
        if config_path == get_config_path():
            save_config(DEFAULT_CONFIG, config_path)
            logger.debug(f"Created default configuration at {config_path}")
            return copy.deepcopy(DEFAULT_CONFIG)
        raise ConfigError(f"Config file not found: {config_path}")

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e
    logger.debug(f"Configuration loaded from {config_path}")

    if not isinstance(config, dict):
        raise ConfigError(f"Config file {config_path} must hold a JSON object")
    merged_config = copy.deepcopy(DEFAULT_CONFIG)
    deep_update(merged_config, config)
    return merged_config


def load_experiment_config(config_path=None, strict=False):
    """
    Load and validate an experiment configuration

    Args:
        config_path (str, optional): Path to the JSON file
        strict (bool): Require all five sections to be present in the file itself

    Returns:
        ExperimentConfig: Typed configuration
    """
    config_path = config_path or get_config_path()
    if strict:
        if not os.path.exists(config_path):
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"Config file {config_path} must hold a JSON object")
        return ExperimentConfig.from_dict(raw, strict=True)
    return ExperimentConfig.from_dict(load_config(config_path))


def save_config(config, config_path=None):
    """
    Save configuration to file

    Args:
        config (dict | ExperimentConfig): Configuration to save
        config_path (str, optional): Target path (default: repository config.json)

    Returns:
        str: Path written
    """
    config_path = config_path or get_config_path()
    if isinstance(config, ExperimentConfig):
        config = config.to_dict()
    directory = os.path.dirname(os.path.abspath(config_path))
    os.makedirs(directory, exist_ok=True)
    with open(config_path, 'w', encoding='utf-8') as f:
        json.dump(config, f, indent=4)
    # Use DEBUG level here to avoid cluttering stdout with frequent config saves
    logger.debug(f"Configuration saved to {config_path}")
    return config_path


def deep_update(target, source):
    """
    Recursively update a nested dictionary without overwriting entire sections

    Args:
        target (dict): Dictionary to update
        source (dict): Dictionary with updates
    """
    for key, value in source.items():
        if key in target and isinstance(target[key], dict) and isinstance(value, dict):
            deep_update(target[key], value)
        else:
            target[key] = value


def get_value(path, default=None, config=None):
    """
    Get a configuration value using dot notation path

    Args:
        path (str): Path to the value (e.g., 'train.learning_rate')
        default: Default value if path not found
        config (dict, optional): Configuration to read (default: loaded from file)

    Returns:
        Value at the specified path or default
    """
    current = load_config() if config is None else config
    for key in path.split('.'):
        if isinstance(current, dict) and key in current and current[key] is not None:
            current = current[key]
        else:
            return default
    return current


def set_value(path, value, config=None):
    """
    Set a configuration value using dot notation path

    Args:
        path (str): Path to the value (e.g., 'train.steps')
        value: Value to set
        config (dict, optional): Dictionary to modify in place; when omitted the
            repository config.json is loaded, modified and saved

    Returns:
        dict: The updated configuration
    """
    persist = config is None
    config = load_config() if persist else config
    keys = path.split('.')

    # Navigate to the parent of the target key
    current = config
    for key in keys[:-1]:
        if key not in current or not isinstance(current[key], dict):
            current[key] = {}
        current = current[key]
    current[keys[-1]] = value

    if persist:
        save_config(config)
    return config
