"""Compute-device selection for torch models."""
from __future__ import annotations

import logging
import os

import torch

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("Device")

DEVICE_ENV = "HYPERINVERT_DEVICE"


def _mps_available() -> bool:
    backend = getattr(torch.backends, "mps", None)
    return bool(backend is not None and backend.is_available())


def detect_best_device() -> str:
    """Detect the best available device.

    Priority: cuda > mps > cpu
    """
    if torch.cuda.is_available():
        return "cuda"
    if _mps_available():
        return "mps"
    return "cpu"


def resolve_device(requested: str | None = None) -> torch.device:
    """Resolve the device to run on.

    An explicit request wins, then the HYPERINVERT_DEVICE environment variable,
    then detection. Requests for an unavailable accelerator fall back to CPU
    with a warning.
    """
    name = requested or os.environ.get(DEVICE_ENV) or detect_best_device()
    name = name.strip().lower()

    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"{name} requested but CUDA is not available - falling back to CPU")
        name = "cpu"
    elif name == "mps" and not _mps_available():
        logger.warning("mps requested but not available - falling back to CPU")
        name = "cpu"

    try:
        device = torch.device(name)
    except RuntimeError:
        logger.warning(f"Unknown device '{name}' - falling back to CPU")
        device = torch.device("cpu")
    logger.debug(f"Using device {device}")
    return device
