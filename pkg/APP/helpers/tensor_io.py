"""
Binary tensor files and tensor directories.

A tensor file is: rank (int64 LE), rank dims (int64 LE each), then the
values as float32 little-endian in row-major order. A tensor directory holds
one ``<name>.bin`` per named tensor plus JSON sidecars written by the caller
(spec.json, config.json, layers.json).
"""
from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, Mapping, Optional

import numpy as np

from APP.helpers.errors import HyperInvertError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("TensorIO")

TENSOR_SUFFIX = ".bin"
_HEADER_DTYPE = np.dtype("<i8")
_VALUE_DTYPE = np.dtype("<f4")


def _to_numpy(tensor) -> np.ndarray:
    # torch tensors expose .detach(); numpy arrays and lists go straight through
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    # np.ascontiguousarray promotes 0-d input to shape (1,)
    return np.array(tensor, dtype=_VALUE_DTYPE, order="C", copy=True)


def write_tensor(path: str, tensor) -> str:
    """Write one tensor in the binary format and return the path."""
    array = _to_numpy(tensor)
    header = np.array([array.ndim, *array.shape], dtype=_HEADER_DTYPE)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(array.tobytes(order="C"))
    logger.debug(f"Wrote tensor {array.shape} to {path}")
    return path


def read_tensor(path: str) -> np.ndarray:
    """
    Read one tensor file

    Args:
        path (str): File written by write_tensor

    Returns:
        np.ndarray: float32 array with the recorded shape
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER_DTYPE.itemsize:
        raise HyperInvertError(f"Tensor file {path} is truncated (no header)")
    rank = int(np.frombuffer(data, dtype=_HEADER_DTYPE, count=1)[0])
    header_size = _HEADER_DTYPE.itemsize * (1 + rank)
    if rank < 0 or len(data) < header_size:
        raise HyperInvertError(f"Tensor file {path} has a corrupt header (rank {rank})")
    shape = tuple(int(d) for d in np.frombuffer(data, dtype=_HEADER_DTYPE, count=rank, offset=_HEADER_DTYPE.itemsize))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = header_size + count * _VALUE_DTYPE.itemsize
    if len(data) != expected:
        raise HyperInvertError(f"Tensor file {path} holds {len(data)} bytes, expected {expected} for shape {shape}")
    values = np.frombuffer(data, dtype=_VALUE_DTYPE, count=count, offset=header_size)
    return values.reshape(shape).astype(np.float32)


def save_tensor_dir(directory: str, tensors: Mapping[str, Any],
                    sidecars: Optional[Mapping[str, Any]] = None) -> str:
    """
    Save named tensors (and optional JSON sidecars) into a directory

    Args:
        directory (str): Target directory, created if missing
        tensors (Mapping[str, tensor]): Parameter name -> tensor
        sidecars (Mapping[str, object], optional): File name -> JSON-serialisable object

    Returns:
        str: The directory path
    """
    os.makedirs(directory, exist_ok=True)
    for name, tensor in tensors.items():
        write_tensor(os.path.join(directory, name + TENSOR_SUFFIX), tensor)
    for filename, payload in (sidecars or {}).items():
        with open(os.path.join(directory, filename), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
    logger.debug(f"Saved {len(tensors)} tensors to {directory}")
    return directory


def load_tensor_dir(directory: str) -> Dict[str, np.ndarray]:
    """Load every ``*.bin`` file of a tensor directory keyed by parameter name."""
    if not os.path.isdir(directory):
        raise HyperInvertError(f"Tensor directory not found: {directory}")
    tensors = {}
    for filename in sorted(os.listdir(directory)):
        if filename.endswith(TENSOR_SUFFIX):
            tensors[filename[:-len(TENSOR_SUFFIX)]] = read_tensor(os.path.join(directory, filename))
    return tensors


def read_sidecar(directory: str, filename: str) -> Any:
    path = os.path.join(directory, filename)
    if not os.path.exists(path):
        raise HyperInvertError(f"Missing {filename} in {directory}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
