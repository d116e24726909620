"""Helpers to find Pillow-supported images and load them as model inputs.

Deterministic: computes the supported extensions from PIL.Image.registered_extensions()
at import time so callers can rely on a stable set without trying to open files.
"""
import os

import numpy as np
import torch
from PIL import Image

from APP.helpers.errors import HyperInvertError

# Build a set of lowercase extensions that Pillow recognizes (keys of registered_extensions())
PIL_EXTENSIONS = set(k.lower() for k in Image.registered_extensions().keys())


def extension_supported(path_or_ext):
    """Check if a path or extension is supported by Pillow deterministically.

    Accepts either a filename/path or a string extension (with or without leading dot).
    Returns True/False without attempting to open the file.
    """
    if not path_or_ext:
        return False
    ext = path_or_ext
    if not ext.startswith('.') and len(ext) > 1:
        # Possibly a filename
        ext = os.path.splitext(ext)[1]
    return ext.lower() in PIL_EXTENSIONS


def list_images(path):
    """Return the sorted image files of a directory, or [path] for a single file."""
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise HyperInvertError(f"Image path not found: {path}")
    return sorted(
        os.path.join(path, name) for name in os.listdir(path)
        if extension_supported(name) and os.path.isfile(os.path.join(path, name))
    )


def load_images(path, resolution):
    """Load images as a float tensor (N, 3, resolution, resolution) in [-1, 1].

    Images are converted to RGB and resized with bicubic filtering.
    """
    files = list_images(path)
    if not files:
        raise HyperInvertError(f"No supported images found in {path}")
    arrays = []
    for file in files:
        with Image.open(file) as img:
            img = img.convert("RGB").resize((resolution, resolution), Image.BICUBIC)
            arrays.append(np.asarray(img, dtype=np.float32))
    batch = np.stack(arrays).transpose(0, 3, 1, 2) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(batch))
