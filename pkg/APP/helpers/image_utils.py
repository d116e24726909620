import os
import logging

import numpy as np
from PIL import Image

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("ImageUtils")


def to_uint8(images):
    """
    Converts a batch of images in [-1, 1] to uint8 HWC arrays

    Args:
        images: torch tensor or numpy array shaped (N, 3, H, W)

    Returns:
        np.ndarray: uint8 array shaped (N, H, W, 3)
    """
    if hasattr(images, "detach"):
        images = images.detach().cpu().float().numpy()
    images = np.asarray(images, dtype=np.float32)
    images = (np.clip(images, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(images).astype(np.uint8).transpose(0, 2, 3, 1)


def make_grid(rows, padding=2):
    """
    Tiles rows of image batches into one image

    Args:
        rows (list): Each entry is a batch (N, 3, H, W); all rows must share N, H and W
        padding (int): Pixels of white space between tiles

    Returns:
        PIL.Image: The grid (len(rows) tiles high, N tiles wide)
    """
    tiles = [to_uint8(row) for row in rows]
    n_rows = len(tiles)
    n_cols = tiles[0].shape[0]
    h, w = tiles[0].shape[1:3]
    for row in tiles:
        if row.shape[:3] != (n_cols, h, w):
            raise ValueError(f"Grid rows must share shape, got {row.shape[:3]} and {(n_cols, h, w)}")

    canvas = np.full(
        (n_rows * h + (n_rows + 1) * padding, n_cols * w + (n_cols + 1) * padding, 3),
        255, dtype=np.uint8,
    )
    for r, row in enumerate(tiles):
        for c in range(n_cols):
            top = padding + r * (h + padding)
            left = padding + c * (w + padding)
            canvas[top:top + h, left:left + w] = row[c]
    return Image.fromarray(canvas, "RGB")


def save_grid(rows, path, padding=2):
    """Saves a grid of image rows as PNG and returns the path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    grid = make_grid(rows, padding)
    grid.save(path, format="PNG")
    logger.debug(f"Saved {grid.size[0]}x{grid.size[1]} grid to {path}")
    return path
