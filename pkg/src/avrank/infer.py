"""Full-image prediction: ordered overlapping patches, mean stitching, binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import ARTERY, VEIN, VESSEL, AVMask


@dataclass
class PatchGrid:
    origins: list  # (row, col), row-major
    patch: int
    stride: int
    padded_shape: tuple[int, int]
    shape: tuple[int, int]  # before padding


def _axis_origins(n: int, patch: int, stride: int) -> list[int]:
    last = n - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def make_grid(h: int, w: int, patch: int = 256, stride: int = 50) -> PatchGrid:
    if h < 1 or w < 1:
        raise ValueError("image must be non-empty")
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    ph, pw = max(h, patch), max(w, patch)
    rows = _axis_origins(ph, patch, stride)
    cols = _axis_origins(pw, patch, stride)
    return PatchGrid([(r, c) for r in rows for c in cols], patch, stride, (ph, pw), (h, w))


def pad_image(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Reflect-pad an (H, W, C) image at the bottom/right to the grid's padded shape."""
    h, w = image.shape[:2]
    ph, pw = grid.padded_shape
    pad = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect") if (ph, pw) != (h, w) else image


def extract_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    padded = pad_image(image, grid)
    p = grid.patch
    return np.stack([padded[r:r + p, c:c + p] for r, c in grid.origins])


def stitch(predictions, grid: PatchGrid) -> AVMask:
    """Average (3, patch, patch) predictions over their coverage and crop padding.

    ``predictions`` is a sequence aligned with ``grid.origins`` or a mapping
    origin -> prediction.
    """
    if isinstance(predictions, dict):
        items = list(predictions.items())
    else:
        predictions = list(predictions)
        if len(predictions) != len(grid.origins):
            raise ValueError(f"{len(predictions)} predictions for {len(grid.origins)} origins")
        items = list(zip(grid.origins, predictions))
    p = grid.patch
    first = np.asarray(items[0][1])
    acc = np.zeros((first.shape[0], *grid.padded_shape), dtype=np.float64)
    count = np.zeros(grid.padded_shape, dtype=np.int64)
    for (r, c), pred in items:
        acc[:, r:r + p, c:c + p] += np.asarray(pred, dtype=np.float64)
        count[r:r + p, c:c + p] += 1
    assert count.min() > 0, "grid leaves pixels uncovered"
    h, w = grid.shape
    out = (acc / count)[:, :h, :w]
    return AVMask(out.astype(np.float32), kind="probability")


def binarize(prob: AVMask) -> AVMask:
    """Vessel if p_vessel >= 0.5; vessel pixels go to the larger of artery/vein, ties to artery."""
    d = prob.data
    vessel = d[VESSEL] >= 0.5
    artery = vessel & (d[ARTERY] >= d[VEIN])
    vein = vessel & ~artery
    return AVMask.from_channels(artery, vein, vessel)


@torch.no_grad()
def predict_image(model, image: np.ndarray, patch: int = 256, stride: int = 50,
                  batch_size: int = 8) -> AVMask:
    """Run ``model`` over an (H, W, 3) image with the overlapping patch grid."""
    grid = make_grid(*image.shape[:2], patch=patch, stride=stride)
    patches = extract_patches(image, grid)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    try:
        for i in range(0, len(patches), batch_size):
            x = torch.as_tensor(patches[i:i + batch_size], dtype=dtype).permute(0, 3, 1, 2)
            preds.extend(model(x).cpu().numpy())
    finally:
        model.train(was_training)
    return stitch(preds, grid)
