"""Whole-volume prediction by overlapping tiles."""

from __future__ import annotations

import numpy as np

from .data import pad_to
from .model import UXNet, infer_probs
from .tensor import Tensor
from .volumes import _array


def tile_starts(extent: int, patch: int, overlap: float) -> list[int]:
    """Tile origins with stride ``patch * (1 - overlap)``; the last tile ends at ``extent``."""
    if extent <= patch:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def sliding_window_infer(model: UXNet, image, patch=None, overlap: float = 0.5, batch: int = 4) -> np.ndarray:
    """Class probabilities ``(K, H, W, D)`` averaged uniformly over covering tiles."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    cfg = model.config
    patch = tuple(patch or cfg.patch_size)
    x = np.asarray(_array(image), dtype=model.dtype)
    if x.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {x.shape}")
    shape = x.shape
    xp = pad_to(x, patch)
    grids = [tile_starts(e, p, overlap) for e, p in zip(xp.shape, patch)]
    origins = [(a, b, c) for a in grids[0] for b in grids[1] for c in grids[2]]
    acc = np.zeros((cfg.num_classes, *xp.shape), dtype=np.float64)
    cnt = np.zeros(xp.shape, dtype=np.float64)
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        tiles = np.stack([xp[a:a + patch[0], b:b + patch[1], c:c + patch[2]] for a, b, c in chunk])
        probs = infer_probs(model, Tensor(tiles[:, None]))
        for (a, b, c), p in zip(chunk, probs):
            acc[:, a:a + patch[0], b:b + patch[1], c:c + patch[2]] += p
            cnt[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += 1
    out = acc / cnt
    return out[:, :shape[0], :shape[1], :shape[2]].astype(model.dtype)


def predict_labels(model: UXNet, image, patch=None, overlap: float = 0.5) -> np.ndarray:
    return sliding_window_infer(model, image, patch, overlap).argmax(axis=0).astype(np.int32)
