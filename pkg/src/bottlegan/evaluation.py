"""Stain-transfer evaluation: reconstruction error, Fréchet feature distance
and before/after image grids.

The Fréchet distance uses a fixed, randomly initialized convolutional
feature extractor (seed :data:`FEATURE_SEED`) rather than a pretrained
classifier, so absolute values are only comparable within this package.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from .exceptions import InvalidInputError
from .models import to_numpy, to_tensor
from .stain import od_to_rgb, rgb_to_od
from .synth import to_uint8

FEATURE_SEED = 20220917


def _as_batch(images):
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images]) if isinstance(images, (list, tuple)) \
        else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError("expected RGB images of shape N x H x W x 3")
    return arr


def _ids(style_ids, n):
    if np.isscalar(style_ids):
        return [int(style_ids)] * n
    ids = [int(s) for s in style_ids]
    if len(ids) != n:
        raise InvalidInputError("one style id per image is required")
    return ids


def _dtype(bundle):
    try:
        return next(bundle.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


def cycle_reconstruct(bundle, images, style_ids):
    """Normalize then restain RGB images; returns (normalized, restained) RGB."""
    rgb = _as_batch(images)
    ids = _ids(style_ids, len(rgb))
    od = to_tensor(rgb_to_od(rgb), dtype=_dtype(bundle))
    normalized = bundle.normalize(od, ids)
    restained = bundle.restain(normalized, ids)
    return od_to_rgb(to_numpy(normalized)), od_to_rgb(to_numpy(restained))


def recon_mse(bundle, images, style_ids, space="rgb"):
    """Mean over images of the per-image MSE of ``G_s(G_s_inv(x | e) | e)``.

    ``space`` selects RGB intensities (default) or optical density.
    """
    rgb = _as_batch(images)
    _, restained = cycle_reconstruct(bundle, rgb, style_ids)
    if space == "rgb":
        err = (restained - rgb) ** 2
    elif space == "od":
        err = (rgb_to_od(restained) - rgb_to_od(rgb)) ** 2
    else:
        raise InvalidInputError(f"unknown space {space!r}")
    return float(err.reshape(len(rgb), -1).mean(axis=1).mean())


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b):
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, with the
    cross term evaluated as ``tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`` using
    symmetric eigendecompositions and negative eigenvalues clamped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise InvalidInputError("need at least two samples per feature set")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _sqrtm_psd(cov_a)
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross
    return float(max(value, 0.0))


class RandomFeatures(nn.Module):
    """Fixed random conv stack; every spatial cell of the last map is a sample."""

    def __init__(self, seed=FEATURE_SEED, width=32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList(
            [nn.Conv2d(3, width, 3, stride=2, padding=1), nn.Conv2d(width, width, 3, stride=2, padding=1),
             nn.Conv2d(width, width, 3, stride=2, padding=1)]
        )
        with torch.no_grad():
            for conv in self.convs:
                conv.weight.normal_(0.0, np.sqrt(2.0 / conv.weight[0].numel()), generator=g)
                conv.bias.normal_(0.0, 0.1, generator=g)
        self.double()
        self.requires_grad_(False)

    def forward(self, x):
        h = x - 0.5
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return h.permute(0, 2, 3, 1).reshape(-1, h.shape[1])


_FEATURES = None


def extract_features(images):
    """Feature vectors for RGB images (one per cell of the 1/8-resolution map)."""
    global _FEATURES
    if _FEATURES is None:
        _FEATURES = RandomFeatures()
    with torch.no_grad():
        return _FEATURES(to_tensor(_as_batch(images), dtype=torch.float64)).numpy()


def image_frechet(images_a, images_b):
    return frechet_distance(extract_features(images_a), extract_features(images_b))


def emit_grid(bundle, images, style_ids, path):
    """Write a 3-row PNG: targets, normalized, restained.

    Returns the grid as an ``(3H, nW, 3)`` uint8 array.
    """
    rgb = _as_batch(images)
    normalized, restained = cycle_reconstruct(bundle, rgb, style_ids)
    rows = [np.concatenate(list(panel), axis=1) for panel in (rgb, normalized, restained)]
    grid = to_uint8(np.concatenate(rows, axis=0))
    Image.fromarray(grid).save(path, format="PNG")
    return grid


def append_records(path, records):
    """Append evaluation records ``{metric, split, value, step}`` as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
