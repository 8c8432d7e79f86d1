"""Toy nucleus segmentation network and the calibration-aware metrics."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import InvalidInputError, TrainingDivergedError


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


class SegNet(nn.Module):
    """Three-level encoder-decoder emitting 2-class logits per pixel.

    Input is an RGB batch in ``[0, 1]``; height and width must be
    divisible by 4.
    """

    def __init__(self, base=16, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.enc1 = nn.ModuleList([_conv(3, base), _conv(base, base)])
        self.enc2 = nn.ModuleList([_conv(base, 2 * base), _conv(2 * base, 2 * base)])
        self.mid = _conv(2 * base, 40)
        self.dec2 = _conv(40 + 2 * base, 2 * base)
        self.dec1 = _conv(2 * base + base, base)
        self.head = nn.Conv2d(base, 2, 1)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight[0].numel()
                    m.weight.normal_(0.0, np.sqrt(2.0 / fan_in), generator=g)
                    m.bias.zero_()

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % 4 or x.shape[3] % 4:
            raise InvalidInputError("SegNet expects N x 3 x H x W with H, W divisible by 4")
        h = x - 0.5
        for conv in self.enc1:
            h = F.relu(conv(h))
        s1 = h
        h = F.max_pool2d(h, 2)
        for conv in self.enc2:
            h = F.relu(conv(h))
        s2 = h
        h = F.relu(self.mid(F.max_pool2d(h, 2)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec2(torch.cat([h, s2], dim=1)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.dec1(torch.cat([h, s1], dim=1)))
        return self.head(h)


def seg_loss(model, images, masks):
    return F.cross_entropy(model(images), masks.long())


def seg_step(model, images, masks, lr):
    """One plain gradient-descent step on mean per-pixel cross-entropy."""
    loss = seg_loss(model, images, masks)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(0, "segmentation loss is not finite")
    model.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(p.grad, alpha=-lr)
    return float(loss.detach())


def compute_iou(pred_mask, gt_mask):
    """Foreground intersection over union; two empty masks score 1."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError("masks must have the same shape")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _flatten_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    probs = probs.reshape(-1, probs.shape[-1])
    if len(probs) != len(labels):
        raise InvalidInputError("one label per probability vector is required")
    return probs, labels


def compute_ece(probs, labels, n_bins=10):
    """Expected calibration error over equal-width confidence bins.

    ``probs`` has class probabilities on its last axis. Bin ``b`` holds
    confidences in ``(b / n_bins, (b + 1) / n_bins]``; zero goes to bin 0.
    """
    probs, labels = _flatten_probs(probs, labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    n = len(conf)
    ece = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            ece += sel.sum() / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


def compute_nll(probs, labels):
    probs, labels = _flatten_probs(probs, labels)
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p_true, 1e-12)).mean())


@torch.no_grad()
def predict_proba(model, images, batch_size=8):
    x = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images), dtype=torch.float32)
    out = [F.softmax(model(x[i:i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).permute(0, 2, 3, 1).double().numpy()


def evaluate_segmentation(model, images, masks):
    """Pooled IOU, ECE and NLL over every pixel of every image.

    ``images`` is an N x 3 x H x W RGB tensor, ``masks`` an N x H x W array.
    """
    probs = predict_proba(model, images)
    masks = np.asarray(masks)
    return {
        "iou": compute_iou(probs.argmax(-1) == 1, masks),
        "ece": compute_ece(probs, masks),
        "nll": compute_nll(probs, masks),
    }
