"""Non-federated BottleGAN training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigError, InvalidInputError, TrainingDivergedError
from .losses import LossBatch, batch_codes, clip_weights, generator_terms, loss_disc
from .models import ModelBundle

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    width: int = 64
    depth: int = 5
    n_adain: int = 4
    code_dim: int = 32
    noise_sigma: float = 0.1
    disc_channels: tuple = (64, 128, 256)

    def build(self, style_ids, seed):
        return ModelBundle(style_ids, width=self.width, depth=self.depth, n_adain=self.n_adain,
                           code_dim=self.code_dim, noise_sigma=self.noise_sigma,
                           disc_channels=tuple(self.disc_channels), seed=seed)


@dataclass
class TrainConfig:
    steps: int = 1000
    n_stained: int = 4
    n_reference: int = 2
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple = (0.5, 0.999)
    n_disc: int = 3
    clip: float = 0.01
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    seed: int = 0
    crop: int = 48
    log_every: int = 10

    def validate(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        for name in ("n_stained", "n_reference", "n_disc", "crop", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_g <= 0 or self.lr_d <= 0 or self.clip <= 0:
            raise ConfigError("learning rates and clip bound must be positive")
        if self.lambda_cyc < 0 or self.lambda_idt < 0:
            raise ConfigError("loss weights must be non-negative")
        return self


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list = field(default_factory=list)


class _CropSampler:
    def __init__(self, images, crop, rng):
        self.images = [torch.from_numpy(np.ascontiguousarray(np.asarray(im, dtype=np.float32).transpose(2, 0, 1)))
                       for im in images]
        self.crop = min([crop] + [min(im.shape[1:]) for im in self.images])
        self.rng = rng

    def sample(self, n):
        idx = self.rng.integers(0, len(self.images), size=n)
        out = []
        for i in idx:
            im = self.images[i]
            top = self.rng.integers(0, im.shape[1] - self.crop + 1)
            left = self.rng.integers(0, im.shape[2] - self.crop + 1)
            out.append(im[:, top:top + self.crop, left:left + self.crop])
        return torch.stack(out), idx


def train_bottlegan(stained, reference, cfg=None, model_cfg=None, bundle=None, metrics_path=None):
    """Train a BottleGAN between stained OD images and reference OD images.

    Parameters
    ----------
    stained : list of (ndarray, int)
        ``(H x W x 3 OD image, style id)`` pairs.
    reference : list of ndarray
        Reference-style OD images.
    cfg : TrainConfig
    model_cfg : ModelConfig
        Used only when ``bundle`` is None.
    bundle : ModelBundle, optional
        Start from these parameters instead of a fresh initialization.
    metrics_path : path, optional
        Append one JSON record per logged step.

    Returns
    -------
    TrainResult
    """
    cfg = (cfg or TrainConfig()).validate()
    if not stained or not reference:
        raise InvalidInputError("training needs at least one stained and one reference image")
    images, ids = zip(*stained)
    ids = [int(i) for i in ids]
    if bundle is None:
        bundle = (model_cfg or ModelConfig()).build(sorted(set(ids)), seed=cfg.seed)
    history = []
    if cfg.steps == 0:
        return TrainResult(bundle, history)

    rng = np.random.default_rng(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    x_sampler = _CropSampler(images, cfg.crop, rng)
    c_sampler = _CropSampler(reference, cfg.crop, rng)
    ids = np.asarray(ids)

    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.lr_g, betas=tuple(cfg.betas), foreach=True)
    opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=cfg.lr_d, betas=tuple(cfg.betas), foreach=True)
    d_params = bundle.discriminator_parameters()
    clip_weights(d_params, cfg.clip)

    sink = open(metrics_path, "a") if metrics_path is not None else None
    try:
        for step in range(cfg.steps):
            for _ in range(cfg.n_disc):
                x, idx = x_sampler.sample(cfg.n_stained)
                batch = LossBatch(x, ids[idx].tolist(), c_sampler.sample(cfg.n_reference)[0])
                l_d = loss_disc(bundle, batch, generator=noise, training=True)
                if not torch.isfinite(l_d):
                    raise TrainingDivergedError(step)
                opt_d.zero_grad(set_to_none=True)
                l_d.backward()
                opt_d.step()
                clip_weights(d_params, cfg.clip)

            x, idx = x_sampler.sample(cfg.n_stained)
            batch = LossBatch(x, ids[idx].tolist(), c_sampler.sample(cfg.n_reference)[0])
            codes = batch_codes(bundle, batch, noise, training=True)
            terms = generator_terms(bundle, batch, codes=codes)
            l_g = terms["adv"] + cfg.lambda_cyc * terms["cyc"] + cfg.lambda_idt * terms["idt"]
            if not torch.isfinite(l_g):
                raise TrainingDivergedError(step)
            opt_g.zero_grad(set_to_none=True)
            l_g.backward()
            opt_g.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                record = {
                    "step": step,
                    "loss_disc": float(l_d.detach()),
                    "loss_gen": float(l_g.detach()),
                    "loss_adv": float(terms["adv"].detach()),
                    "loss_cyc": float(terms["cyc"].detach()),
                    "loss_idt": float(terms["idt"].detach()),
                }
                if not all(math.isfinite(v) for v in record.values()):
                    raise TrainingDivergedError(step)
                history.append(record)
                if sink is not None:
                    sink.write(json.dumps(record) + "\n")
                logger.debug("step %d: %s", step, record)
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(bundle, history)


def config_dict(cfg):
    return asdict(cfg)
