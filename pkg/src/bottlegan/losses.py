"""Critic and generator objectives for non-federated BottleGAN training.

Notation: ``x`` holds N stained images with style ids, ``c`` holds M
reference images, ``e_i`` is the code of ``x_i``. Every stained image is
paired with every reference image for the restaining terms, so those terms
average over N * M pairs. Score maps are reduced by their mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.func import functional_call

from .exceptions import InvalidInputError


@dataclass
class LossBatch:
    x: torch.Tensor
    style_ids: list
    c: torch.Tensor

    def __post_init__(self):
        if len(self.x) < 1 or len(self.c) < 1:
            raise InvalidInputError("a loss batch needs N >= 1 and M >= 1")
        if len(self.style_ids) != len(self.x):
            raise InvalidInputError("one style id per stained image is required")

    @property
    def N(self):
        return len(self.x)

    @property
    def M(self):
        return len(self.c)


def _pairs(codes, c):
    # Row i * M + j pairs code e_i with reference image c_j.
    M = len(c)
    return codes.repeat_interleave(M, dim=0), c.repeat(len(codes), 1, 1, 1)


def _frozen(module, *args):
    params = {name: p.detach() for name, p in module.named_parameters()}
    return functional_call(module, params, args)


def batch_codes(bundle, batch, generator=None, training=False):
    return bundle.bank.lookup(batch.style_ids, generator=generator, training=training)


def loss_disc(bundle, batch, codes=None, generator=None, training=False):
    """Critic loss; gradients reach only ``D_s`` and ``D_c``."""
    with torch.no_grad():
        if codes is None:
            codes = batch_codes(bundle, batch, generator, training)
        codes = codes.detach()
        pair_codes, pair_c = _pairs(codes, batch.c)
        fake_x = bundle.G_s(pair_c, pair_codes)
        fake_c = bundle.G_s_inv(batch.x, codes)
    # Both critics score each image independently, so fake and real go
    # through in one call.
    s = bundle.D_s(torch.cat([fake_x, batch.x]), torch.cat([pair_codes, codes]))
    c = bundle.D_c(torch.cat([fake_c, batch.c]))
    nm = len(fake_x)
    return s[:nm].mean() + c[:batch.N].mean() - s[nm:].mean() - c[batch.N:].mean()


def generator_terms(bundle, batch, codes=None, generator=None, training=False):
    """Adversarial, cycle and identity terms sharing one forward pass.

    Discriminator parameters are detached, so these terms only produce
    gradients for the generators and the style bank.
    """
    if codes is None:
        codes = batch_codes(bundle, batch, generator, training)
    pair_codes, pair_c = _pairs(codes, batch.c)
    nm = len(pair_c)

    out_s = bundle.G_s(torch.cat([pair_c, batch.x]), torch.cat([pair_codes, codes]))
    out_inv = bundle.G_s_inv(torch.cat([batch.x, pair_c]), torch.cat([codes, pair_codes]))
    fake_x, idt_x = out_s[:nm], out_s[nm:]
    fake_c, idt_c = out_inv[:batch.N], out_inv[batch.N:]
    rec_x = bundle.G_s(fake_c, codes)
    rec_c = bundle.G_s_inv(fake_x, pair_codes)

    adv = -_frozen(bundle.D_s, fake_x, pair_codes).mean() - _frozen(bundle.D_c, fake_c).mean()
    cyc = (rec_x - batch.x).abs().mean() + (rec_c - pair_c).abs().mean()
    idt = (idt_c - pair_c).abs().mean() + (idt_x - batch.x).abs().mean()
    return {"adv": adv, "cyc": cyc, "idt": idt}


def loss_gen(bundle, batch, lambda_cyc=10.0, lambda_idt=5.0, codes=None, generator=None, training=False):
    if lambda_cyc < 0 or lambda_idt < 0:
        raise InvalidInputError("loss weights must be non-negative")
    t = generator_terms(bundle, batch, codes, generator, training)
    return t["adv"] + lambda_cyc * t["cyc"] + lambda_idt * t["idt"]


def loss_cyc(bundle, batch, codes=None, generator=None, training=False):
    return generator_terms(bundle, batch, codes, generator, training)["cyc"]


def loss_idt(bundle, batch, codes=None, generator=None, training=False):
    return generator_terms(bundle, batch, codes, generator, training)["idt"]


@torch.no_grad()
def clip_weights(params, bound):
    for p in params:
        p.clamp_(-bound, bound)
