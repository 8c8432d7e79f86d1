"""BottleGAN networks.

All tensors are NCHW optical-density images. The generators are pure
per-pixel maps (1x1 convolutions) conditioned through AdaIN on a style
code; the discriminators are PatchGAN critics.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import InvalidInputError, StyleLookupError

ADAIN_EPS = 1e-5
N_DOWN = 3
#: Smallest spatial size accepted by the discriminators.
MIN_DISC_SIZE = 2**N_DOWN


class StyleBank(nn.Module):
    """One trainable code per registered style id."""

    def __init__(self, style_ids, code_dim=32, noise_sigma=0.1, generator=None):
        super().__init__()
        ids = [int(i) for i in style_ids]
        if len(set(ids)) != len(ids) or not ids:
            raise InvalidInputError("style ids must be unique and non-empty")
        self.register_buffer("style_ids", torch.tensor(ids, dtype=torch.int64))
        self.register_buffer("noise_sigma", torch.tensor(float(noise_sigma)))
        self.codes = nn.Parameter(torch.randn(len(ids), code_dim, generator=generator))
        self._index = {sid: row for row, sid in enumerate(ids)}

    @property
    def ids(self):
        return list(self._index)

    def _load_from_state_dict(self, state_dict, prefix, *args, **kwargs):
        super()._load_from_state_dict(state_dict, prefix, *args, **kwargs)
        self._index = {int(sid): row for row, sid in enumerate(self.style_ids.tolist())}

    def rows(self, style_ids):
        try:
            return torch.tensor([self._index[int(s)] for s in style_ids], dtype=torch.int64)
        except KeyError as err:
            raise StyleLookupError(f"style id {err.args[0]} is not registered") from None

    def lookup(self, style_ids, generator=None, training=False):
        """Codes for a sequence of style ids, with Gaussian noise when training."""
        if isinstance(style_ids, (int, np.integer)):
            style_ids = [style_ids]
        codes = self.codes[self.rows(style_ids)]
        sigma = float(self.noise_sigma)
        if training and sigma > 0:
            noise = torch.randn(codes.shape, generator=generator, dtype=codes.dtype)
            codes = codes + sigma * noise
        return codes


def style_lookup(bank, style_id, rng=None, training=False):
    return bank.lookup([style_id], generator=rng, training=training)[0]


class AdaIN(nn.Module):
    """Code-dependent affine head of an adaptive instance normalization."""

    def __init__(self, channels, code_dim):
        super().__init__()
        self.affine = nn.Linear(code_dim, 2 * channels)

    def forward(self, code):
        scale, shift = self.affine(code).chunk(2, dim=1)
        return 1 + scale, shift


def linear_adain(a, weight, bias, gain, shift, stats=None):
    """``AdaIN(a @ weight.T + bias)`` computed without materializing the
    pre-normalization activations.

    ``a`` is ``(n, pixels, c_in)``. Per-image channel statistics of the
    linear output follow from the first two moments of ``a``, so the
    normalization folds into a per-image weight and bias. ``stats`` freezes
    ``(mean, var)`` of the linear output, each ``(n, c_out)``.
    """
    if stats is None:
        mu = a.mean(dim=1)
        second = torch.bmm(a.transpose(1, 2), a) / a.shape[1]
        cov = second - mu[:, :, None] * mu[:, None, :]
        mean = mu @ weight.T + bias
        var = (torch.matmul(weight, cov) * weight).sum(-1).clamp_min(0.0)
    else:
        mean, var = stats
    g = gain * torch.rsqrt(var + ADAIN_EPS)
    w_eff = g[:, :, None] * weight
    b_eff = g * (bias - mean) + shift
    return torch.baddbmm(b_eff[:, None, :], a, w_eff.transpose(1, 2)), (mean, var)


class Generator(nn.Module):
    """Per-pixel style-conditioned map between OD images.

    ``depth`` hidden 1x1 layers of ``width`` channels; AdaIN follows the
    first ``n_adain`` of them. Output is clamped to non-negative OD.
    Passing ``stats`` (as returned with ``return_stats=True``) freezes the
    instance statistics, which makes the map act on each pixel
    independently.
    """

    def __init__(self, width=64, depth=5, n_adain=4, code_dim=32, generator=None):
        super().__init__()
        if not 0 <= n_adain <= depth:
            raise InvalidInputError("n_adain must not exceed depth")
        chans = [3] + [width] * depth
        self.hidden = nn.ModuleList(nn.Conv2d(a, b, 1) for a, b in zip(chans[:-1], chans[1:]))
        self.adain = nn.ModuleList(AdaIN(width, code_dim) for _ in range(n_adain))
        self.out = nn.Conv2d(width, 3, 1)
        self.code_dim = code_dim
        _init_generator(self, generator)

    def forward(self, x, code, stats=None, return_stats=False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"expected N x 3 x H x W, got {tuple(x.shape)}")
        if code.ndim != 2 or code.shape != (x.shape[0], self.code_dim):
            raise InvalidInputError("one code of size code_dim per image is required")
        n, _, height, width = x.shape
        h = x.permute(0, 2, 3, 1).reshape(n, height * width, 3)
        used = []
        for i, conv in enumerate(self.hidden):
            weight, bias = conv.weight[:, :, 0, 0], conv.bias
            if i < len(self.adain):
                gain, shift = self.adain[i](code)
                h, s = linear_adain(h, weight, bias, gain, shift, None if stats is None else stats[i])
                used.append(s)
            else:
                h = F.linear(h, weight, bias)
            h = torch.tanh(h)
        y = F.linear(h, self.out.weight[:, :, 0, 0], self.out.bias).clamp_min(0.0)
        y = y.reshape(n, height, width, 3).permute(0, 3, 1, 2)
        return (y, used) if return_stats else y


def _init_generator(gen, generator):
    with torch.no_grad():
        for conv in gen.hidden:
            fan_in = conv.weight.shape[1]
            conv.weight.normal_(0.0, 1.0 / np.sqrt(fan_in), generator=generator)
            conv.bias.zero_()
        for ada in gen.adain:
            ada.affine.weight.normal_(0.0, 0.02, generator=generator)
            ada.affine.bias.zero_()
        gen.out.weight.normal_(0.0, 1e-3, generator=generator)
        gen.out.bias.zero_()


def generator_forward(gen, od_batch, codes, stats=None):
    return gen(od_batch, codes, stats=stats)


def disc_output_size(size, n_down=N_DOWN):
    """Spatial score-map size for an input of ``size`` pixels.

    Each 4x4/stride-2/pad-1 layer maps ``n`` to ``floor((n - 2) / 2) + 1``;
    the 3x3/pad-1 head keeps the size.
    """
    for _ in range(n_down):
        size = (size - 2) // 2 + 1
    return size


class PatchDiscriminator(nn.Module):
    """PatchGAN critic, optionally conditioned on a style code.

    The second downsampling layer is instance-normalized, which keeps the
    clipped critic's scores on a scale comparable to the L1 terms. When
    ``code_dim > 0`` the code is broadcast over the feature map of the last
    downsampling layer, concatenated, and fused by a 1x1 convolution.
    """

    def __init__(self, channels=(64, 128, 256), code_dim=0, generator=None):
        super().__init__()
        chans = [3, *channels]
        self.down = nn.ModuleList(
            nn.Conv2d(a, b, 4, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
        )
        self.code_dim = code_dim
        self.fuse = nn.Conv2d(channels[-1] + code_dim, channels[-1], 1) if code_dim else None
        self.head = nn.Conv2d(channels[-1], 1, 3, padding=1)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 1:
                    p.normal_(0.0, 0.02, generator=generator)
                else:
                    p.zero_()

    def forward(self, x, code=None):
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"expected N x 3 x H x W, got {tuple(x.shape)}")
        if min(x.shape[2:]) < MIN_DISC_SIZE:
            raise InvalidInputError(f"discriminator input must be at least {MIN_DISC_SIZE}x{MIN_DISC_SIZE}")
        h = x
        for i, conv in enumerate(self.down):
            h = conv(h)
            if i == 1:
                h = F.instance_norm(h)
            h = F.leaky_relu(h, 0.2)
        if self.fuse is not None:
            if code is None or code.shape != (x.shape[0], self.code_dim):
                raise InvalidInputError("conditional discriminator needs one code per image")
            tiled = code[:, :, None, None].expand(-1, -1, *h.shape[2:])
            h = F.leaky_relu(self.fuse(torch.cat([h, tiled], dim=1)), 0.2)
        return self.head(h)


def disc_c_forward(disc, od_image):
    return disc(od_image)


def disc_s_forward(disc, od_image, code):
    return disc(od_image, code)


class ModelBundle(nn.Module):
    """Both generators, both critics and the shared style bank.

    ``G_s`` restains reference-style images into a style; ``G_s_inv``
    normalizes a styled image back to the reference style.
    """

    GENERATOR_KEYS = ("G_s", "G_s_inv", "bank")

    def __init__(self, style_ids, width=64, depth=5, n_adain=4, code_dim=32, noise_sigma=0.1,
                 disc_channels=(64, 128, 256), seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.bank = StyleBank(style_ids, code_dim, noise_sigma, generator=g)
        self.G_s = Generator(width, depth, n_adain, code_dim, generator=g)
        self.G_s_inv = Generator(width, depth, n_adain, code_dim, generator=g)
        self.D_s = PatchDiscriminator(disc_channels, code_dim=code_dim, generator=g)
        self.D_c = PatchDiscriminator(disc_channels, generator=g)
        self.hparams = dict(width=width, depth=depth, n_adain=n_adain, code_dim=code_dim,
                            noise_sigma=noise_sigma, disc_channels=tuple(disc_channels))

    def generator_parameters(self):
        return [p for k in self.GENERATOR_KEYS for p in getattr(self, k).parameters()]

    def discriminator_parameters(self):
        return [*self.D_s.parameters(), *self.D_c.parameters()]

    @torch.no_grad()
    def normalize(self, od, style_ids):
        """Map OD images in the given styles to the reference style."""
        return self.G_s_inv(od, self.bank.lookup(style_ids))

    @torch.no_grad()
    def restain(self, od, style_ids):
        """Map reference-style OD images into the given styles."""
        return self.G_s(od, self.bank.lookup(style_ids))


def to_tensor(images, dtype=torch.float32):
    """Stack H x W x 3 arrays into an N x 3 x H x W tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    arr = np.stack([np.asarray(im) for im in images]) if isinstance(images, Sequence) else np.asarray(images)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_numpy(batch):
    return batch.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
