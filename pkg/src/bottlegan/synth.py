"""Procedural tissue content and synthetic federations.

Content is generated in relative concentration units (see
:mod:`bottlegan.stain`) and rendered per client with that client's
ground-truth :class:`~bottlegan.stain.StainStyle`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigError, InvalidInputError
from .stain import (
    StainStyle,
    mix_styles,
    perturb_style,
    reference_basis,
    reference_style,
    render_from_concentrations,
)

NUCLEUS_THRESHOLD = 0.5
# Seed bands: client k, item i -> seed * 10**6 + k * 10**3 + i.
_SEED_STRIDE = 10**6
_CLIENT_STRIDE = 10**3
_TEST_OFFSET = 500
_REFERENCE_BAND = 900_000
_STYLE_BAND = 990_000

LABEL_MIN, LABEL_MAX = 1, 11


@dataclass
class ContentSample:
    """Relative concentration map with its nucleus mask."""

    conc: np.ndarray
    label: np.ndarray


@dataclass
class ClientDataset:
    style_id: int
    style: StainStyle
    samples: list
    images: list
    test_samples: list
    test_images: list
    labeled: bool = False
    n_labeled: int = 0

    @property
    def labeled_pairs(self):
        """(image, mask) pairs whose labels the client may use."""
        return [(self.images[i], self.samples[i].label) for i in range(self.n_labeled)]


@dataclass
class FederationDataset:
    clients: list
    reference: list
    reference_images: list

    @property
    def styles(self):
        return [c.style for c in self.clients]


@dataclass
class FederationConfig:
    clients: int = 8
    label_budget: int = 24
    samples_per_client: int = 12
    test_per_client: int = 2
    reference_size: int = 16
    image_size: int = 96
    density: float = 1.0
    mix_concentration: float = 0.3
    sigma_matrix: float = 0.05
    sigma_od: float = 0.02

    def validate(self):
        n_labeled = math.ceil(self.clients / 2)
        if self.clients < 2:
            raise ConfigError("a federation needs at least two clients")
        if not n_labeled * LABEL_MIN <= self.label_budget <= n_labeled * LABEL_MAX:
            raise ConfigError(
                f"label budget {self.label_budget} infeasible for {n_labeled} labeled "
                f"clients with {LABEL_MIN}..{LABEL_MAX} patches each"
            )
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        return self


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def gen_content(seed, H=96, W=96, density=1.0):
    """Generate one tissue-like content sample.

    Hematoxylin is high inside elliptical nuclei and low elsewhere; eosin
    fills a smooth stromal texture that is suppressed inside nuclei and in
    background lumen. The label is exactly ``hematoxylin > NUCLEUS_THRESHOLD``.
    """
    if H < 16 or W < 16:
        raise InvalidInputError("content must be at least 16x16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    n_nuclei = max(1, rng.poisson(density * H * W / 300.0))
    bump = np.zeros((H, W))
    for _ in range(n_nuclei):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        a = rng.uniform(2.5, 6.0)
        b = a * rng.uniform(0.55, 1.0)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(t) + dy * np.sin(t)) / a
        v = (-dx * np.sin(t) + dy * np.cos(t)) / b
        bump = np.maximum(bump, 1.0 - (u * u + v * v))

    texture = _smooth_field(rng, (H, W), sigma=2.0)
    nucleus = bump > 0
    hema = 0.12 + 0.05 * texture
    hema = np.where(nucleus, 0.55 + 0.4 * bump + 0.05 * texture, hema)
    hema = np.clip(hema, 0.0, 1.0)

    stroma = _smooth_field(rng, (H, W), sigma=6.0)
    lumen = stroma < -1.2
    eosin = np.clip(0.55 + 0.2 * _smooth_field(rng, (H, W), sigma=3.0), 0.0, 1.0)
    eosin = np.where(lumen, 0.03, eosin)
    eosin = np.where(nucleus, 0.15 * eosin, eosin)
    hema = np.where(lumen & ~nucleus, 0.02, hema)

    conc = np.clip(np.stack([hema, eosin], axis=-1), 0.0, 1.0)
    label = (conc[..., 0] > NUCLEUS_THRESHOLD).astype(np.uint8)
    return ContentSample(conc=conc, label=label)


def _seed(seed, band, i):
    return seed * _SEED_STRIDE + band + i


def build_reference_set(cfg, seed):
    """Public reference set C rendered in the canonical noise-free style."""
    style = reference_style()
    samples = [
        gen_content(_seed(seed, _REFERENCE_BAND, i), cfg.image_size, cfg.image_size, cfg.density)
        for i in range(cfg.reference_size)
    ]
    images = [render_from_concentrations(s.conc, style) for s in samples]
    return samples, images


def distribute_labels(n_labeled, budget, rng):
    """Split ``budget`` patches over clients, each receiving 1..11.

    Raw counts are drawn uniformly from ``[1, 11]`` and rescaled to sum to
    the budget with largest-remainder rounding, then repaired into range.
    """
    if not n_labeled * LABEL_MIN <= budget <= n_labeled * LABEL_MAX:
        raise ConfigError(f"cannot split {budget} patches over {n_labeled} clients")
    raw = rng.integers(LABEL_MIN, LABEL_MAX + 1, size=n_labeled).astype(np.float64)
    target = raw * budget / raw.sum()
    counts = np.floor(target).astype(int)
    order = np.argsort(-(target - counts), kind="stable")
    counts[order[: budget - counts.sum()]] += 1
    counts = np.clip(counts, LABEL_MIN, LABEL_MAX)
    while counts.sum() > budget:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < budget:
        counts[np.argmin(counts)] += 1
    return counts


def client_style(basis, rng, cfg):
    weights = rng.dirichlet(np.full(len(basis), cfg.mix_concentration))
    base = mix_styles(basis, weights)
    base = StainStyle(base.matrix, base.c_max, sigma_matrix=cfg.sigma_matrix, sigma_od=cfg.sigma_od)
    return perturb_style(base, rng)


def build_federation(cfg, seed):
    """Build a federation; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    K = cfg.clients
    rng = np.random.default_rng(_seed(seed, _STYLE_BAND, 0))
    basis = reference_basis()
    styles = [client_style(basis, rng, cfg) for _ in range(K)]

    n_labeled = math.ceil(K / 2)
    labeled_ids = np.sort(rng.permutation(K)[:n_labeled])
    counts = dict(zip(labeled_ids.tolist(), distribute_labels(n_labeled, cfg.label_budget, rng).tolist()))

    clients = []
    size = cfg.image_size
    for k in range(K):
        n_lab = counts.get(k, 0)
        n_train = max(cfg.samples_per_client, n_lab)
        samples = [gen_content(_seed(seed, k * _CLIENT_STRIDE, i), size, size, cfg.density) for i in range(n_train)]
        tests = [
            gen_content(_seed(seed, k * _CLIENT_STRIDE, _TEST_OFFSET + i), size, size, cfg.density)
            for i in range(cfg.test_per_client)
        ]
        render_rng = np.random.default_rng(_seed(seed, k * _CLIENT_STRIDE, _CLIENT_STRIDE - 1))
        clients.append(
            ClientDataset(
                style_id=k,
                style=styles[k],
                samples=samples,
                images=[render_from_concentrations(s.conc, styles[k], render_rng) for s in samples],
                test_samples=tests,
                test_images=[render_from_concentrations(s.conc, styles[k], render_rng) for s in tests],
                labeled=n_lab > 0,
                n_labeled=n_lab,
            )
        )
    ref_samples, ref_images = build_reference_set(cfg, seed)
    return FederationDataset(clients=clients, reference=ref_samples, reference_images=ref_images)


# -- on-disk layout ---------------------------------------------------------


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_federation(fed, cfg, seed, out):
    """Write one directory per client plus the reference set and a manifest."""
    out = Path(out)
    manifest = {"seed": seed, "config": asdict(cfg), "clients": []}
    for client in fed.clients:
        cdir = out / "clients" / str(client.style_id)
        cdir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(client.images):
            write_png(cdir / f"train_{i:03d}.png", img)
        for i in range(client.n_labeled):
            Image.fromarray(client.samples[i].label * 255).save(cdir / f"label_{i:03d}.png")
        for i, (img, s) in enumerate(zip(client.test_images, client.test_samples)):
            write_png(cdir / f"test_{i:03d}.png", img)
            Image.fromarray(s.label * 255).save(cdir / f"testlabel_{i:03d}.png")
        style = {"style_id": client.style_id, **client.style.to_dict()}
        (cdir / "style.json").write_text(json.dumps(style, indent=2))
        manifest["clients"].append(
            {
                "style_id": client.style_id,
                "labeled": client.labeled,
                "n_labeled": client.n_labeled,
                "n_train": len(client.images),
                "n_test": len(client.test_images),
            }
        )
    rdir = out / "reference"
    rdir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(fed.reference_images):
        write_png(rdir / f"ref_{i:03d}.png", img)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def _read_mask(path):
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def load_federation(root):
    """Read a federation written by :func:`save_federation`.

    Concentration maps are not stored on disk, so loaded samples carry
    ``conc=None``; images are 8-bit quantized.
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    clients = []
    for entry in manifest["clients"]:
        cdir = root / "clients" / str(entry["style_id"])
        style_info = json.loads((cdir / "style.json").read_text())
        images = [read_png(cdir / f"train_{i:03d}.png") for i in range(entry["n_train"])]
        samples = []
        for i in range(entry["n_train"]):
            label_path = cdir / f"label_{i:03d}.png"
            label = _read_mask(label_path) if i < entry["n_labeled"] else None
            samples.append(ContentSample(conc=None, label=label))
        tests = [read_png(cdir / f"test_{i:03d}.png") for i in range(entry["n_test"])]
        test_samples = [
            ContentSample(conc=None, label=_read_mask(cdir / f"testlabel_{i:03d}.png"))
            for i in range(entry["n_test"])
        ]
        clients.append(
            ClientDataset(
                style_id=entry["style_id"],
                style=StainStyle.from_dict(style_info),
                samples=samples,
                images=images,
                test_samples=test_samples,
                test_images=tests,
                labeled=entry["labeled"],
                n_labeled=entry["n_labeled"],
            )
        )
    refs = sorted((root / "reference").glob("ref_*.png"))
    return FederationDataset(clients=clients, reference=[], reference_images=[read_png(p) for p in refs]), manifest
