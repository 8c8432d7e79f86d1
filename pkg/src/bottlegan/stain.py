"""Beer-Lambert optical-density arithmetic and stain-matrix estimation.

Images are float arrays with channels last and transmitted intensity in
``[0, 1]`` (white = 1). Optical density (OD) is ``-ln(I)`` with the incident
intensity fixed to 1.

Concentration maps are stored in *relative* units: each channel lies in
``[0, 1]`` and is scaled by the style's ``c_max`` at render time, so one
content image can be rendered at different dye strengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (
    DegenerateInputError,
    InsufficientTissueError,
    InvalidInputError,
)

#: Intensity floor, one 8-bit quantization level.
EPS = 1.0 / 255.0
#: Largest representable optical density, ``-ln(EPS)``.
OD_MAX = float(-np.log(EPS))

MACENKO_ALPHA = 1.0
MACENKO_BETA = 0.15


def rgb_to_od(img, eps=EPS):
    """Convert intensities in ``[0, 1]`` to optical density."""
    img = np.asarray(img, dtype=np.float64)
    if not 0.0 < eps <= 1e-2:
        raise InvalidInputError(f"eps must lie in (0, 1e-2], got {eps}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    return -np.log(np.clip(img, eps, 1.0))


def od_to_rgb(od):
    """Inverse of :func:`rgb_to_od`; output clamped to ``[0, 1]``."""
    od = np.asarray(od, dtype=np.float64)
    if not np.all(np.isfinite(od)):
        raise InvalidInputError("optical density contains non-finite values")
    if np.any(od < 0):
        raise InvalidInputError("optical density must be non-negative")
    return np.clip(np.exp(-od), 0.0, 1.0)


def _unit_columns(matrix):
    matrix = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, None)
    norms = np.linalg.norm(matrix, axis=0)
    if np.any(norms <= 0):
        raise DegenerateInputError("stain vector collapsed to zero")
    return matrix / norms


def _blueness(vector):
    # A dye looks blue when it absorbs red more than blue.
    return vector[0] - vector[2]


def order_he(matrix):
    """Order columns so that column 0 is hematoxylin.

    Hematoxylin is the visually bluer dye, i.e. the column with the larger
    red-minus-blue optical density. Ties go to the larger red component.
    """
    h, e = matrix[:, 0], matrix[:, 1]
    key_h, key_e = (_blueness(h), h[0]), (_blueness(e), e[0])
    if key_e > key_h:
        return matrix[:, ::-1].copy()
    return matrix.copy()


def angular_error(a, b):
    """Per-column angle in degrees between two ``3 x k`` matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = np.sum(a * b, axis=0) / (np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class StainStyle:
    """Ground-truth staining style: stain vectors, dye strength and noise.

    Attributes
    ----------
    matrix : ndarray of shape (3, 2)
        Unit-norm, non-negative OD vectors of hematoxylin (column 0) and
        eosin (column 1).
    c_max : ndarray of shape (2,)
        Concentration reached by a relative concentration of 1.
    sigma_matrix : float
        Std of the Gaussian noise added to matrix entries by
        :func:`perturb_style`.
    sigma_od : float
        Std of the per-pixel OD noise added when rendering.
    """

    matrix: np.ndarray
    c_max: np.ndarray = field(default_factory=lambda: np.ones(2))
    sigma_matrix: float = 0.0
    sigma_od: float = 0.0

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        c_max = np.array(self.c_max, dtype=np.float64)
        if matrix.shape != (3, 2):
            raise InvalidInputError(f"stain matrix must be 3x2, got {matrix.shape}")
        if np.any(matrix < 0) or not np.allclose(np.linalg.norm(matrix, axis=0), 1.0, atol=1e-6):
            raise InvalidInputError("stain matrix columns must be non-negative and unit norm")
        if c_max.shape != (2,) or np.any(c_max <= 0):
            raise InvalidInputError("c_max must be two positive values")
        if self.sigma_matrix < 0 or self.sigma_od < 0:
            raise InvalidInputError("noise scales must be non-negative")
        matrix.setflags(write=False)
        c_max.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "c_max", c_max)

    @classmethod
    def from_vectors(cls, hematoxylin, eosin, c_max=(1.0, 1.0), **kwargs):
        matrix = _unit_columns(np.column_stack([hematoxylin, eosin]))
        return cls(matrix=matrix, c_max=c_max, **kwargs)

    def __eq__(self, other):
        if not isinstance(other, StainStyle):
            return NotImplemented
        return (
            np.array_equal(self.matrix, other.matrix)
            and np.array_equal(self.c_max, other.c_max)
            and self.sigma_matrix == other.sigma_matrix
            and self.sigma_od == other.sigma_od
        )

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "c_max": self.c_max.tolist(),
            "sigma_matrix": float(self.sigma_matrix),
            "sigma_od": float(self.sigma_od),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            matrix=np.array(data["matrix"]),
            c_max=np.array(data["c_max"]),
            sigma_matrix=float(data["sigma_matrix"]),
            sigma_od=float(data["sigma_od"]),
        )


# Basis version 1. Style 0 uses the widely quoted Macenko reference vectors;
# style 1 the Ruifrok-Johnston H&E vectors; styles 2-4 are hand-tuned
# purple-shifted, faded and eosin-heavy variants.
REFERENCE_BASIS_VERSION = 1
_BASIS = [
    ((0.5626, 0.7201, 0.4062), (0.2159, 0.8012, 0.5581), (1.6, 1.0)),
    ((0.6500, 0.7040, 0.2860), (0.0720, 0.9900, 0.1050), (1.8, 1.1)),
    ((0.5000, 0.7800, 0.3800), (0.3000, 0.8000, 0.5200), (2.0, 1.3)),
    ((0.6000, 0.6800, 0.4200), (0.1200, 0.8600, 0.5000), (1.1, 0.7)),
    ((0.4600, 0.8000, 0.3800), (0.1800, 0.7000, 0.6900), (1.5, 1.5)),
]


def reference_basis():
    """The five built-in H&E styles; index 0 is the canonical reference."""
    return [StainStyle.from_vectors(h, e, c_max=c) for h, e, c in _BASIS]


def reference_style():
    return reference_basis()[0]


def _check_concentrations(conc):
    conc = np.asarray(conc, dtype=np.float64)
    if conc.ndim != 3 or conc.shape[-1] != 2:
        raise InvalidInputError(f"concentrations must be H x W x 2, got {conc.shape}")
    if not np.all(np.isfinite(conc)) or conc.min() < 0 or conc.max() > 1:
        raise InvalidInputError("relative concentrations must lie in [0, 1]")
    return conc


def concentrations_to_od(conc, style):
    """Noise-free forward model ``(conc * c_max) @ matrix.T``."""
    conc = _check_concentrations(conc)
    return (conc * style.c_max) @ style.matrix.T


def render_from_concentrations(conc, style, rng=None):
    """Render a relative concentration map into an RGB image.

    Per-pixel Gaussian OD noise with std ``style.sigma_od`` is added and the
    result clamped at zero. With ``sigma_od == 0`` the map is deterministic
    and ``rng`` may be omitted.
    """
    od = concentrations_to_od(conc, style)
    if style.sigma_od > 0:
        if rng is None:
            raise InvalidInputError("an rng is required when sigma_od > 0")
        od = od + rng.normal(0.0, style.sigma_od, size=od.shape)
    return od_to_rgb(np.clip(od, 0.0, None))


def macenko_estimate(img, alpha=MACENKO_ALPHA, beta=MACENKO_BETA, min_pixels=64):
    """Estimate the 3x2 stain matrix of an RGB image.

    Pixels with OD norm above ``beta`` are projected onto the plane of the
    two leading singular vectors of the OD cloud; the stain vectors are the
    directions at the ``alpha`` and ``100 - alpha`` angle percentiles.

    Raises
    ------
    InsufficientTissueError
        Fewer than ``min_pixels`` pixels pass the threshold.
    DegenerateInputError
        The significant pixels do not span a plane.
    """
    od = rgb_to_od(img).reshape(-1, 3)
    od = od[np.linalg.norm(od, axis=1) > beta]
    if len(od) < min_pixels:
        raise InsufficientTissueError(
            f"{len(od)} pixels exceed OD norm {beta}; need at least {min_pixels}"
        )

    # Uncentred second moment: stain mixtures span a plane through the origin.
    eigvals, eigvecs = np.linalg.eigh(od.T @ od / len(od))
    if eigvals[1] <= 1e-10 * eigvals[2]:
        raise DegenerateInputError("OD cloud is rank deficient")
    plane = eigvecs[:, [2, 1]]
    plane *= np.where(plane.sum(axis=0) < 0, -1.0, 1.0)

    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])
    return order_he(_unit_columns(np.column_stack([v1, v2])))


def mix_styles(styles, weights):
    """Convex combination of styles with re-normalized stain vectors."""
    if len(styles) == 0:
        raise InvalidInputError("need at least one style to mix")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(styles),):
        raise InvalidInputError("one weight per style is required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InvalidInputError("weights must be non-negative and sum to 1")

    nz = np.flatnonzero(weights)
    if len(nz) == 1:
        return styles[nz[0]]
    matrix = sum(w * s.matrix for w, s in zip(weights, styles))
    return StainStyle(
        matrix=_unit_columns(matrix),
        c_max=sum(w * s.c_max for w, s in zip(weights, styles)),
        sigma_matrix=float(sum(w * s.sigma_matrix for w, s in zip(weights, styles))),
        sigma_od=float(sum(w * s.sigma_od for w, s in zip(weights, styles))),
    )


def perturb_style(style, rng):
    """Add entry-wise Gaussian noise to the stain matrix and re-normalize."""
    if style.sigma_matrix == 0:
        return style
    noisy = style.matrix + rng.normal(0.0, style.sigma_matrix, size=style.matrix.shape)
    noisy = np.clip(noisy, 0.0, None)
    # A column clipped to all-zero falls back to the unperturbed vector.
    dead = np.linalg.norm(noisy, axis=0) == 0
    noisy[:, dead] = style.matrix[:, dead]
    return replace(style, matrix=_unit_columns(noisy))
