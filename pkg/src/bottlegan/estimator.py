"""scikit-learn style wrappers.

``BottleGAN.fit`` trains on RGB images with their style ids, ``transform``
normalizes to the reference style and ``inverse_transform`` restains.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidInputError
from .models import to_numpy, to_tensor
from .stain import MACENKO_ALPHA, MACENKO_BETA, macenko_estimate, od_to_rgb, rgb_to_od
from .trainer import ModelConfig, TrainConfig, train_bottlegan


def _check_images(X, name="X"):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise InvalidInputError(f"{name} must be RGB images of shape N x H x W x 3")
    if X.min() < 0.0 or X.max() > 1.0:
        raise InvalidInputError(f"{name} intensities must lie in [0, 1]")
    return X


def _check_ids(style_ids, n):
    ids = np.asarray(style_ids).reshape(-1)
    if ids.size == 1 and n > 1:
        ids = np.repeat(ids, n)
    if len(ids) != n:
        raise InvalidInputError("one style id per image is required")
    if not np.all(np.equal(np.mod(ids, 1), 0)):
        raise InvalidInputError("style ids must be integers")
    return ids.astype(np.int64)


class BottleGAN(TransformerMixin, BaseEstimator):
    """Many-one-many stain transfer between several styles and a reference.

    Parameters mirror :class:`~bottlegan.trainer.TrainConfig` and
    :class:`~bottlegan.trainer.ModelConfig`.

    Attributes
    ----------
    bundle_ : ModelBundle
    history_ : list of dict
    styles_ : ndarray of registered style ids
    """

    def __init__(self, steps=1000, crop=48, n_stained=4, n_reference=2, lr=2e-4, n_disc=3, clip=0.01,
                 lambda_cyc=10.0, lambda_idt=5.0, width=64, depth=5, n_adain=4, code_dim=32,
                 noise_sigma=0.1, random_state=0):
        self.steps = steps
        self.crop = crop
        self.n_stained = n_stained
        self.n_reference = n_reference
        self.lr = lr
        self.n_disc = n_disc
        self.clip = clip
        self.lambda_cyc = lambda_cyc
        self.lambda_idt = lambda_idt
        self.width = width
        self.depth = depth
        self.n_adain = n_adain
        self.code_dim = code_dim
        self.noise_sigma = noise_sigma
        self.random_state = random_state

    def _configs(self):
        train = TrainConfig(steps=self.steps, n_stained=self.n_stained, n_reference=self.n_reference,
                            lr_g=self.lr, lr_d=self.lr, n_disc=self.n_disc, clip=self.clip,
                            lambda_cyc=self.lambda_cyc, lambda_idt=self.lambda_idt,
                            seed=int(self.random_state), crop=self.crop)
        model = ModelConfig(width=self.width, depth=self.depth, n_adain=self.n_adain,
                            code_dim=self.code_dim, noise_sigma=self.noise_sigma)
        return train, model

    def fit(self, X, y, reference=None):
        """Train on styled images ``X`` with style ids ``y`` against ``reference`` images."""
        X = _check_images(X)
        ids = _check_ids(y, len(X))
        if reference is None:
            raise InvalidInputError("reference images are required")
        ref = _check_images(reference, "reference")
        train_cfg, model_cfg = self._configs()
        result = train_bottlegan(list(zip(rgb_to_od(X), ids.tolist())), list(rgb_to_od(ref)),
                                 train_cfg, model_cfg)
        self.bundle_ = result.bundle
        self.history_ = result.history
        self.styles_ = np.asarray(result.bundle.bank.ids)
        return self

    def _apply(self, X, style_ids, method):
        check_is_fitted(self, "bundle_")
        X = _check_images(X)
        ids = _check_ids(style_ids, len(X))
        out = getattr(self.bundle_, method)(to_tensor(rgb_to_od(X)), ids.tolist())
        return od_to_rgb(to_numpy(out))

    def transform(self, X, style_ids):
        """Normalize images in the given styles to the reference style."""
        return self._apply(X, style_ids, "normalize")

    def inverse_transform(self, X, style_ids):
        """Restain reference-style images into the given styles."""
        return self._apply(X, style_ids, "restain")

    def score(self, X, y):
        """Negative RGB cycle-reconstruction MSE."""
        from .evaluation import recon_mse

        check_is_fitted(self, "bundle_")
        X = _check_images(X)
        return -recon_mse(self.bundle_, X, _check_ids(y, len(X)).tolist())


class MacenkoEstimator(BaseEstimator):
    """Estimate one stain matrix per image; ``matrices_`` is N x 3 x 2."""

    def __init__(self, alpha=MACENKO_ALPHA, beta=MACENKO_BETA):
        self.alpha = alpha
        self.beta = beta

    def fit(self, X, y=None):
        X = _check_images(X)
        self.matrices_ = np.stack([macenko_estimate(im, self.alpha, self.beta) for im in X])
        return self
