"""scikit-learn style wrapper: ``fit(lr_images, hr_images)``, ``predict``, ``score``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DatasetManifest
from .exceptions import ShapeError
from .imaging import evaluate_pair, quantize, to_float
from .nn import ModelConfig, build_pan
from .training import TrainConfig, Trainer, super_resolve


def check_image(img, name="image") -> np.ndarray:
    """Validate one (H, W, 3) image and return it as unit-range float32."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name}: expected (H, W, 3), got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"{name}: empty image")
    if arr.dtype == np.uint8:
        return to_float(arr, np.float32)
    if not np.issubdtype(arr.dtype, np.floating):
        raise ShapeError(f"{name}: expected uint8 or float pixels, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or inf")
    return arr.astype(np.float32)


def check_images(images, name="X") -> list[np.ndarray]:
    """Accept an (N, H, W, 3) array or a sequence of (H, W, 3) images."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ShapeError(f"{name}: got a single image; wrap it in a list")
    out = [check_image(im, f"{name}[{i}]") for i, im in enumerate(images)]
    if not out:
        raise ValueError(f"{name}: no images")
    return out


def check_pairs(lr_images, hr_images, scale: int):
    lr = check_images(lr_images, "X")
    hr = check_images(hr_images, "y")
    if len(lr) != len(hr):
        raise ValueError(f"X has {len(lr)} images but y has {len(hr)}")
    for i, (a, b) in enumerate(zip(lr, hr)):
        if b.shape[:2] != (a.shape[0] * scale, a.shape[1] * scale):
            raise ShapeError(f"pair {i}: HR {b.shape[:2]} is not LR {a.shape[:2]} x {scale}")
    return lr, hr


class PANSuperResolver(BaseEstimator):
    """PAN trained with L1 + Adam on random patches of the given pairs.

    ``fit`` takes low-resolution inputs ``X`` and their high-resolution
    targets ``y``; ``predict`` returns unclamped float SR images; ``score``
    is the mean Y-channel PSNR (dB) of quantized predictions with a
    ``scale``-pixel border shaved.
    """

    def __init__(self, scale=2, block_type="SCPA", num_blocks=None, nf=40, unf=24,
                 n_iter=1000, batch_size=16, hr_patch=64, max_lr=1e-3, min_lr=1e-7,
                 augment=True, random_state=0):
        self.scale = scale
        self.block_type = block_type
        self.num_blocks = num_blocks
        self.nf = nf
        self.unf = unf
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.hr_patch = hr_patch
        self.max_lr = max_lr
        self.min_lr = min_lr
        self.augment = augment
        self.random_state = random_state

    def _configs(self):
        model_cfg = ModelConfig(scale=self.scale, block_type=self.block_type,
                                num_blocks=self.num_blocks, nf=self.nf, unf=self.unf).validate()
        train_cfg = TrainConfig(max_lr=self.max_lr, min_lr=self.min_lr,
                                cosine_period=max(self.n_iter, 1), batch_size=self.batch_size,
                                hr_patch=self.hr_patch, total_iters=self.n_iter,
                                seed=int(self.random_state), augment=self.augment).validate()
        return model_cfg, train_cfg

    def fit(self, X, y):
        model_cfg, train_cfg = self._configs()
        lr, hr = check_pairs(X, y, self.scale)
        manifest = DatasetManifest.from_arrays(lr, hr, self.scale)
        trainer = Trainer(build_pan(model_cfg, seed=train_cfg.seed), manifest, train_cfg)
        for _ in trainer.run():
            pass
        self.model_ = trainer.model
        self.loss_curve_ = [row.loss for row in trainer.history]
        self.n_iter_ = trainer.iteration
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X)
        out = [super_resolve(self.model_, im) for im in images]
        if isinstance(X, np.ndarray):
            return np.stack(out)
        return out

    def score(self, X, y):
        check_is_fitted(self, "model_")
        _, hr = check_pairs(X, y, self.scale)
        preds = self.predict(X)
        return float(np.mean([evaluate_pair(quantize(p), h, shave=self.scale)[0]
                              for p, h in zip(preds, hr)]))
