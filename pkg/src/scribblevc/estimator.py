"""scikit-learn style wrapper around the dual-branch segmenter."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import evaluation
from .losses import CrfConfig, LossWeights, PseudoLabelConfig
from .model import ModelConfig
from .train import TrainConfig, fit
from .validation import check_images, check_masks, check_scribbles


class ScribbleVCSegmenter(BaseEstimator):
    """Scribble-supervised semantic segmenter.

    ``fit(X, y)`` takes images ``X`` (n, H, W) in [0, 1] and scribbles ``y``
    whose unlabeled pixels hold ``num_classes``. When ``num_classes`` is None
    it is read off the scribbles as their largest value (the sentinel).

    Parameters mirror the model and training configs; ``lr`` defaults to the
    desk-scale 1e-3 rather than the 1e-4 used for long GPU runs.
    """

    def __init__(self, num_classes=None, base_channels=16, num_stages=4,
                 num_heads=(1, 2, 4, 4), branches="dual", lr=1e-3, weight_decay=5e-4,
                 epochs=200, batch_size=4, loss_weights=(1.0, 0.5, 0.1, 0.1),
                 threshold=0.5, crf_radius=5, crf_sigma_xy=3.0, crf_sigma_int=0.1,
                 use_mie=True, grad_clip=5.0, aug_noise=0.05, policy="mean",
                 random_state=0):
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.num_stages = num_stages
        self.num_heads = num_heads
        self.branches = branches
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss_weights = loss_weights
        self.threshold = threshold
        self.crf_radius = crf_radius
        self.crf_sigma_xy = crf_sigma_xy
        self.crf_sigma_int = crf_sigma_int
        self.use_mie = use_mie
        self.grad_clip = grad_clip
        self.aug_noise = aug_noise
        self.policy = policy
        self.random_state = random_state

    def _configs(self, num_classes, image_size):
        model_config = ModelConfig(
            num_classes=num_classes, num_stages=self.num_stages,
            base_channels=self.base_channels, num_heads=tuple(self.num_heads),
            image_size=image_size, branches=self.branches)
        train_config = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, seed=int(self.random_state or 0),
            weights=LossWeights(*self.loss_weights),
            pseudo=PseudoLabelConfig(self.threshold),
            crf=CrfConfig(self.crf_radius, self.crf_sigma_xy, self.crf_sigma_int),
            use_mie=self.use_mie, grad_clip=self.grad_clip, aug_noise=self.aug_noise)
        return model_config, train_config

    def fit(self, X, y, validation_data=None):
        X = check_images(X)
        K = int(np.max(y)) if self.num_classes is None else int(self.num_classes)
        y = check_scribbles(y, X, K)
        if self.policy not in evaluation.POLICIES:
            raise ValueError(f"policy must be one of {evaluation.POLICIES}")
        model_config, train_config = self._configs(K, X.shape[1])
        val = None
        if validation_data is not None:
            vX = check_images(validation_data[0], X.shape[1])
            val = (vX, check_masks(validation_data[1], vX, K))
        state = fit(model_config, train_config, (X, y), val)
        self.model_ = state.model
        self.bank_ = state.bank
        self.history_ = state.history
        self.n_classes_ = K
        self.classes_ = np.arange(K)
        self.image_size_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size_)
        return evaluation.predict_proba(self.model_, self.bank_, X, self.policy)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        """Mean foreground Dice of the predictions against dense masks ``y``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size_)
        masks = check_masks(y, X, self.n_classes_)
        return evaluation.evaluate(self.model_, self.bank_, X, masks, self.n_classes_,
                                   self.policy).dice_mean
