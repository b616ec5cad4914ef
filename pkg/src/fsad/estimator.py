"""Scikit-learn style estimator wrapping the full detection pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluate import embed_images
from .interpret import Heatmap, explain
from .network import build_model
from .objective import rectify_scores
from .training import TrainConfig, train_model
from .validation import as_image_batch, as_label_array


class FewShotAnomalyDetector(BaseEstimator):
    """Few-shot anomaly detector with joint metric-learning and
    entropy-based score training.

    Parameters mirror the training configuration; see ``TrainConfig``.
    ``fit`` expects an image batch (N, 3, H, W) or (N, H, W, 3) with values
    in [0, 1] and binary labels (1 = anomalous). The square image size is
    taken from the data.

    Attributes set by ``fit``: ``model_`` (the torch network), ``config_``
    (the resolved TrainConfig), ``history_`` (per-epoch loss rows).
    """

    def __init__(
        self,
        backbone: str = "tiny",
        backbone_weights: str = "",
        d_prime: int = 128,
        temperature: float = 1.0,
        top_h: int = 8,
        margin_weight: float = 1.0,
        mu: float = 0.2,
        beta: float = 1.2,
        negatives_per_anchor: int = 1,
        lr: float = 1e-3,
        batch_size: int = 32,
        max_epochs: int = 200,
        patience: int = 20,
        sigma: float = 4.0,
        seed: int = 0,
        heat_source: str = "grad_x_act",
        norm_target: str = "row",
        class_conditioning: str = "per_class",
    ):
        self.backbone = backbone
        self.backbone_weights = backbone_weights
        self.d_prime = d_prime
        self.temperature = temperature
        self.top_h = top_h
        self.margin_weight = margin_weight
        self.mu = mu
        self.beta = beta
        self.negatives_per_anchor = negatives_per_anchor
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.sigma = sigma
        self.seed = seed
        self.heat_source = heat_source
        self.norm_target = norm_target
        self.class_conditioning = class_conditioning

    def _make_config(self, image_size: int, k: int) -> TrainConfig:
        return TrainConfig(
            backbone=self.backbone,
            backbone_weights=self.backbone_weights,
            d_prime=self.d_prime,
            temperature=self.temperature,
            top_h=self.top_h,
            margin_weight=self.margin_weight,
            mu=self.mu,
            beta=self.beta,
            negatives_per_anchor=self.negatives_per_anchor,
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            sigma=self.sigma,
            seed=self.seed,
            image_size=image_size,
            k=k,
        )

    def fit(self, X, y):
        """Train reduction block and scoring head on labelled images."""
        images = as_image_batch(X)
        labels = as_label_array(y, n=images.shape[0])
        if images.shape[-1] != images.shape[-2]:
            raise ValueError("images must be square")
        config = self._make_config(
            image_size=int(images.shape[-1]), k=int((labels == 1).sum())
        )
        model = build_model(
            backbone_kind=config.backbone,
            d_prime=config.d_prime,
            temperature=config.temperature,
            seed=config.seed,
            backbone_weights=config.backbone_weights or None,
            norm_target=self.norm_target,
            class_conditioning=self.class_conditioning,
        )
        result = train_model(images, labels, config, model=model)
        self.model_ = result.model
        self.config_ = result.config
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_ = result.best_val
        return self

    def _pooled_scores(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = as_image_batch(X)
        self.model_.eval()
        with torch.no_grad():
            out = torch.cat(
                [self.model_(images[i : i + 32]) for i in range(0, len(images), 32)]
            )
        return out.numpy()

    def decision_function(self, X) -> np.ndarray:
        """Margin s1 - s0: positive means anomalous."""
        pooled = self._pooled_scores(X)
        return pooled[:, 1] - pooled[:, 0]

    def predict(self, X) -> np.ndarray:
        """Binary labels: 1 iff the anomalous score strictly exceeds the
        normal score."""
        return (self.decision_function(X) > 0).astype(np.int64)

    def score_samples(self, X) -> np.ndarray:
        """Rectified anomaly-branch score per image (higher = more anomalous)."""
        pooled = self._pooled_scores(X)
        return rectify_scores(torch.from_numpy(pooled[:, 1])).numpy()

    def transform(self, X) -> np.ndarray:
        """Pooled embeddings (N, d_prime) used by the metric objective."""
        check_is_fitted(self, "model_")
        return embed_images(self.model_, as_image_batch(X))

    def explain(self, X) -> list[Heatmap]:
        """Interpretation heatmap per image (target class: anomalous)."""
        check_is_fitted(self, "model_")
        images = as_image_batch(X)
        top_h = min(self.top_h, self.model_.head.d_prime)
        return [
            explain(
                self.model_,
                images[i],
                top_h=top_h,
                sigma=self.sigma,
                heat_source=self.heat_source,
            )
            for i in range(len(images))
        ]
