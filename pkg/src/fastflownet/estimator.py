"""scikit-learn style wrapper so the network composes with model-selection tooling.

``X`` is an array of image pairs shaped (n, 2, 3, H, W) with values in
[0, 1]; ``y`` holds ground-truth flows in pixels shaped (n, 2, H, W).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import loss as losses
from .net import NetConfig, WeightStore, forward, init_weights
from .tensor import ShapeError, bilinear_resize
from .train import train_gd

__all__ = [
    "check_image_pairs",
    "check_flows",
    "padded_size",
    "infer_flow",
    "FastFlowNetEstimator",
]


def check_image_pairs(X) -> np.ndarray:
    """Validate and convert image pairs to float32 (n, 2, 3, H, W)."""
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[0] == 2:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[2] != 3:
        raise ShapeError(f"expected image pairs shaped (n, 2, 3, H, W), got {X.shape}")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"image pairs must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("image pairs contain NaN or infinite values")
    return X


def check_flows(y, X=None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4 or y.shape[1] != 2:
        raise ShapeError(f"expected flows shaped (n, 2, H, W), got {y.shape}")
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[3:]):
        raise ShapeError(f"flows {y.shape} do not match image pairs {X.shape}")
    return y


def padded_size(height: int, width: int, multiple: int = 64) -> tuple[int, int]:
    """Smallest multiple-of-``multiple`` size not below (height, width)."""
    return -(-height // multiple) * multiple, -(-width // multiple) * multiple


def infer_flow(img1, img2, config: NetConfig, weights: WeightStore, stop_level: int | None = None,
               timings: dict | None = None) -> np.ndarray:
    """Flow in pixels for an image pair of any size.

    Images are resized to the enclosing multiple-of-64 resolution, and the
    result is resized back with u and v rescaled by the size ratios.
    """
    import time

    t0 = time.perf_counter()
    H, W = img1.shape[2:]
    Hp, Wp = padded_size(H, W)
    a = bilinear_resize(np.asarray(img1, dtype=np.float32), Hp, Wp)
    b = bilinear_resize(np.asarray(img2, dtype=np.float32), Hp, Wp)
    t1 = time.perf_counter()
    _, flow = forward(a, b, config, weights, stop_level)
    t2 = time.perf_counter()
    flow = bilinear_resize(flow, H, W)
    flow[:, 0] *= W / Wp
    flow[:, 1] *= H / Hp
    if timings is not None:
        timings.update(resize_in=t1 - t0, network=t2 - t1, resize_out=time.perf_counter() - t2)
    return flow


class FastFlowNetEstimator(RegressorMixin, BaseEstimator):
    """Optical-flow regressor with fit / predict / score.

    ``fit`` runs full-batch gradient descent on the multi-scale loss starting
    from ``init_weights`` (or from ``warm_start_weights`` when given).
    ``score`` returns the negative mean end-point error so that larger is
    better, as scikit-learn expects.
    """

    def __init__(self, cost_mode="cddc", decoder_groups=3, levels=(6, 5, 4, 3, 2), stop_level=None,
                 loss="l2", q=0.4, epsilon=0.01, n_steps=100, learning_rate=1e-2, init_gain=np.sqrt(6.0),
                 random_state=0, warm_start_weights=None):
        self.cost_mode = cost_mode
        self.decoder_groups = decoder_groups
        self.levels = levels
        self.stop_level = stop_level
        self.loss = loss
        self.q = q
        self.epsilon = epsilon
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.init_gain = init_gain
        self.random_state = random_state
        self.warm_start_weights = warm_start_weights

    def _config(self) -> NetConfig:
        return NetConfig(cost_mode=self.cost_mode, decoder_groups=self.decoder_groups, levels=tuple(self.levels))

    def fit(self, X, y):
        X = check_image_pairs(X)
        y = check_flows(y, X)
        config = self._config()
        if self.warm_start_weights is not None:
            weights = WeightStore(self.warm_start_weights).copy().validate(config)
        else:
            weights = init_weights(config, self.random_state, gain=self.init_gain)
        lw = losses.LossWeights(epsilon=self.epsilon, q=self.q)
        self.weights_, self.loss_curve_ = train_gd(
            config, weights, X[:, 0], X[:, 1], y, self.n_steps, lr=self.learning_rate, kind=self.loss, loss_weights=lw
        )
        self.config_ = config
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_image_pairs(X)
        return np.concatenate(
            [infer_flow(p[0:1], p[1:2], self.config_, self.weights_, self.stop_level) for p in X], axis=0
        )

    def score(self, X, y, sample_weight=None) -> float:
        pred = self.predict(X)
        y = check_flows(y, check_image_pairs(X))
        errs = np.sqrt(((pred.astype(np.float64) - y) ** 2).sum(axis=1)).mean(axis=(1, 2))
        return -float(np.average(errs, weights=sample_weight))
