"""Toy-scale training: synthetic translated texture pairs and plain gradient descent."""
from __future__ import annotations

import logging

import numpy as np

from . import loss as losses
from .net import NetConfig, WeightStore, backward, forward_train
from .tensor import bilinear_resize

__all__ = ["TOY_CONFIG", "TOY_INIT_GAIN", "TOY_LEARNING_RATE", "TOY_PAIRS", "TrainingDiverged", "make_toy_pairs", "loss_and_grads", "train_gd"]

log = logging.getLogger(__name__)

TOY_CONFIG = NetConfig(levels=(4, 3, 2))
# Uniform bound sqrt(6 / fan_in): with sqrt(1 / fan_in) the features shrink by ~3x per layer and the
# cost volume is numerically dead at toy scale.
TOY_INIT_GAIN = float(np.sqrt(6.0))
TOY_LEARNING_RATE = 1e-2
TOY_PAIRS = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


def _texture(rng, size: int) -> np.ndarray:
    tex = np.zeros((1, 3, size, size))
    for cells, amp in ((4, 0.4), (8, 0.3), (16, 0.2), (32, 0.1)):
        tex += amp * bilinear_resize(rng.random((1, 3, cells, cells)), size, size)
    lo = tex.min(axis=(2, 3), keepdims=True)
    hi = tex.max(axis=(2, 3), keepdims=True)
    return (tex - lo) / (hi - lo)


def make_toy_pairs(seed: int = 0, n_pairs: int = 4, size: int = 64, max_shift: int = 8):
    """Random textures and copies translated by integer shifts in [-max_shift, max_shift].

    Returns ``(img1, img2, flow)`` with ``flow`` the constant per-pair
    displacement in pixels, shaped (n_pairs, 2, size, size).
    """
    rng = np.random.default_rng(seed)
    m = max_shift
    img1 = np.empty((n_pairs, 3, size, size), dtype=np.float32)
    img2 = np.empty_like(img1)
    flow = np.empty((n_pairs, 2, size, size), dtype=np.float32)
    for i in range(n_pairs):
        tex = _texture(rng, size + 2 * m)[0]
        dx, dy = rng.integers(-m, m + 1, size=2)
        img1[i] = tex[:, m:m + size, m:m + size]
        # a pixel at p in img1 appears at p + (dx, dy) in img2
        img2[i] = tex[:, m - dy:m - dy + size, m - dx:m - dx + size]
        flow[i, 0], flow[i, 1] = dx, dy
    return img1, img2, flow


def loss_and_grads(img1, img2, gt: dict, config: NetConfig, weights: WeightStore,
                   kind: str = "l2", loss_weights: losses.LossWeights | None = None):
    flows, cache = forward_train(img1, img2, config, weights)
    fn = {"l2": losses.multiscale_l2, "robust": losses.robust_loss}[kind]
    value, flow_grads = fn(flows, gt, loss_weights, return_grad=True)
    return value, backward(cache, flow_grads, weights)


def train_gd(config: NetConfig, weights: WeightStore, img1, img2, flow_gt, steps: int,
             lr: float = 1e-3, kind: str = "l2", loss_weights: losses.LossWeights | None = None,
             callback=None):
    """Plain gradient descent with a fixed step.

    Returns ``(weights, curve)`` where ``curve[k]`` is the loss after ``k``
    updates, so ``len(curve) == steps + 1``.
    """
    weights = weights.copy()
    gt = losses.gt_pyramid(flow_gt, config.levels)
    curve = []
    for step in range(steps + 1):
        value, grads = loss_and_grads(img1, img2, gt, config, weights, kind, loss_weights)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        curve.append(value)
        if callback is not None:
            callback(step, value)
        if step == steps:
            break
        for key, g in grads.items():
            weights[key] -= (lr * g).astype(weights[key].dtype)
        if step % 50 == 0:
            log.debug("step %d loss %.6f", step, value)
    return weights, curve
