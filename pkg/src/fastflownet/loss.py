"""Multi-scale training objectives, ground-truth pyramids and end-point error."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flowops import FLOW_SCALE, check_flow
from .tensor import ShapeError, bilinear_resize

__all__ = ["LossWeights", "gt_pyramid", "multiscale_l2", "robust_loss", "epe"]


def _default_alpha():
    return {6: 0.32, 5: 0.08, 4: 0.02, 3: 0.01, 2: 0.005}


@dataclass
class LossWeights:
    alpha: dict = field(default_factory=_default_alpha)
    epsilon: float = 0.01
    q: float = 0.4

    def __post_init__(self):
        if any(a <= 0 for a in self.alpha.values()):
            raise ValueError("all level weights must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights({l: a * c for l, a in self.alpha.items()}, self.epsilon, self.q)


def gt_pyramid(flow_gt, levels) -> dict:
    """Per-level supervision: pixels / 20, bilinearly resized to H/2^l x W/2^l."""
    flow_gt = check_flow(flow_gt, "flow_gt")
    H, W = flow_gt.shape[2:]
    scaled = flow_gt / FLOW_SCALE
    out = {}
    for lvl in levels:
        h, w = H >> lvl, W >> lvl
        if h < 1 or w < 1:
            raise ShapeError(f"ground truth {H}x{W} is too small for level {lvl}")
        out[lvl] = bilinear_resize(scaled, h, w)
    return out


def _pairs(pred: dict, gt: dict, w: LossWeights):
    if set(pred) != set(gt):
        raise ShapeError(f"prediction levels {sorted(pred)} do not match ground-truth levels {sorted(gt)}")
    missing = set(pred) - set(w.alpha)
    if missing:
        raise ShapeError(f"no weight for levels {sorted(missing)}")
    for lvl in sorted(pred, reverse=True):
        p, g = np.asarray(pred[lvl]), np.asarray(gt[lvl])
        if p.shape != g.shape:
            raise ShapeError(f"level {lvl}: prediction {p.shape} vs ground truth {g.shape}")
        yield lvl, p, g


def multiscale_l2(pred: dict, gt: dict, w: LossWeights | None = None, return_grad: bool = False):
    """Sum over levels of alpha_l * sum_x ||pred - gt||_2.

    With ``return_grad`` also returns d loss / d pred per level; the norm's
    gradient at an exact zero difference is taken as zero.
    """
    w = w or LossWeights()
    total = 0.0
    grads = {}
    for lvl, p, g in _pairs(pred, gt, w):
        d = p - g
        norm = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
        total += w.alpha[lvl] * float(norm.sum(dtype=np.float64))
        if return_grad:
            safe = np.where(norm > 0, norm, 1)
            grads[lvl] = w.alpha[lvl] * np.where(norm > 0, 1, 0)[:, None] * d / safe[:, None]
    return (total, grads) if return_grad else total


def robust_loss(pred: dict, gt: dict, w: LossWeights | None = None, return_grad: bool = False):
    """Sum over levels of alpha_l * sum_x (|pred - gt|_1 + epsilon)^q."""
    w = w or LossWeights()
    total = 0.0
    grads = {}
    for lvl, p, g in _pairs(pred, gt, w):
        d = p - g
        l1 = np.abs(d[:, 0]) + np.abs(d[:, 1]) + w.epsilon
        total += w.alpha[lvl] * float((l1 ** w.q).sum(dtype=np.float64))
        if return_grad:
            grads[lvl] = w.alpha[lvl] * (w.q * l1 ** (w.q - 1))[:, None] * np.sign(d)
    return (total, grads) if return_grad else total


def epe(pred, gt, mask=None) -> float:
    """Mean end-point error in pixels over valid pixels."""
    pred = check_flow(pred, "pred")
    gt = check_flow(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    err = np.sqrt(((pred.astype(np.float64) - gt) ** 2).sum(axis=1))
    if mask is None:
        return float(err.mean())
    mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(err.shape[0], *err.shape[-2:]), err.shape)
    if not mask.any():
        raise ValueError("validity mask selects no pixels")
    return float(err[mask].mean())
