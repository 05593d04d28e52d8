"""Central finite-difference checks for every hand-written backward pass.

Each check builds a random double-precision instance, contracts the forward
output with a random upstream gradient ``G`` to get a scalar
``L = <G, f(inputs)>``, and compares the analytic gradient of ``L`` with
central differences at a random subset of input coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flowops, loss, net, tensor

__all__ = ["CheckResult", "TOLERANCE", "relative_error", "numeric_gradient", "run_gradcheck", "CHECKS"]

TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    op: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def relative_error(analytic, numeric, atol: float = 1e-7) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, x: np.ndarray, indices, h: float) -> np.ndarray:
    """d fn / d x at ``indices`` by central differences; ``x`` is restored."""
    out = []
    for idx in indices:
        old = x[idx]
        x[idx] = old + h
        plus = fn()
        x[idx] = old - h
        minus = fn()
        x[idx] = old
        out.append((plus - minus) / (2 * h))
    return np.array(out)


def _sample(rng, shape, k: int):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= k else rng.choice(size, k, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _compare(rng, scalar, inputs: dict, grads: dict, h: float, k: int = 40):
    errs, n = [0.0], 0
    for name, x in inputs.items():
        idx = _sample(rng, x.shape, k)
        num = numeric_gradient(scalar, x, idx, h)
        ana = np.array([grads[name][i] for i in idx])
        errs.append(float(relative_error(ana, num).max()))
        n += len(idx)
    return max(errs), n


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def check_conv2d(rng):
    worst, total = 0.0, 0
    for shape, spec in (
        ((1, 3, 5, 5), tensor.ConvSpec(3, 4)),
        ((2, 4, 6, 7), tensor.ConvSpec(4, 6, stride=2, groups=2)),
    ):
        x = rng.normal(size=shape)
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=spec.out_channels)
        out = tensor.conv2d(x, w, b, spec)
        G = rng.normal(size=out.shape)
        gx, gw, gb = tensor.conv2d_backward(G, x, w, spec)
        err, n = _compare(rng, lambda: np.sum(G * tensor.conv2d(x, w, b, spec)),
                          {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, 1e-4)
        worst, total = max(worst, err), total + n
    return worst, total


def check_deconv2d(rng):
    spec = flowops.UPCONV_SPEC
    x = rng.normal(size=(2, 2, 3, 4))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=2)
    G = rng.normal(size=(2, 2, 6, 8))
    gx, gw, gb = tensor.deconv2d_backward(G, x, w, spec)
    return _compare(rng, lambda: np.sum(G * tensor.deconv2d(x, w, b, spec)),
                    {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, 1e-4)


def check_avgpool2(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    G = rng.normal(size=(2, 3, 2, 3))
    return _compare(rng, lambda: np.sum(G * tensor.avgpool2(x)), {"x": x}, {"x": tensor.avgpool2_backward(G)}, 1e-4)


def check_leaky_relu(rng):
    x = _away_from_zero(rng, (1, 3, 4, 4))
    G = rng.normal(size=x.shape)
    return _compare(rng, lambda: np.sum(G * tensor.leaky_relu(x, 0.1)),
                    {"x": x}, {"x": tensor.leaky_relu_backward(G, x, 0.1)}, 1e-6)


def check_concat_channels(rng):
    xs = [rng.normal(size=(1, c, 3, 4)) for c in (2, 3, 1)]
    G = rng.normal(size=(1, 6, 3, 4))
    gs = tensor.concat_channels_backward(G, [2, 3, 1])
    return _compare(rng, lambda: np.sum(G * tensor.concat_channels(xs)),
                    {f"x{i}": x for i, x in enumerate(xs)}, {f"x{i}": g for i, g in enumerate(gs)}, 1e-4)


def check_bilinear_resize(rng):
    worst, total = 0.0, 0
    for (h, w), (oh, ow) in (((3, 4), (5, 9)), ((8, 6), (4, 3))):
        x = rng.normal(size=(1, 2, h, w))
        G = rng.normal(size=(1, 2, oh, ow))
        err, n = _compare(rng, lambda: np.sum(G * tensor.bilinear_resize(x, oh, ow)),
                          {"x": x}, {"x": tensor.bilinear_resize_backward(G, h, w)}, 1e-4)
        worst, total = max(worst, err), total + n
    return worst, total


def _fractional_flow(rng, shape, level):
    # keep sample positions away from integer pixels, where bilinear weights kink
    s = flowops.pixel_scale(level)
    px = rng.uniform(-2.5, 2.5, shape)
    frac = px - np.floor(px)
    px = px - frac + np.clip(frac, 0.1, 0.9)
    return px / s


def check_warp(rng):
    level = 2
    f = rng.normal(size=(2, 3, 6, 7))
    flow = _fractional_flow(rng, (2, 2, 6, 7), level)
    G = rng.normal(size=f.shape)
    gf, gflow = flowops.warp_backward(G, f, flow, level)
    return _compare(rng, lambda: np.sum(G * flowops.warp(f, flow, level)),
                    {"feature": f, "flow": flow}, {"feature": gf, "flow": gflow}, 1e-6)


def check_correlate(rng):
    worst, total = 0.0, 0
    for spec in (flowops.cddc_spec(), flowops.square_spec(3)):
        f1 = rng.normal(size=(1, 4, 6, 6))
        f2 = rng.normal(size=(1, 4, 6, 6))
        G = rng.normal(size=(1, len(spec), 6, 6))
        g1, g2 = flowops.correlate_backward(G, f1, f2, spec)
        err, n = _compare(rng, lambda: np.sum(G * flowops.correlate(f1, f2, spec)),
                          {"f1": f1, "f_warp": f2}, {"f1": g1, "f_warp": g2}, 1e-4)
        worst, total = max(worst, err), total + n
    return worst, total


def check_channel_shuffle(rng):
    x = rng.normal(size=(1, 12, 2, 3))
    G = rng.normal(size=x.shape)
    return _compare(rng, lambda: np.sum(G * flowops.channel_shuffle(x, 3)),
                    {"x": x}, {"x": flowops.channel_shuffle_backward(G, 3)}, 1e-4)


def _random_levels(rng, levels, size=8):
    return {l: rng.normal(size=(2, 2, size >> (l - 2), size >> (l - 2))) for l in levels}


def check_multiscale_l2(rng):
    pred, gt = _random_levels(rng, (4, 3, 2)), _random_levels(rng, (4, 3, 2))
    _, grads = loss.multiscale_l2(pred, gt, return_grad=True)
    return _compare(rng, lambda: loss.multiscale_l2(pred, gt), pred, grads, 1e-6)


def check_robust_loss(rng):
    pred, gt = _random_levels(rng, (4, 3, 2)), _random_levels(rng, (4, 3, 2))
    w = loss.LossWeights(q=0.4)
    _, grads = loss.robust_loss(pred, gt, w, return_grad=True)
    return _compare(rng, lambda: loss.robust_loss(pred, gt, w), pred, grads, 1e-6)


MINI_CONFIG = net.NetConfig(levels=(3, 2))


def check_network(rng, config: net.NetConfig = MINI_CONFIG, per_tensor: int = 2):
    """Multi-scale L2 through the whole network, w.r.t. sampled scalar weights."""
    weights = net.init_weights(config, int(rng.integers(2 ** 31))).astype(np.float64)
    for key in weights:
        if key.endswith(".weight"):
            weights[key] *= np.sqrt(6.0)  # keep activations O(1) so gradients are well above noise
        else:
            weights[key] += rng.normal(scale=0.05, size=weights[key].shape)
    img1 = rng.random((1, 3, 64, 64))
    img2 = np.roll(img1, (1, 2), axis=(2, 3)) + 0.05 * rng.random((1, 3, 64, 64))
    gt = {l: rng.normal(scale=0.2, size=(1, 2, 64 >> l, 64 >> l)) for l in config.levels}

    def scalar():
        flows, _ = net.forward_train(img1, img2, config, weights)
        return loss.multiscale_l2(flows, gt)

    flows, cache = net.forward_train(img1, img2, config, weights)
    _, flow_grads = loss.multiscale_l2(flows, gt, return_grad=True)
    grads = net.backward(cache, flow_grads, weights)
    return _compare(rng, scalar, dict(weights), dict(grads), 1e-6, k=per_tensor)


CHECKS = {
    "conv2d": check_conv2d,
    "deconv2d": check_deconv2d,
    "avgpool2": check_avgpool2,
    "leaky_relu": check_leaky_relu,
    "concat_channels": check_concat_channels,
    "bilinear_resize": check_bilinear_resize,
    "warp": check_warp,
    "correlate": check_correlate,
    "channel_shuffle": check_channel_shuffle,
    "multiscale_l2": check_multiscale_l2,
    "robust_loss": check_robust_loss,
    "network": check_network,
}


def run_gradcheck(seed: int = 0, ops=None) -> list[CheckResult]:
    unknown = set(ops or ()) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown gradcheck ops: {sorted(unknown)}")
    results = []
    for i, (name, fn) in enumerate(CHECKS.items()):
        if ops is not None and name not in ops:
            continue
        err, n = fn(np.random.default_rng([seed, i]))
        results.append(CheckResult(name, err, n))
    return results
