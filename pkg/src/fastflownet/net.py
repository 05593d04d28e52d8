"""FastFlowNet assembly: pooling pyramid, per-level cost construction and
shuffle-block decoders, coarse-to-fine residual refinement.

All weights live in a :class:`WeightStore` keyed ``"<layer>.weight"`` and
``"<layer>.bias"``. Layer names:
``pconv1_1 .. pconv3_3`` for the pyramid, ``upconvL`` for the learned
upsampling of the level-L flow, ``rconvL`` for context reduction and
``fconvL_1 .. fconvL_7`` for the decoder at level L.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flowops
from .flowops import FLOW_SCALE, UPCONV_SPEC, CostVolumeSpec
from .tensor import (
    ConvSpec,
    ShapeError,
    avgpool2,
    avgpool2_backward,
    bilinear_resize,
    check_tensor,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    leaky_relu,
    leaky_relu_backward,
)

__all__ = [
    "LEVEL_CHANNELS",
    "NetConfig",
    "LayerDef",
    "WeightStore",
    "layer_table",
    "init_weights",
    "zero_weights",
    "normalize_pair",
    "extract_pyramid",
    "decode_level",
    "forward",
    "forward_train",
    "backward",
]

LEVEL_CHANNELS = {1: 16, 2: 32, 3: 64, 4: 64, 5: 64, 6: 64}
DECODER_WIDTH = 96
CONTEXT_CHANNELS = 32
COST_CHANNELS = {"cddc": 53, "square_r3": 49, "square_r4": 81}
_MODE_ALIASES = {"r3": "square_r3", "r4": "square_r4"}

# (name, in, out, stride) for the convolutional head of the pyramid
_PYRAMID_CONVS = (
    ("pconv1_1", 3, 16, 2),
    ("pconv1_2", 16, 16, 1),
    ("pconv2_1", 16, 32, 2),
    ("pconv2_2", 32, 32, 1),
    ("pconv2_3", 32, 32, 1),
    ("pconv3_1", 32, 64, 2),
    ("pconv3_2", 64, 64, 1),
    ("pconv3_3", 64, 64, 1),
)
_PYRAMID_OUTPUTS = {"pconv1_2": 1, "pconv2_3": 2, "pconv3_3": 3}


@dataclass(frozen=True)
class NetConfig:
    """Variant knobs. The default is the CDDC / group-3 network decoding levels 6..2."""

    cost_mode: str = "cddc"
    decoder_groups: int = 3
    levels: tuple[int, ...] = (6, 5, 4, 3, 2)
    slope: float = 0.1
    cost_activation: bool = True
    normalize_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cost_mode", _MODE_ALIASES.get(self.cost_mode, self.cost_mode))
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if self.cost_mode not in COST_CHANNELS:
            raise ValueError(f"unknown cost_mode {self.cost_mode!r}")
        if self.decoder_groups < 1 or DECODER_WIDTH % self.decoder_groups:
            raise ValueError(f"decoder_groups must divide {DECODER_WIDTH}, got {self.decoder_groups}")
        lv = self.levels
        if not lv or lv[-1] < 2 or lv[0] > 6 or list(lv) != list(range(lv[0], lv[-1] - 1, -1)):
            raise ValueError(f"levels must be a contiguous descending run within 6..2, got {lv}")

    @property
    def cost_channels(self) -> int:
        return COST_CHANNELS[self.cost_mode]

    @property
    def decoder_in_channels(self) -> int:
        return CONTEXT_CHANNELS + self.cost_channels + 2

    @property
    def cost_spec(self) -> CostVolumeSpec:
        return flowops.cost_spec(self.cost_mode)

    @property
    def coarsest(self) -> int:
        return self.levels[0]

    @property
    def finest(self) -> int:
        return self.levels[-1]


@dataclass(frozen=True)
class LayerDef:
    name: str
    module: str  # HEPP, MFC or SBD
    level: int  # pyramid level whose resolution the output lives on
    spec: ConvSpec | None = None
    kind: str = "conv"  # conv, deconv, pool, warp, corr
    extra: dict = field(default_factory=dict, compare=False)


def layer_table(config: NetConfig, include_free: bool = False) -> list[LayerDef]:
    """Layers of ``config`` in definition order (pyramid first, then levels descending).

    With ``include_free`` the parameter-free pooling, warping and correlation
    stages are listed too, which is what the cost analyzer needs.
    """
    rows: list[LayerDef] = []
    for name, cin, cout, stride in _PYRAMID_CONVS:
        rows.append(LayerDef(name, "HEPP", int(name[5]), ConvSpec(cin, cout, stride=stride)))
    if include_free:
        for lvl in (4, 5, 6):
            rows.append(LayerDef(f"pool{lvl}", "HEPP", lvl, kind="pool"))
    g = config.decoder_groups
    for lvl in config.levels:
        if lvl != config.coarsest:
            rows.append(LayerDef(f"upconv{lvl + 1}", "MFC", lvl, UPCONV_SPEC, kind="deconv"))
            if include_free:
                rows.append(LayerDef(f"warp{lvl}", "MFC", lvl, kind="warp", extra={"channels": LEVEL_CHANNELS[lvl]}))
        if include_free:
            rows.append(LayerDef(
                f"{config.cost_mode}{lvl}", "MFC", lvl, kind="corr",
                extra={"channels": LEVEL_CHANNELS[lvl], "offsets": config.cost_channels},
            ))
        rows.append(LayerDef(f"rconv{lvl}", "MFC", lvl, ConvSpec(LEVEL_CHANNELS[lvl], CONTEXT_CHANNELS)))
        rows.append(LayerDef(f"fconv{lvl}_1", "SBD", lvl, ConvSpec(config.decoder_in_channels, DECODER_WIDTH)))
        for k in (2, 3, 4):
            rows.append(LayerDef(f"fconv{lvl}_{k}", "SBD", lvl, ConvSpec(DECODER_WIDTH, DECODER_WIDTH, groups=g)))
        rows.append(LayerDef(f"fconv{lvl}_5", "SBD", lvl, ConvSpec(DECODER_WIDTH, 64)))
        rows.append(LayerDef(f"fconv{lvl}_6", "SBD", lvl, ConvSpec(64, 32)))
        rows.append(LayerDef(f"fconv{lvl}_7", "SBD", lvl, ConvSpec(32, 2)))
    return rows


class WeightStore(dict):
    """Ordered ``name -> array`` mapping holding every learnable tensor."""

    def weight(self, layer: str) -> np.ndarray:
        return self[f"{layer}.weight"]

    def bias(self, layer: str):
        return self.get(f"{layer}.bias")

    def n_elements(self) -> int:
        return int(sum(v.size for v in self.values()))

    def astype(self, dtype) -> "WeightStore":
        return WeightStore((k, v.astype(dtype)) for k, v in self.items())

    def copy(self) -> "WeightStore":
        return WeightStore((k, v.copy()) for k, v in self.items())

    def equals(self, other) -> bool:
        """Bitwise equality including key order."""
        return list(self) == list(other) and all(
            self[k].dtype == other[k].dtype and self[k].shape == other[k].shape
            and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    @staticmethod
    def expected_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for row in layer_table(config):
            shapes[f"{row.name}.weight"] = row.spec.weight_shape
            if row.spec.has_bias:
                shapes[f"{row.name}.bias"] = (row.spec.out_channels,)
        return shapes

    def validate(self, config: NetConfig) -> "WeightStore":
        expected = self.expected_shapes(config)
        for key, shape in expected.items():
            if key not in self:
                raise ShapeError(f"missing tensor {key!r} required by {config}")
            got = tuple(self[key].shape)
            if got != shape:
                raise ShapeError(f"layer {key.split('.')[0]}: tensor {key} has shape {got}, expected {shape}")
        extra = [k for k in self if k not in expected]
        if extra:
            raise ShapeError(f"unexpected tensors for this configuration: {extra}")
        return self


def init_weights(config: NetConfig = NetConfig(), seed: int = 0, gain: float = 1.0) -> WeightStore:
    """Uniform(+-gain*sqrt(1/fan_in)) weights, zero biases, deterministic per seed.

    ``gain=sqrt(6)`` gives the He-uniform bound, which keeps activations at
    unit scale through the leaky-ReLU stack.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for row in layer_table(config):
        bound = gain * np.sqrt(1.0 / row.spec.fan_in)
        store[f"{row.name}.weight"] = rng.uniform(-bound, bound, row.spec.weight_shape).astype(np.float32)
        if row.spec.has_bias:
            store[f"{row.name}.bias"] = np.zeros(row.spec.out_channels, dtype=np.float32)
    return store


def zero_weights(config: NetConfig = NetConfig()) -> WeightStore:
    return WeightStore(
        (k, np.zeros(s, dtype=np.float32)) for k, s in WeightStore.expected_shapes(config).items()
    )


def normalize_pair(img1, img2):
    """Subtract the per-pair mean of each colour channel."""
    mean = (img1.mean(axis=(2, 3), keepdims=True) + img2.mean(axis=(2, 3), keepdims=True)) * 0.5
    return img1 - mean, img2 - mean


def _check_images(img1, img2, divisor: int = 64):
    img1 = check_tensor(img1, "img1")
    img2 = check_tensor(img2, "img2")
    if img1.shape != img2.shape:
        raise ShapeError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    if img1.shape[1] != 3:
        raise ShapeError(f"images need 3 colour channels, got {img1.shape[1]}")
    H, W = img1.shape[2:]
    if H % divisor or W % divisor:
        raise ShapeError(f"image size {H}x{W} is not divisible by {divisor}")
    return img1, img2


# -- pyramid -----------------------------------------------------------------

def _pyramid_forward(image, weights: WeightStore, slope: float, depth: int = 6):
    feats, cache = {}, []
    x = image
    for name, cin, cout, stride in _PYRAMID_CONVS:
        spec = ConvSpec(cin, cout, stride=stride)
        pre = conv2d(x, weights.weight(name), weights.bias(name), spec)
        cache.append((name, spec, x, pre))
        x = leaky_relu(pre, slope)
        if name in _PYRAMID_OUTPUTS:
            feats[_PYRAMID_OUTPUTS[name]] = x
    for lvl in range(4, depth + 1):
        x = avgpool2(x)
        feats[lvl] = x
    return [feats[l] for l in range(1, depth + 1)], cache


def extract_pyramid(image, weights: WeightStore, slope: float = 0.1, depth: int = 6) -> list[np.ndarray]:
    """Feature pyramid for one image; element ``i`` is level ``i + 1``.

    Levels 1-3 come from the convolutional head (16, 32, 64 channels), levels
    4 and up are parameter-free average pools of level 3.
    """
    image = check_tensor(image, "image")
    if image.shape[1] != 3:
        raise ShapeError(f"image needs 3 colour channels, got {image.shape[1]}")
    div = 2 ** depth
    if image.shape[2] % div or image.shape[3] % div:
        raise ShapeError(f"image size {image.shape[2]}x{image.shape[3]} is not divisible by {div}")
    return _pyramid_forward(image, weights, slope, depth)[0]


def _accumulate(grads: dict, key: str, value):
    if value is None:
        return
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def _pyramid_backward(cache, level_grads: dict, weights: WeightStore, slope: float, grads: dict):
    g = None
    for lvl in range(max(level_grads, default=3), 3, -1):
        if lvl in level_grads:
            g = level_grads[lvl] if g is None else g + level_grads[lvl]
        if g is not None:
            g = avgpool2_backward(g)
    for name, spec, x, pre in reversed(cache):
        lvl = _PYRAMID_OUTPUTS.get(name)
        if lvl in level_grads:
            g = level_grads[lvl] if g is None else g + level_grads[lvl]
        if g is None:
            continue
        g = leaky_relu_backward(g, pre, slope)
        g, gw, gb = conv2d_backward(g, x, weights.weight(name), spec)
        _accumulate(grads, f"{name}.weight", gw)
        _accumulate(grads, f"{name}.bias", gb)


# -- decoding ----------------------------------------------------------------

def _conv(name: str, x, weights: WeightStore, groups: int = 1):
    w = weights.weight(name)
    spec = ConvSpec(x.shape[1], w.shape[0], kernel=w.shape[2:], groups=groups)
    if w.shape[1] * groups != x.shape[1]:
        raise ShapeError(f"layer {name}: expects {w.shape[1] * groups} input channels, got {x.shape[1]}")
    return conv2d(x, w, weights.bias(name), spec), spec


def _decode_forward(f1, f2, prior, level: int, config: NetConfig, weights: WeightStore):
    slope = config.slope
    B, _, H, W = f1.shape
    c = {"f1": f1, "f2": f2, "prior": prior}
    if prior is None:
        up = np.zeros((B, 2, H, W), dtype=f1.dtype)
        f_warp = f2  # zero flow: warping is the identity
    else:
        name = f"upconv{level + 1}"
        up = deconv2d(prior, weights.weight(name), weights.bias(name), UPCONV_SPEC)
        if up.shape[2:] != (H, W):
            raise ShapeError(f"layer {name}: upsampled flow {up.shape[2:]} does not match level-{level} features {(H, W)}")
        f_warp = flowops.warp(f2, up, level)
    c["up"], c["f_warp"] = up, f_warp
    spec = config.cost_spec
    corr = flowops.correlate(f1, f_warp, spec)
    c["corr"] = corr
    cost = leaky_relu(corr, slope) if config.cost_activation else corr
    pre, _ = _conv(f"rconv{level}", f1, weights)
    c["rconv_pre"] = pre
    ctx = leaky_relu(pre, slope)
    x = concat_channels([ctx, cost, up])
    c["sizes"] = (ctx.shape[1], cost.shape[1], 2)
    layers = []
    for k in range(1, 8):
        name = f"fconv{level}_{k}"
        groups = config.decoder_groups if k in (2, 3, 4) else 1
        try:
            pre, cspec = _conv(name, x, weights, groups)
        except ShapeError as exc:
            raise ShapeError(f"layer {name}: {exc}") from None
        layers.append((name, cspec, x, pre))
        if k == 7:
            x = pre
        else:
            x = leaky_relu(pre, slope)
            if groups > 1:
                x = flowops.channel_shuffle(x, groups)
    c["layers"] = layers
    flow = x + up
    return flow, c


def decode_level(f1, f2, prior_flow, level: int, config: NetConfig, weights: WeightStore) -> np.ndarray:
    """Estimate the level-``level`` flow from same-level features and the coarser flow.

    ``prior_flow`` is the level ``level + 1`` estimate, or ``None`` at the
    coarsest decoded level. The decoder predicts a residual that is added to
    the 2x upsampled prior.
    """
    f1 = check_tensor(f1, "f1")
    f2 = check_tensor(f2, "f2")
    if f1.shape != f2.shape:
        raise ShapeError(f"f1 and f2 differ in shape: {f1.shape} vs {f2.shape}")
    if prior_flow is not None:
        flowops.check_flow(prior_flow, "prior_flow")
    return _decode_forward(f1, f2, prior_flow, level, config, weights)[0]


def _decode_backward(g_flow, c, level: int, config: NetConfig, weights: WeightStore, grads: dict):
    slope = config.slope
    g_up = g_flow
    g = g_flow
    for name, cspec, x, pre in reversed(c["layers"]):
        k = int(name[-1])
        if k != 7:
            if cspec.groups > 1:
                g = flowops.channel_shuffle_backward(g, cspec.groups)
            g = leaky_relu_backward(g, pre, slope)
        g, gw, gb = conv2d_backward(g, x, weights.weight(name), cspec)
        _accumulate(grads, f"{name}.weight", gw)
        _accumulate(grads, f"{name}.bias", gb)
    g_ctx, g_cost, g_up_cat = concat_channels_backward(g, c["sizes"])
    g_up = g_up + g_up_cat

    g_pre = leaky_relu_backward(g_ctx, c["rconv_pre"], slope)
    w = weights.weight(f"rconv{level}")
    spec = ConvSpec(w.shape[1], w.shape[0])
    g_f1, gw, gb = conv2d_backward(g_pre, c["f1"], w, spec)
    _accumulate(grads, f"rconv{level}.weight", gw)
    _accumulate(grads, f"rconv{level}.bias", gb)

    if config.cost_activation:
        g_cost = leaky_relu_backward(g_cost, c["corr"], slope)
    g_f1c, g_fw = flowops.correlate_backward(g_cost, c["f1"], c["f_warp"], config.cost_spec)
    g_f1 = g_f1 + g_f1c

    g_prior = None
    if c["prior"] is None:
        g_f2 = g_fw
    else:
        g_f2, g_up_w = flowops.warp_backward(g_fw, c["f2"], c["up"], level)
        g_up = g_up + g_up_w
        name = f"upconv{level + 1}"
        g_prior, gw, gb = deconv2d_backward(g_up, c["prior"], weights.weight(name), UPCONV_SPEC)
        _accumulate(grads, f"{name}.weight", gw)
        _accumulate(grads, f"{name}.bias", gb)
    return g_f1, g_f2, g_prior


# -- full network ------------------------------------------------------------

@dataclass
class ForwardCache:
    config: NetConfig
    pyramid1: list
    pyramid2: list
    pyr_cache1: list = field(repr=False, default=None)
    pyr_cache2: list = field(repr=False, default=None)
    levels: dict = field(repr=False, default_factory=dict)


def _prepare(img1, img2, config: NetConfig, dtype):
    img1, img2 = _check_images(img1, img2)
    img1 = img1.astype(dtype, copy=False)
    img2 = img2.astype(dtype, copy=False)
    if config.normalize_input:
        img1, img2 = normalize_pair(img1, img2)
    return img1, img2


def forward_train(img1, img2, config: NetConfig, weights: WeightStore, stop_level: int | None = None):
    """Forward pass that keeps what :func:`backward` needs.

    Returns ``(flows, cache)`` with ``flows`` mapping level -> flow in
    normalised units.
    """
    stop = config.finest if stop_level is None else stop_level
    if stop not in config.levels:
        raise ValueError(f"stop_level {stop} is not among the decoded levels {config.levels}")
    dtype = next(iter(weights.values())).dtype
    img1, img2 = _prepare(img1, img2, config, dtype)
    depth = max(config.coarsest, 3)
    p1, pc1 = _pyramid_forward(img1, weights, config.slope, depth)
    p2, pc2 = _pyramid_forward(img2, weights, config.slope, depth)
    cache = ForwardCache(config, p1, p2, pc1, pc2)
    flows, prior = {}, None
    for lvl in config.levels:
        if lvl < stop:
            break
        prior, cache.levels[lvl] = _decode_forward(p1[lvl - 1], p2[lvl - 1], prior, lvl, config, weights)
        flows[lvl] = prior
    return flows, cache


def backward(cache: ForwardCache, flow_grads: dict, weights: WeightStore) -> WeightStore:
    """Gradients of a scalar loss w.r.t. every weight, given d loss / d flow per level."""
    config = cache.config
    grads: dict = {}
    feat_g1: dict = {}
    feat_g2: dict = {}
    g_prior = None
    for lvl in sorted(cache.levels):
        g = flow_grads.get(lvl)
        if g_prior is not None:
            g = g_prior if g is None else g + g_prior
        if g is None:
            g = np.zeros_like(cache.levels[lvl]["up"])
        g1, g2, g_prior = _decode_backward(g, cache.levels[lvl], lvl, config, weights, grads)
        feat_g1[lvl] = g1
        feat_g2[lvl] = g2
    _pyramid_backward(cache.pyr_cache1, feat_g1, weights, config.slope, grads)
    _pyramid_backward(cache.pyr_cache2, feat_g2, weights, config.slope, grads)
    out = WeightStore()
    for key, value in weights.items():
        out[key] = grads[key] if key in grads else np.zeros_like(value)
    return out


def forward(img1, img2, config: NetConfig, weights: WeightStore, stop_level: int | None = None,
            return_cache: bool = False):
    """Run the network coarse-to-fine and stop after ``stop_level``.

    Returns ``(flows, final)`` where ``flows`` maps level -> flow in
    normalised units and ``final`` is the ``stop_level`` flow resized to the
    input resolution and converted to pixels.
    """
    flows, cache = forward_train(img1, img2, config, weights, stop_level)
    last = flows[min(flows)]
    H, W = img1.shape[2:]
    final = bilinear_resize(last, H, W) * FLOW_SCALE
    if return_cache:
        return flows, final, cache
    return flows, final
