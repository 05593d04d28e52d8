"""File formats: Middlebury ``.flo``, 8-bit RGB images, flow colouring and
the ``FFNW`` weight container. All binary layouts are little-endian."""
from __future__ import annotations

import os
import struct

import numpy as np

from .net import NetConfig, WeightStore
from .tensor import ShapeError

__all__ = [
    "FormatError",
    "FLO_MAGIC",
    "read_flo",
    "write_flo",
    "read_image",
    "write_image",
    "make_color_wheel",
    "flow_to_color",
    "save_weights",
    "load_weights",
]

FLO_MAGIC = 202021.25
WEIGHT_MAGIC = b"FFNW"
WEIGHT_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    """Malformed or truncated file content."""


# -- .flo ----------------------------------------------------------------------

def write_flo(path, flow) -> None:
    """Write a (1, 2, H, W) or (2, H, W) flow in pixel units."""
    flow = np.asarray(flow)
    if flow.ndim == 4:
        if flow.shape[0] != 1:
            raise ShapeError(f".flo holds a single field, got batch {flow.shape[0]}")
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must have 2 channels, got shape {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a ``.flo`` file into a float32 (1, 2, H, W) tensor."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes (need 12)")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {FLO_MAGIC}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h} at byte 4")
    need = 12 + 8 * w * h
    if len(raw) != need:
        kind = "truncated" if len(raw) < need else "trailing data in"
        raise FormatError(f"{path}: {kind} payload, {len(raw)} bytes, expected {need} (data starts at byte 12)")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1)[None].astype(np.float32)


# -- images ----------------------------------------------------------------------

def _ppm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"PPM header ended early at byte {pos}")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header from data


def parse_ppm(raw: bytes) -> np.ndarray:
    """Decode a binary P6 PPM into an (H, W, 3) uint8 array."""
    (magic, *dims), offset = _ppm_tokens(raw, 4)
    if magic != b"P6":
        raise FormatError(f"not a binary RGB PPM: magic {magic!r} at byte 0 (P6 required)")
    try:
        w, h, maxval = (int(t) for t in dims)
    except ValueError as exc:
        raise FormatError(f"malformed PPM header fields {dims!r}") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"nonpositive PPM dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported, maxval {maxval}")
    need = offset + w * h * 3
    if len(raw) < need:
        raise FormatError(f"truncated PPM payload: {len(raw)} bytes, expected {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=offset).reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB image (binary PPM, or PNG through Pillow) as a (1, 3, H, W) tensor in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"P6" or os.fspath(path).lower().endswith((".ppm", ".pnm")):
        pixels = parse_ppm(raw)
    else:
        from PIL import Image

        with Image.open(path) as img:
            if img.mode not in ("RGB", "RGBA", "P", "L"):
                raise FormatError(f"{path}: unsupported image mode {img.mode}")
            if img.mode in ("L",):
                raise FormatError(f"{path}: expected 3 colour channels, got 1")
            pixels = np.asarray(img.convert("RGB"))
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def write_image(path, image) -> None:
    """Write a (1, 3, H, W) or (3, H, W) tensor in [0, 1]; ``.png`` via Pillow, otherwise PPM."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must have 3 channels, got shape {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if os.fspath(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(pixels), "RGB").save(path)
        return
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


# -- flow colouring --------------------------------------------------------------

def make_color_wheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel as a (55, 3) array in [0, 255]."""
    segments = [(15, (255, 0, 0), 1, +1), (6, (255, 255, 0), 0, -1), (4, (0, 255, 0), 2, +1),
                (11, (0, 255, 255), 1, -1), (13, (0, 0, 255), 0, +1), (6, (255, 0, 255), 2, -1)]
    rows = []
    for n, base, chan, sign in segments:
        for i in range(n):
            col = list(base)
            ramp = np.floor(255 * i / n)
            col[chan] = ramp if sign > 0 else 255 - ramp
            rows.append(col)
    return np.array(rows, dtype=np.float64)


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Render a pixel-unit flow as a (1, 3, H, W) RGB tensor in [0, 1].

    Hue follows direction, saturation follows magnitude / ``max_magnitude``
    (default: the 99th percentile magnitude). Zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim == 4:
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must have 2 channels, got shape {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99)) if mag.size else 0.0
        if max_magnitude <= 0:
            max_magnitude = 1.0
    elif max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    wheel = make_color_wheel() / 255.0
    ncols = len(wheel)
    rad = mag / max_magnitude
    a = np.arctan2(-v, -u) / np.pi
    a = np.where(a >= 1.0, -1.0, a)  # +-pi are the same direction; keep rightward at entry 0
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    col = np.where(r <= 1, 1 - r * (1 - col), col * 0.75)
    return np.clip(col, 0.0, 1.0).transpose(2, 0, 1)[None]


# -- weight container ------------------------------------------------------------

def save_weights(path, store: WeightStore) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(store))]
    for name, arr in store.items():
        enc = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", 0))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path, config: NetConfig | None = None) -> WeightStore:
    """Read an ``FFNW`` file; with ``config`` every tensor shape is validated against it."""
    with open(path, "rb") as f:
        rd = _Reader(f.read(), path)
    magic = rd.take(4, "magic")
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {WEIGHT_MAGIC!r}")
    version, count = rd.unpack("<II", "header")
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version} (expected {WEIGHT_VERSION})")
    store = WeightStore()
    for i in range(count):
        (nlen,) = rd.unpack("<H", f"name length of tensor {i}")
        try:
            name = rd.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor {i} name is not UTF-8") from exc
        if name in store:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = rd.unpack("<B", f"rank of {name}")
        dims = rd.unpack(f"<{rank}I", f"dims of {name}")
        (code,) = rd.unpack("<B", f"dtype of {name}")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        data = rd.take(n * dt.itemsize, f"values of {name}")
        store[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(np.float32)
    if rd.pos != len(rd.raw):
        raise FormatError(f"{path}: {len(rd.raw) - rd.pos} trailing bytes after the last tensor")
    if config is not None:
        store.validate(config)
    return store
