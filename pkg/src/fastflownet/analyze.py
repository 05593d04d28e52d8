"""Parameter and multiply-add accounting for every network variant.

One FLOP here is one multiply-add. Convolutions cost
``kh * kw * (C_in / g) * C_out`` per output pixel, correlation costs
``C * D`` per pixel for D offsets, warping costs four taps per channel and
pixel, and pooling, activations and shuffles are free.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .net import LEVEL_CHANNELS, NetConfig, layer_table

__all__ = [
    "SINTEL_RESOLUTION",
    "CostRow",
    "CostReport",
    "count_params",
    "count_flops",
    "report",
    "REFERENCE_COUNTS",
    "group_sweep",
    "format_sweep",
]

SINTEL_RESOLUTION = (448, 1024)  # 436x1024 padded to a multiple of 64

# Reference (params in M, GFLOPs) per cost mode and decoder group count.
REFERENCE_COUNTS = {
    ("cddc", 1): (2.20, 19.2),
    ("cddc", 2): (1.57, 14.0),
    ("cddc", 3): (1.37, 12.2),
    ("cddc", 4): (1.26, 11.3),
    ("cddc", 6): (1.16, 10.4),
    ("square_r3", 1): (2.18, 19.1),
    ("square_r4", 1): (3.27, 28.3),
}
# the r=4 reference uses a 128-channel decoder that is not built here
UNSUPPORTED_FOR_EXACT_MATCH = {("square_r4", 1)}


@dataclass(frozen=True)
class CostRow:
    layer: str
    module: str
    level: int
    params: int
    flops: int


@dataclass
class CostReport:
    config: NetConfig
    resolution: tuple[int, int]
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def by_module(self) -> dict[tuple[str, int | None], tuple[int, int]]:
        """(module, level) -> (params, flops); the pyramid is one group."""
        out: dict = {}
        for r in self.rows:
            key = (r.module, None if r.module == "HEPP" else r.level)
            p, f = out.get(key, (0, 0))
            out[key] = (p + r.params, f + r.flops)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "module", "level", "params", "flops"])
        for r in self.rows:
            writer.writerow([r.layer, r.module, r.level, r.params, r.flops])
        return buf.getvalue()

    def to_text(self) -> str:
        h, w = self.resolution
        lines = [
            f"config: cost={self.config.cost_mode} groups={self.config.decoder_groups} "
            f"levels={','.join(map(str, self.config.levels))} resolution={h}x{w}",
            f"{'layer':<12} {'module':<6} {'level':>5} {'params':>10} {'flops':>15}",
        ]
        for r in self.rows:
            lines.append(f"{r.layer:<12} {r.module:<6} {r.level:>5} {r.params:>10,} {r.flops:>15,}")
        lines.append(f"{'total':<12} {'':<6} {'':>5} {self.total_params:>10,} {self.total_flops:>15,}")
        lines.append(f"params: {self.total_params / 1e6:.2f}M  flops: {self.total_flops / 1e9:.1f}G")
        return "\n".join(lines) + "\n"


def _check_resolution(height: int, width: int):
    if height % 64 or width % 64 or height < 64 or width < 64:
        raise ValueError(f"resolution {height}x{width} must be a positive multiple of 64 in both dimensions")


def report(config: NetConfig = NetConfig(), resolution: tuple[int, int] = SINTEL_RESOLUTION) -> CostReport:
    """Per-layer parameters and multiply-adds at ``resolution`` (height, width)."""
    height, width = resolution
    _check_resolution(height, width)
    rep = CostReport(config, (height, width))
    for row in layer_table(config, include_free=True):
        pixels = (height >> row.level) * (width >> row.level)
        if row.kind in ("conv", "deconv"):
            spec = row.spec
            kh, kw = spec.kernel
            macs = kh * kw * (spec.in_channels // spec.groups) * spec.out_channels * pixels
            if row.module == "HEPP":
                macs *= 2  # the pyramid runs once per input image
            rep.rows.append(CostRow(row.name, row.module, row.level, spec.n_params, macs))
        elif row.kind == "corr":
            rep.rows.append(CostRow(row.name, row.module, row.level, 0, row.extra["channels"] * row.extra["offsets"] * pixels))
        elif row.kind == "warp":
            rep.rows.append(CostRow(row.name, row.module, row.level, 0, 4 * row.extra["channels"] * pixels))
        else:
            rep.rows.append(CostRow(row.name, row.module, row.level, 0, 0))
    return rep


def count_params(config: NetConfig = NetConfig()) -> int:
    return sum(row.spec.n_params for row in layer_table(config))


def count_flops(config: NetConfig = NetConfig(), height: int = SINTEL_RESOLUTION[0],
                width: int = SINTEL_RESOLUTION[1]) -> int:
    return report(config, (height, width)).total_flops


def group_sweep(resolution=SINTEL_RESOLUTION, cost_modes=("cddc",), groups=(1, 2, 3, 4, 6)):
    """Rows of (cost_mode, groups, params, flops, ref_params_M, ref_gflops, supported)."""
    rows = []
    for mode in cost_modes:
        for g in groups:
            cfg = NetConfig(cost_mode=mode, decoder_groups=g)
            ref = REFERENCE_COUNTS.get((cfg.cost_mode, g))
            rows.append((
                cfg.cost_mode, g, count_params(cfg), count_flops(cfg, *resolution),
                ref[0] if ref else None, ref[1] if ref else None,
                (cfg.cost_mode, g) not in UNSUPPORTED_FOR_EXACT_MATCH,
            ))
    return rows


def format_sweep(rows) -> str:
    lines = [f"{'cost':<10} {'g':>2} {'params':>8} {'ref':>6} {'delta':>7} {'GFLOPs':>7} {'ref':>6} {'delta':>7}"]
    for mode, g, params, flops, ref_p, ref_f, supported in rows:
        p, f = params / 1e6, flops / 1e9
        if ref_p is None:
            lines.append(f"{mode:<10} {g:>2} {p:>7.2f}M {'-':>6} {'-':>7} {f:>6.1f}G {'-':>6} {'-':>7}")
            continue
        note = "" if supported else "  unsupported-for-exact-match"
        lines.append(
            f"{mode:<10} {g:>2} {p:>7.2f}M {ref_p:>5.2f}M {p - ref_p:>+7.2f} "
            f"{f:>6.1f}G {ref_f:>5.1f}G {f - ref_f:>+7.1f}{note}"
        )
    return "\n".join(lines) + "\n"
