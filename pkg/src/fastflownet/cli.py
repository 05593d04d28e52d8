"""Command-line entry point: ``fastflownet {infer,analyze,gradcheck,train-toy,viz,init-weights}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import analyze, gradcheck, io, train
from .estimator import infer_flow
from .net import NetConfig, init_weights

log = logging.getLogger("fastflownet")

COST_MODES = {"cddc": "cddc", "r3": "square_r3", "r4": "square_r4"}


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 448x1024, got {text!r}") from None
    return h, w


def _levels(text: str) -> tuple[int, ...]:
    try:
        hi, lo = (int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must look like 6-2, got {text!r}") from None
    return tuple(range(hi, lo - 1, -1))


def _stop_level(text: str) -> int:
    v = int(text)
    if not 2 <= v <= 6:
        raise argparse.ArgumentTypeError(f"stop level must lie in [2, 6], got {v}")
    return v


def _add_config_flags(p, levels_flag: bool = True):
    p.add_argument("--cost-mode", choices=sorted(COST_MODES), default="cddc")
    p.add_argument("--groups", type=int, choices=(1, 2, 3, 4, 6), default=3)
    if levels_flag:
        p.add_argument("--levels", type=_levels, default=(6, 5, 4, 3, 2), help="decoded levels, e.g. 6-2")


def _config(args) -> NetConfig:
    return NetConfig(cost_mode=COST_MODES[args.cost_mode], decoder_groups=args.groups,
                     levels=getattr(args, "levels", (6, 5, 4, 3, 2)))


def _require_files(*paths):
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"no such file: {p}")


def cmd_infer(args) -> int:
    _require_files(args.img1, args.img2, args.weights)
    config = _config(args)
    t0 = time.perf_counter()
    img1, img2 = io.read_image(args.img1), io.read_image(args.img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image sizes differ: {img1.shape[2:]} vs {img2.shape[2:]}")
    weights = io.load_weights(args.weights, config)
    if args.stop_level not in config.levels:
        raise ValueError(f"stop level {args.stop_level} is not decoded by levels {config.levels}")
    t1 = time.perf_counter()
    stages: dict = {}
    flow = infer_flow(img1, img2, config, weights, args.stop_level, timings=stages)
    t2 = time.perf_counter()
    io.write_flo(args.out, flow)
    if args.color:
        io.write_image(args.color, io.flow_to_color(flow, args.max_magnitude))
    t3 = time.perf_counter()
    print(f"load      {t1 - t0:8.3f} s")
    print(f"resize    {stages['resize_in'] + stages['resize_out']:8.3f} s")
    print(f"network   {stages['network']:8.3f} s  (levels {config.coarsest}..{args.stop_level})")
    print(f"write     {t3 - t2:8.3f} s")
    return 0


def cmd_analyze(args) -> int:
    if args.sweep_groups:
        rows = analyze.group_sweep(args.resolution, cost_modes=(COST_MODES[args.cost_mode],))
        text = analyze.format_sweep(rows)
    else:
        rep = analyze.report(_config(args), args.resolution)
        text = rep.to_csv() if args.format == "csv" else rep.to_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_gradcheck(args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op:<16} max_rel_error={r.max_rel_error:.3e} checked={r.n_checked:<4} {status}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_train_toy(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    config = train.TOY_CONFIG
    img1, img2, flow = train.make_toy_pairs(args.seed, n_pairs=args.pairs)
    weights = init_weights(config, args.seed, gain=train.TOY_INIT_GAIN)
    csv_path = os.path.join(args.out, "loss.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")

        def record(step, value):
            f.write(f"{step},{value!r}\n")
            if step % 20 == 0:
                log.info("step %d loss %.6f", step, value)

        try:
            weights, curve = train.train_gd(config, weights, img1, img2, flow, args.steps, lr=args.lr,
                                            kind=args.loss, callback=record)
        except train.TrainingDiverged as exc:
            print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
            return 1
    io.save_weights(os.path.join(args.out, "weights.ffnw"), weights)
    print(f"initial loss {curve[0]:.6f}  final loss {curve[-1]:.6f}  ratio {curve[-1] / curve[0]:.4f}")
    return 0


def cmd_viz(args) -> int:
    _require_files(args.flo)
    flow = io.read_flo(args.flo)
    io.write_image(args.out, io.flow_to_color(flow, args.max_magnitude))
    return 0


def cmd_init_weights(args) -> int:
    io.save_weights(args.out, init_weights(_config(args), args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastflownet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="estimate flow between two images")
    p.add_argument("img1")
    p.add_argument("img2")
    p.add_argument("--weights", required=True)
    p.add_argument("--stop-level", type=_stop_level, default=2)
    p.add_argument("--out", required=True, help="output .flo path")
    p.add_argument("--color", help="optional colour rendering (.png or .ppm)")
    p.add_argument("--max-magnitude", type=float)
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="parameter and FLOP report")
    _add_config_flags(p)
    p.add_argument("--resolution", type=_resolution, default=analyze.SINTEL_RESOLUTION, help="HxW")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--sweep-groups", action="store_true", help="group-number sweep against reference counts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train a 3-level network on synthetic translations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--loss", choices=("l2", "robust"), default="l2")
    p.add_argument("--lr", type=float, default=train.TOY_LEARNING_RATE)
    p.add_argument("--pairs", type=int, default=train.TOY_PAIRS)
    p.add_argument("--out", required=True, help="output directory for loss.csv and weights.ffnw")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("viz", help="render a .flo file with the colour wheel")
    p.add_argument("flo")
    p.add_argument("--out", required=True)
    p.add_argument("--max-magnitude", type=float)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("init-weights", help="write randomly initialised weights for a configuration")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
