"""Command-line interface.

Subcommands: gen-data, train, eval, count-params, overlap, compare, describe.
Exit code 0 on success; failures print one machine-parseable line to stderr
(``error: <message>``) and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as data_mod
from .evaluate import (
    ExperimentConfig,
    checkerboard_overlap,
    compare,
    evaluate,
    parse_rows_csv,
    run_experiment,
    zero_predictor_epe,
)
from .networks import (
    TOPOLOGY_NAMES,
    build_network,
    count_params,
    describe,
    format_layer_table,
    topology,
)
from .weights_io import load_weights


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # single-line errors, machine-parseable
        sys.stderr.write(f"error: {message}\n")
        sys.exit(2)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subpixnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset with ground truth")
    g.add_argument("--mode", choices=("flow", "stereo"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", default="64x64", help="HxW, e.g. 64x64")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run an experiment from a config file")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate saved weights on a dataset manifest")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True, help="manifest file path")
    e.add_argument("--split", default="val", choices=("train", "val", "all"))

    c = sub.add_parser("count-params", help="parameter count of a named topology")
    c.add_argument("--net", required=True, choices=TOPOLOGY_NAMES)
    c.add_argument("--width-mult", default="1")
    c.add_argument("--num-stages", type=int, default=6)

    o = sub.add_parser("overlap", help="transposed-convolution overlap analysis")
    o.add_argument("--kernel", type=int, required=True)
    o.add_argument("--stride", type=int, required=True)
    o.add_argument("--length", type=int, default=16)

    m = sub.add_parser("compare", help="format result rows as a report")
    m.add_argument("--in", dest="rows", required=True, help="rows CSV path")
    m.add_argument("--format", choices=("md", "csv"), default="md")

    d = sub.add_parser("describe", help="layer table of a named topology")
    d.add_argument("--net", required=True, choices=TOPOLOGY_NAMES)
    d.add_argument("--width-mult", default="1")
    d.add_argument("--num-stages", type=int, default=6)
    d.add_argument("--input-size", default=None, help="HxW for the output-shape column")
    return p


def _parse_size(text: str) -> tuple[int, int]:
    h, w = (int(v) for v in text.lower().split("x"))
    return h, w


def _cmd_gen_data(args) -> int:
    size = _parse_size(args.size)
    gen = data_mod.gen_synthetic_flow if args.mode == "flow" else data_mod.gen_synthetic_stereo
    samples = gen(args.n, size, np.random.default_rng(args.seed))
    manifest = data_mod.save_samples(samples, args.out, args.seed)
    print(f"wrote {len(manifest.records)} {args.mode} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.from_config_text(Path(args.config).read_text(encoding="ascii"))
    row = run_experiment(cfg)
    print(compare([row], "csv"), end="")
    print(f"artifacts under {cfg.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    net = load_weights(args.weights)
    manifest = data_mod.load_manifest(args.data)
    base = Path(args.data).parent
    split = None if args.split == "all" else args.split
    samples = data_mod.load_samples(manifest, base, split=split)
    if not samples:
        raise ValueError(f"no samples in split {args.split!r} of {args.data}")
    mean, per = evaluate(net, samples)
    print(f"mean_epe = {mean!r} over {len(per)} samples")
    print(f"zero_predictor_epe = {zero_predictor_epe(samples)!r}")
    return 0


def _cmd_count_params(args) -> int:
    spec = topology(args.net, width_mult=Fraction(args.width_mult), num_stages=args.num_stages)
    net = build_network(spec, 0)
    n = count_params(net)
    print(f"{args.net} width_mult={args.width_mult} params={n} ({n / 1e6:.3f} M)")
    return 0


def _cmd_overlap(args) -> int:
    rep = checkerboard_overlap(args.kernel, args.stride, args.length)
    counts = " ".join(str(v) for v in rep.counts)
    print(f"kernel={args.kernel} stride={args.stride} uniform={str(rep.uniform).lower()}")
    print(f"counts: {counts}")
    return 0


def _cmd_compare(args) -> int:
    rows = parse_rows_csv(Path(args.rows).read_text(encoding="ascii"))
    fmt = "markdown" if args.format == "md" else "csv"
    print(compare(rows, fmt), end="")
    return 0


def _cmd_describe(args) -> int:
    spec = topology(args.net, width_mult=Fraction(args.width_mult), num_stages=args.num_stages)
    input_hw = _parse_size(args.input_size) if args.input_size else None
    print(format_layer_table(describe(spec), input_hw))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count-params": _cmd_count_params,
    "overlap": _cmd_overlap,
    "compare": _cmd_compare,
    "describe": _cmd_describe,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        message = " ".join(str(e).split())  # keep the error on one line
        sys.stderr.write(f"error: {message}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
