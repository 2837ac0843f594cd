#!/usr/bin/env python3
"""Side-by-side method comparison on synthetic calibration layers.

Builds a deterministic suite of layers with heterogeneous weight
distributions, quantizes each with rtn, if4, and the adaptive-codebook
learner, and prints the per-layer and aggregate report.

    python3 scripts/compare_methods.py --format int4 -S 16 --layers 8
"""

import argparse
import sys

from aaacq.codebooks import AaacConfig
from aaacq.grids import get_format
from aaacq.metrics import compare
from aaacq.tensors import SynthSpec, synth_layer


def build_suite(layers, seed, rows, cols, tokens):
    kinds = ["mixture", "gaussian", "laplace"]
    return [
        synth_layer(
            SynthSpec(kinds[i % 3], rows, cols, tokens, seed=seed + i),
            name=f"{kinds[i % 3]}-{i:02d}",
        )
        for i in range(layers)
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--layers", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-N", "--rows", type=int, default=32)
    parser.add_argument("-K", "--cols", type=int, default=256)
    parser.add_argument("-T", "--tokens", type=int, default=64)
    parser.add_argument("--format", default="nvfp4", choices=["nvfp4", "int4"])
    parser.add_argument("-g", "--group-size", type=int, default=0)
    parser.add_argument("-S", "--sel-size", type=int, default=0)
    parser.add_argument("--methods", default="rtn,if4,aaac")
    parser.add_argument("--json", action="store_true")
    args = parser.parse_args(argv)

    fmt = get_format(args.format)
    g = args.group_size or fmt.group_size
    cfg = AaacConfig(fmt=fmt, group_size=g, sel_size=args.sel_size or g)
    bundles = build_suite(args.layers, args.seed, args.rows, args.cols, args.tokens)
    report = compare(bundles, args.methods.split(","), cfg)
    sys.stdout.write(report.to_json() + "\n" if args.json else report.to_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
