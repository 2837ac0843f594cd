#!/usr/bin/env python3
"""Sweep the selection group size and chart error against storage overhead.

Finer selection groups let more groups switch to their better-fitting table
at a metadata cost of 1/S bits per weight (zero when S equals the scale
group, where the bit hides in the scale sign).

    python3 scripts/selection_sweep.py --format int4 --layers 6
"""

import argparse

from aaacq.codebooks import AaacConfig
from aaacq.grids import get_format
from aaacq.metrics import compare
from aaacq.tensors import SynthSpec, synth_layer


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--layers", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--format", default="int4", choices=["nvfp4", "int4"])
    parser.add_argument("-g", "--group-size", type=int, default=0)
    parser.add_argument("-T", "--tokens", type=int, default=64)
    args = parser.parse_args(argv)

    fmt = get_format(args.format)
    g = args.group_size or fmt.group_size
    bundles = [
        synth_layer(SynthSpec("mixture", 32, 512, args.tokens, seed=args.seed + i),
                    name=f"mix-{i:02d}")
        for i in range(args.layers)
    ]

    sweep = [s for s in (4, 8, 16, 32, 64, 128) if s <= g and g % s == 0]
    print(f"format={fmt.kind} g={g}  ({args.layers} mixture layers)")
    print(f"{'S':>4}  {'weighted_err':>14}  {'bpw':>7}")
    baseline = None
    for sel_size in sweep:
        cfg = AaacConfig(fmt=fmt, group_size=g, sel_size=sel_size)
        report = compare(bundles, ["aaac"], cfg)
        agg = report.aggregates["aaac"]
        if baseline is None:
            baseline = agg["weighted_err"]
        rel = agg["weighted_err"] / baseline
        print(f"{sel_size:>4}  {agg['weighted_err']:>14.6e}  {agg['bpw']:>7.4f}  ({rel:.3f}x)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
