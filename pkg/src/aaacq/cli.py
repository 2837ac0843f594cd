"""Command-line front end: synth, quantize, dequantize, eval, compare.

All commands are deterministic for fixed inputs, flags and seed; progress
and timing go to standard error so reports stay byte-stable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import codebooks, metrics, packfmt, quantizers, tensors
from .errors import AaacqError, PairingError, ValidationError
from .grids import base_table, get_format


@dataclass(frozen=True)
class RunConfig:
    """Resolved flags for one command invocation."""

    fmt_name: str
    group_size: int
    sel_size: int
    n_outer: int
    n_inner: int
    scale_mode: str
    seed: int
    threads: int

    def aaac_config(self) -> codebooks.AaacConfig:
        return codebooks.AaacConfig(
            fmt=get_format(self.fmt_name),
            group_size=self.group_size,
            sel_size=self.sel_size,
            n_outer=self.n_outer,
            n_inner=self.n_inner,
            scale_mode=self.scale_mode,
        )


def _resolve_config(args) -> RunConfig:
    fmt = get_format(args.format)
    group_size = args.group_size if args.group_size else fmt.group_size
    sel_size = args.sel_size if args.sel_size else group_size
    env_threads = os.environ.get("AAAC_THREADS", "")
    try:
        threads = int(env_threads) if env_threads else 0
    except ValueError:
        raise ValidationError(f"AAAC_THREADS must be an integer, got {env_threads!r}")
    threads = threads or args.threads or os.cpu_count() or 1
    return RunConfig(
        fmt_name=fmt.kind,
        group_size=group_size,
        sel_size=sel_size,
        n_outer=args.iters_outer,
        n_inner=args.iters_inner,
        scale_mode=args.scale_mode,
        seed=args.seed,
        threads=threads,
    )


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _check_paths(inputs=(), outputs=()) -> None:
    # Validate every path before any work starts.
    for path in inputs:
        if not os.path.isfile(path):
            raise ValidationError(f"input file not found: {path}")
    for path in outputs:
        if path is None:
            continue
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise ValidationError(f"output directory does not exist: {parent}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _quantize_layer(bundle: tensors.LayerBundle, method: str, cfg) -> packfmt.PackedLayer:
    w = bundle.weights
    if method == "rtn":
        codes, scales = quantizers.rtn_quantize(w, cfg.fmt, cfg.group_size, cfg.scale_mode)
        table = base_table(cfg.fmt)
        zeros = np.zeros((w.shape[0], w.shape[1] // cfg.group_size), dtype=np.uint8)
        return packfmt.pack(
            table, table, zeros, codes, scales,
            kind=cfg.fmt.kind, group_size=cfg.group_size, sel_size=cfg.group_size,
            method="rtn",
        )
    if method == "if4":
        codes, scales, bits = quantizers.if4_quantize(w, cfg.group_size, cfg.scale_mode)
        t0, t1 = quantizers.if4_tables()
        return packfmt.pack(
            t0, t1, bits, codes, scales,
            kind="nvfp4", group_size=cfg.group_size, sel_size=cfg.group_size,
            method="if4",
        )
    if method == "aaac":
        res = codebooks.learn(bundle, cfg)
        _log(
            f"  {bundle.name}: objective {res.trace[0]:.6e} -> {res.trace[-1]:.6e} "
            f"({res.trace.size} steps)"
        )
        return packfmt.pack(
            res.table0, res.table1, res.selection, res.codes, res.scales,
            kind=cfg.fmt.kind, group_size=cfg.group_size, sel_size=cfg.sel_size,
            method="aaac",
        )
    raise ValidationError(f"unknown method {method!r}; supported: {list(metrics.METHODS)}")


def cmd_quantize(args) -> int:
    _check_paths(inputs=[args.archive], outputs=[args.out])
    run = _resolve_config(args)
    cfg = run.aaac_config()
    bundles = tensors.load_tensor_archive(args.archive)
    started = time.perf_counter()

    def work(bundle):
        try:
            return bundle.name, _quantize_layer(bundle, args.method, cfg)
        except AaacqError as exc:
            raise AaacqError(f"layer {bundle.name!r}: {exc}") from exc

    results = _parallel_map(work, bundles, run.threads)
    packfmt.write_pack(args.out, sorted(results, key=lambda item: item[0]))
    _log(
        f"quantized {len(results)} layers with {args.method} "
        f"in {time.perf_counter() - started:.2f}s -> {args.out}"
    )
    return 0


def cmd_dequantize(args) -> int:
    _check_paths(inputs=[args.pack], outputs=[args.out])
    layers = packfmt.read_pack(args.pack)
    out = {}
    for name, p in layers:
        t0, t1, sel, codes, scales = packfmt.unpack(p)
        out[name + ".weight"] = quantizers.dequantize(
            codes, scales, t0, t1, sel, p.group_size, p.sel_size
        )
    tensors.write_tensors(args.out, out)
    _log(f"dequantized {len(layers)} layers -> {args.out}")
    return 0


def _emit_report(report: metrics.EvalReport, args) -> None:
    if args.json:
        text = report.to_json() + "\n"
    elif args.csv:
        text = report.to_csv()
    else:
        text = report.to_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    _check_paths(inputs=[args.pack, args.archive], outputs=[args.out])
    layers = packfmt.read_pack(args.pack)
    bundles = {b.name: b for b in tensors.load_tensor_archive(args.archive)}
    rows = []
    for name, p in layers:
        if name not in bundles:
            raise PairingError(f"packed layer {name!r} has no weights in {args.archive}")
        bundle = bundles[name]
        t0, t1, sel, codes, scales = packfmt.unpack(p)
        if (p.rows, p.cols) != bundle.weights.shape:
            raise PairingError(
                f"packed layer {name!r} shape {(p.rows, p.cols)} does not match "
                f"archive shape {bundle.weights.shape}"
            )
        w_hat = quantizers.dequantize(codes, scales, t0, t1, sel, p.group_size, p.sel_size)
        x_out = None
        if args.w4a8 and bundle.activations is not None:
            x_out = metrics.simulate_w4a8(bundle.activations)
        rows.append(
            metrics.layer_metrics(
                bundle, p.method, w_hat, p.group_size, p.sel_size, p.table_size,
                output_activations=x_out,
            )
        )
    rows.sort(key=lambda r: (r.method, r.layer))
    aggregates = {}
    for method in sorted({r.method for r in rows}):
        mrows = [r for r in rows if r.method == method]
        out_vals = [r.output_mse for r in mrows if r.output_mse is not None]
        aggregates[method] = {
            "mse": float(np.mean([r.mse for r in mrows])),
            "weighted_err": float(np.mean([r.weighted_err for r in mrows])),
            "output_mse": float(np.mean(out_vals)) if len(out_vals) == len(mrows) else None,
            "bpw": float(np.mean([r.bpw for r in mrows])),
        }
    _emit_report(metrics.EvalReport(rows=tuple(rows), aggregates=aggregates), args)
    return 0


def _pinned_suite(seed: int) -> list[tensors.LayerBundle]:
    """Small deterministic layer suite used when compare gets no archive."""
    specs = [
        ("gaussian", 16, 128, 32),
        ("gaussian", 32, 256, 32),
        ("laplace", 16, 128, 32),
        ("laplace", 32, 256, 32),
        ("mixture", 16, 128, 32),
        ("mixture", 32, 256, 32),
    ]
    return [
        tensors.synth_layer(
            tensors.SynthSpec(kind, rows, cols, tokens, seed=seed + i),
            name=f"{kind}-{i}",
        )
        for i, (kind, rows, cols, tokens) in enumerate(specs)
    ]


def cmd_compare(args) -> int:
    _check_paths(inputs=[args.archive] if args.archive else [], outputs=[args.out])
    run = _resolve_config(args)
    cfg = run.aaac_config()
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ValidationError("no methods given")
    if args.archive:
        bundles = tensors.load_tensor_archive(args.archive)
    else:
        bundles = _pinned_suite(run.seed)
    started = time.perf_counter()
    report = metrics.compare(bundles, methods, cfg, threads=run.threads)
    _log(f"compared {len(bundles)} layers in {time.perf_counter() - started:.2f}s")
    _emit_report(report, args)
    return 0


def cmd_synth(args) -> int:
    _check_paths(inputs=[args.config] if args.config else [], outputs=[args.out])
    layers = args.layers
    spec_fields = {
        "kind": args.kind,
        "rows": args.rows,
        "cols": args.cols,
        "tokens": args.tokens,
        "seed": args.seed,
        "sigma": args.sigma,
        "mixture_weights": tuple(args.mixture_weights),
        "mixture_sigmas": tuple(args.mixture_sigmas),
    }
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{args.config}: invalid JSON: {exc}") from exc
        layers = int(doc.pop("layers", layers))
        unknown = set(doc) - set(spec_fields)
        if unknown:
            raise ValidationError(f"{args.config}: unknown keys {sorted(unknown)}")
        for key in ("mixture_weights", "mixture_sigmas"):
            if key in doc:
                doc[key] = tuple(doc[key])
        spec_fields.update(doc)

    bundles = []
    base_seed = spec_fields.pop("seed")
    for i in range(layers):
        spec = tensors.SynthSpec(seed=base_seed + i, **spec_fields)
        bundles.append(tensors.synth_layer(spec, name=f"layer{i:03d}"))
    tensors.save_tensor_archive(args.out, bundles)
    _log(f"wrote {len(bundles)} synthetic layers -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", default="nvfp4", choices=["nvfp4", "int4"],
                   help="base 4-bit format (default nvfp4)")
    p.add_argument("-g", "--group-size", type=int, default=0,
                   help="scale group size (default: 16 for nvfp4, 128 for int4)")
    p.add_argument("-S", "--sel-size", type=int, default=0,
                   help="selection group size (default: same as the scale group)")
    p.add_argument("--iters-outer", type=int, default=3, help="outer iterations (default 3)")
    p.add_argument("--iters-inner", type=int, default=10,
                   help="inner k-means iterations (default 10)")
    p.add_argument("--scale-mode", default="exact-bf16",
                   choices=["exact-bf16", "emulate-e4m3"],
                   help="scale storage rounding (default exact-bf16)")
    p.add_argument("--seed", type=int, default=0, help="seed for synthetic inputs")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads for per-layer work (default: all cores; "
                        "AAAC_THREADS overrides)")


def _add_report_flags(p: argparse.ArgumentParser) -> None:
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", help="emit the report as JSON")
    fmt.add_argument("--csv", action="store_true", help="emit the report as CSV")
    p.add_argument("--out", default=None, help="write the report to a file instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aaacq",
        description="Adaptive-codebook 4-bit weight quantization for linear layers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic calibration archive")
    p.add_argument("--out", required=True, help="output archive path")
    p.add_argument("--config", default=None,
                   help="JSON file with the distribution spec (overrides the flags below)")
    p.add_argument("--layers", type=int, default=1, help="number of layers (default 1)")
    p.add_argument("--kind", default="gaussian", choices=list(tensors.SYNTH_KINDS))
    p.add_argument("-N", "--rows", type=int, default=32)
    p.add_argument("-K", "--cols", type=int, default=128)
    p.add_argument("-T", "--tokens", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--mixture-weights", type=_float_list, default=[0.5, 0.5])
    p.add_argument("--mixture-sigmas", type=_float_list, default=[1.0, 5.0])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", help="quantize an archive into an .aaacq pack")
    p.add_argument("archive", help="input safetensors archive")
    p.add_argument("--out", required=True, help="output .aaacq path")
    p.add_argument("--method", default="aaac", choices=list(metrics.METHODS))
    _add_quant_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="reconstruct weights from an .aaacq pack")
    p.add_argument("pack", help="input .aaacq path")
    p.add_argument("--out", required=True, help="output safetensors archive")
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("eval", help="evaluate a pack against its source archive")
    p.add_argument("pack", help="input .aaacq path")
    p.add_argument("archive", help="source safetensors archive")
    p.add_argument("--w4a8", action="store_true",
                   help="quantize activations to FP8 E4M3 for the output-MSE metric")
    _add_report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run methods side by side on an archive")
    p.add_argument("archive", nargs="?", default=None,
                   help="input archive (omit to use a pinned synthetic suite)")
    p.add_argument("--methods", default="rtn,if4,aaac",
                   help="comma-separated subset of rtn,if4,aaac")
    _add_quant_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AaacqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
