"""Command-line entry point.

Subcommands: phantom (synthetic dataset generation), train (noise-to-noise
training), denoise (run a checkpoint over one volume), eval (metrics over
freshly drawn noise realizations), analyze (analytic FLOPs/parameters),
bench (module wall-time comparison). Every command materializes its
resolved configuration into a run manifest under --out. Exit codes: 0 ok,
2 usage, 3 data or format error, 4 numeric error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__, metrics, perf, phantom, volio
from .errors import NumericError
from .model import (
    PROPOSED,
    UNET_BASELINE,
    ScaledConfig,
    build_network,
    load_checkpoint,
)
from .training import (
    TrainConfig,
    denoise_volume,
    parse_extents,
    parse_train_config,
    train,
)
from dataclasses import replace

DOSE_WINDOW_GY = (0.0, 80.0)
DIFF_WINDOW_GY = (-8.0, 8.0)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_manifest(out_dir, command, resolved: dict, started: float):
    lines = [
        f"command={command}",
        f"tool_version={__version__}",
        f"wall_time_s={time.time() - started:.3f}",
    ]
    lines += [f"{key}={value}" for key, value in sorted(resolved.items())]
    path = os.path.join(out_dir, "run_manifest.txt")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, value = line.split("=", 1)
                entries[key] = value
    return entries


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _max_num_down(extents, unshuffled: bool) -> int:
    best = 0
    while all(e % 2 ** (best + 1 + (1 if unshuffled else 0)) == 0 for e in extents):
        best += 1
    return best


def _warn_divisibility(extents):
    usable = _max_num_down(extents, unshuffled=True)
    if usable < 3:
        print(
            f"warning: extents {'x'.join(str(e) for e in extents)} support at most "
            f"num_down={usable} for the lightweight model (needs divisibility by "
            f"2^(num_down+1)); the desk default is num_down=3, which needs all "
            f"extents divisible by 16",
            file=sys.stderr,
        )


# -- phantom --------------------------------------------------------------------


def cmd_phantom(args) -> int:
    started = time.time()
    extents = parse_extents(args.extents)
    _warn_divisibility(extents)
    out = _ensure_out(args.out)
    phantom.generate_dataset(
        out,
        extents,
        n_cases=args.cases,
        histories=args.histories,
        pairs_per_case=args.pairs,
        seed=args.seed,
    )
    _write_manifest(
        out,
        "phantom",
        {
            "cases": args.cases,
            "pairs": args.pairs,
            "histories": args.histories,
            "extents": args.extents,
            "seed": args.seed,
            "out": out,
        },
        started,
    )
    print(f"wrote {args.cases} cases ({args.pairs} noisy realizations each) to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def _train_config_from_args(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = parse_train_config(args.config, cfg)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.crop is not None:
        overrides["crop_extents"] = parse_extents(args.crop)
    if args.pad is not None:
        overrides["pad"] = args.pad
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.normalization_dose is not None:
        overrides["normalization_dose"] = args.normalization_dose
    if args.no_swap:
        overrides["swap_input_target"] = False
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    started = time.time()
    cfg = _train_config_from_args(args)
    out = _ensure_out(args.out)
    pairs = phantom.load_dataset_pairs(args.data)
    net_cfg = ScaledConfig(args.features, args.down, cfg.crop_extents)
    net = build_network(args.model, net_cfg, seed=cfg.seed)
    checkpoint = os.path.join(out, "checkpoint.ddpk")
    loss_log = os.path.join(out, "loss.csv")

    def progress(step, value):
        if step % (10 * 50) == 0:
            print(f"step {step}: loss {value:.6g}")

    train(net, pairs, cfg, log_path=loss_log, checkpoint_path=checkpoint, progress=progress)
    _write_manifest(
        out,
        "train",
        {
            "data": args.data,
            "out": out,
            "model": args.model,
            "features": args.features,
            "down": args.down,
            "iterations": cfg.iterations,
            "lr": cfg.lr,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "adam_eps": cfg.adam_eps,
            "crop": "x".join(str(c) for c in cfg.crop_extents),
            "pad": cfg.pad,
            "normalization_dose": cfg.normalization_dose,
            "swap_input_target": cfg.swap_input_target,
            "seed": cfg.seed,
            "checkpoint": checkpoint,
            "loss_log": loss_log,
        },
        started,
    )
    print(f"checkpoint written to {checkpoint}")
    return EXIT_OK


# -- denoise -----------------------------------------------------------------------


def cmd_denoise(args) -> int:
    started = time.time()
    out = _ensure_out(args.out)
    net = load_checkpoint(args.checkpoint)
    values, voxel_size, histories, seed = volio.read_dvol(args.input)
    denoised = denoise_volume(net, values, args.normalization_dose)
    out_path = os.path.join(out, "denoised.dvol")
    volio.write_dvol(out_path, denoised, voxel_size, histories, seed)
    volio.export_middle_slices(denoised, out, "denoised", DOSE_WINDOW_GY)
    volio.export_middle_slices(values, out, "input", DOSE_WINDOW_GY)
    _write_manifest(
        out,
        "denoise",
        {
            "checkpoint": args.checkpoint,
            "input": args.input,
            "normalization_dose": args.normalization_dose,
            "out": out,
            "output": out_path,
        },
        started,
    )
    print(f"denoised volume written to {out_path}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def _eval_csv_header() -> str:
    cols = ["case", "realization", "source"] + list(metrics.METRIC_COLUMNS)
    return ",".join(cols)


def cmd_eval(args) -> int:
    started = time.time()
    out = _ensure_out(args.out)
    net = load_checkpoint(args.checkpoint)
    rows = []
    reports: dict[str, list[metrics.MetricsReport]] = {"noisy": [], "denoised": []}
    for case_dir in phantom.list_case_dirs(args.data):
        case = phantom.load_case(case_dir)
        for r in range(args.realizations):
            nseed = phantom.realization_seed(args.seed ^ hash_case(case.case_id), r)
            noisy = phantom.add_quantum_noise(case.clean, args.histories, nseed)
            denoised = denoise_volume(net, noisy.values, args.normalization_dose)
            for source, volume in (("noisy", noisy.values), ("denoised", denoised)):
                report = metrics.evaluate(volume, case.clean, case.ptv, case.body)
                reports[source].append(report)
                flat = report.as_dict()
                rows.append(
                    [case.case_id, str(r), source]
                    + [repr(flat[c]) for c in metrics.METRIC_COLUMNS]
                )
            if r == 0:
                diff = denoised - case.clean.values
                volio.export_middle_slices(
                    diff, out, f"{case.case_id}_diff_denoised", DIFF_WINDOW_GY
                )
                volio.export_middle_slices(
                    noisy.values - case.clean.values,
                    out,
                    f"{case.case_id}_diff_noisy",
                    DIFF_WINDOW_GY,
                )
    csv_path = os.path.join(out, "metrics.csv")
    with open(csv_path, "w") as fh:
        fh.write(_eval_csv_header() + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    table = metrics.summary_table(reports)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    _write_manifest(
        out,
        "eval",
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "realizations": args.realizations,
            "histories": args.histories,
            "seed": args.seed,
            "normalization_dose": args.normalization_dose,
            "out": out,
            "metrics_csv": csv_path,
        },
        started,
    )
    return EXIT_OK


def hash_case(case_id: str) -> int:
    """Stable small hash so per-case noise streams differ deterministically."""
    value = 0
    for ch in case_id:
        value = (value * 131 + ord(ch)) % (1 << 31)
    return value


# -- analyze ----------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    started = time.time()
    extents = parse_extents(args.extents)
    down = args.down if args.down is not None else (5 if args.model == PROPOSED else 6)
    cfg = ScaledConfig(args.features, down, extents)
    net = build_network(args.model, cfg, seed=0)
    report = perf.count_flops(net, extents)
    print(report.table(), end="")
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "flops.csv"), "w") as fh:
            fh.write("\n".join(report.csv_lines()) + "\n")
        with open(os.path.join(out, "flops.txt"), "w") as fh:
            fh.write(report.table())
        _write_manifest(
            out,
            "analyze",
            {
                "model": args.model,
                "features": args.features,
                "down": down,
                "extents": args.extents,
                "out": out,
            },
            started,
        )
    return EXIT_OK


# -- bench ----------------------------------------------------------------------------


def cmd_bench(args) -> int:
    started = time.time()
    extents = parse_extents(args.extents)
    rows = perf.bench_modules(
        extents, channels=args.channels, repeats=args.repeats, seed=args.seed, workers=args.workers
    )
    print(perf.BENCH_CSV_HEADER)
    for row in rows:
        print(row.csv())
    if args.out:
        out = _ensure_out(args.out)
        with open(os.path.join(out, "bench.csv"), "w") as fh:
            fh.write(perf.BENCH_CSV_HEADER + "\n")
            for row in rows:
                fh.write(row.csv() + "\n")
        _write_manifest(
            out,
            "bench",
            {
                "extents": args.extents,
                "channels": args.channels,
                "repeats": args.repeats,
                "workers": args.workers,
                "seed": args.seed,
                "out": out,
            },
            started,
        )
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


_FORMATS_EPILOG = (
    "file formats: DVOL dose volumes and DMSK masks are little-endian binaries "
    "(magic, u32 version, u32 HxWxD extents, f32 voxel sizes in mm, u64 histories, "
    "u64 seed, then f32 values row-major); DDPK checkpoints hold the network tag, "
    "base features, depth, seed, and per-layer f64 weights; CSV outputs carry a "
    "header row; slice images are binary 8-bit PGM."
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdenoise",
        description="Volumetric Monte Carlo dose denoising toolkit",
        epilog=_FORMATS_EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"mcdenoise {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "phantom",
        help="generate a synthetic dose dataset (DVOL/DMSK files)",
        epilog=_FORMATS_EPILOG,
    )
    p.add_argument("--cases", type=int, default=8, help="number of randomized cases")
    p.add_argument("--pairs", type=int, default=2, help="noisy realizations per case")
    p.add_argument("--histories", type=int, default=2, help="simulated history count (low counts mean strong noise)")
    p.add_argument("--extents", default="32x32x16", help="grid extents HxWxD")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="noise-to-noise training on a phantom dataset",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--data", required=True, help="dataset directory from the phantom command")
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=[PROPOSED, UNET_BASELINE], default=PROPOSED)
    p.add_argument("--features", type=int, default=8, help="base feature count")
    p.add_argument("--down", type=int, default=3, help="downsampling module count")
    p.add_argument("--config", help="key=value TrainConfig file; flags win")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--crop", help="training crop extents HxWxD")
    p.add_argument("--pad", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--normalization-dose", type=float, dest="normalization_dose")
    p.add_argument("--no-swap", action="store_true", help="disable input/target swapping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="apply a checkpoint to one DVOL volume",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="noisy DVOL file")
    p.add_argument("--normalization-dose", type=float, default=80.0, dest="normalization_dose")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="metrics over fresh noise realizations of each case",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory holding held-out cases")
    p.add_argument("--realizations", type=int, default=15)
    p.add_argument("--histories", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalization-dose", type=float, default=80.0, dest="normalization_dose")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="analytic FLOPs and parameter counts",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--model", choices=[PROPOSED, UNET_BASELINE], default=PROPOSED)
    p.add_argument("--features", type=int, default=64)
    p.add_argument("--down", type=int, default=None, help="defaults to 5 (lightweight) or 6 (unet)")
    p.add_argument("--extents", default="256x256x64")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="wall-time comparison of module variants",
                       epilog=_FORMATS_EPILOG)
    p.add_argument("--extents", default="32x32x16")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # covers ConfigError, ContractError, ShapeError, FormatError and I/O
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
