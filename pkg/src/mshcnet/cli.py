"""Command-line entry point: ``mshcnet <command> ...``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure,
4 artifact mismatch (corrupt files, checkpoint not matching the data).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    SyntheticSpec,
    filter_bands,
    generate_synthetic,
    load_cube,
    parse_band_list,
    save_cube,
    save_grids,
    save_labels,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    GenerationError,
    NumericalError,
)
from .experiments import (
    DEFAULT_K_LIST,
    RunConfig,
    load_run_config,
    prepare_data,
    run_ablation,
    run_ksweep,
    write_ksweep_csv,
)
from .gradcheck import run_suite
from .metrics import default_palette, evaluate, export_map
from .model import load_checkpoint
from .trainer import predict_cube, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4


def write_manifest(out: Path) -> None:
    """sha256 of every file under ``out`` except the manifest itself."""
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps({"artifacts": entries}, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set)
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
        cfg.train.validate()
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _load_matching_checkpoint(path, cube, labels):
    if not Path(path).exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    state, _, meta = load_checkpoint(path)
    if state.n_bands != cube.shape[2]:
        raise DataError(f"checkpoint expects {state.n_bands} bands, data has {cube.shape[2]}")
    if state.n_classes != labels.n_classes:
        raise DataError(f"checkpoint has {state.n_classes} classes, labels have {labels.n_classes}")
    return state, meta


# ----------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        m=args.m, n=args.n, b=args.b, p=args.p, noise_sigma=args.sigma,
        separation=args.separation, blobs_per_class=args.blobs, seed=args.seed,
        train_fraction=args.train_fraction,
    )
    cube, labels = generate_synthetic(spec)
    out = _out_dir(args.out)
    save_cube(out / "cube.hsc1", cube)
    save_labels(out / "labels.hsl", labels)
    _write_json(out / "config.json", {"data": {"cube": str(out / "cube.hsc1"), "labels": str(out / "labels.hsl")}})
    write_manifest(out)
    hist = np.bincount(labels.grid.reshape(-1), minlength=spec.p + 1)[1:]
    for name, count, (ntr, nte) in zip(labels.class_names, hist, labels.split_counts()):
        print(f"{name}: {count} pixels ({ntr} train, {nte} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cube, labels = prepare_data(cfg.data)
    out = _out_dir(cfg.out)
    _write_json(out / "config.json", cfg.to_dict())
    state, report = train(cube, labels, cfg.model, cfg.train, out_dir=out)
    write_manifest(out)
    last = report.epochs[-1]
    print(f"trained {len(report.epochs)} epochs: loss {last.loss:.5f}, train OA {last.train_oa:.4f}")
    print(f"checkpoint: {report.checkpoint_path}")
    return EXIT_OK


def _predict_from_checkpoint(args):
    cfg = _run_config(args)
    cube, labels = prepare_data(cfg.data)
    with T.default_dtype(cfg.train.precision):
        state, _ = _load_matching_checkpoint(args.checkpoint, cube, labels)
        pred = predict_cube(np.asarray(cube, dtype=cfg.train.precision), state, None, cfg.train.batch_unit, cfg.train.patch_size)
    return cfg, labels, pred


def cmd_eval(args) -> int:
    cfg, labels, pred = _predict_from_checkpoint(args)
    mask = labels.test_mask if args.split == "test" else labels.train_mask
    report = evaluate(pred, labels.grid, mask, labels.n_classes)
    out = _out_dir(cfg.out)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    export_map(pred, default_palette(labels.n_classes), out / "map.ppm")
    write_manifest(out)
    print(f"{args.split}: OA {report.oa:.4f}  AA {report.aa:.4f}  kappa {report.kappa:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, labels, pred = _predict_from_checkpoint(args)
    out = _out_dir(cfg.out)
    save_grids(out / "prediction.hsl", {"prediction": pred}, labels.class_names)
    export_map(pred, default_palette(labels.n_classes), out / "map.ppm")
    write_manifest(out)
    print(f"wrote {out / 'map.ppm'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    cube, labels = prepare_data(cfg.data)
    result = run_ablation(cube, labels, cfg.model, cfg.train)
    out = _out_dir(cfg.out)
    result.write_csv(out / "ablation.csv")
    _write_json(out / "ablation_widths.json", {"fusion": result.fusion_widths, "streams": result.stream_widths})
    write_manifest(out)
    for name, width in result.fusion_widths.items():
        print(f"{name}: fusion width {width}, OA {result.reports[name].oa:.4f}")
    print(result.ordering())
    return EXIT_OK


def cmd_ksweep(args) -> int:
    cfg = _run_config(args)
    try:
        k_list = [int(k) for k in args.k.split(",")] if args.k else list(DEFAULT_K_LIST)
    except ValueError:
        raise ConfigurationError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
    cube, labels = prepare_data(cfg.data)
    rows = run_ksweep(cube, labels, cfg.model, cfg.train, k_list)
    out = _out_dir(cfg.out)
    write_ksweep_csv(rows, out / "ksweep.csv")
    write_manifest(out)
    for k, oa in rows:
        print(f"K={k}: OA {oa:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.2e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} operations pass over {args.seeds} seeds")
    return EXIT_OK


def cmd_convert(args) -> int:
    if not Path(args.header).exists():
        raise ConfigurationError(f"header not found: {args.header}")
    cube = load_cube(args.header, "envi_bsq", args.payload)
    before = cube.bands
    if args.remove_bands:
        cube = filter_bands(cube, parse_band_list(args.remove_bands))
    print(f"bands: {before} -> {cube.bands}")
    out = _out_dir(args.out)
    save_cube(out / "cube.hsc1", cube)
    write_manifest(out)
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def _add_run_args(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("config", nargs=None if config_required else "?", help="run config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mshcnet", description="Multi-stream hybrid network for hyperspectral pixel classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob cube and labels")
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--b", type=int, default=8)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--train-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_run_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "score a checkpoint"), ("predict", cmd_predict, "classify every pixel")):
        p = sub.add_parser(name, help=help_)
        _add_run_args(p)
        p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--split", choices=("test", "train"), default="test")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="leave-one-stream-out comparison")
    _add_run_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ksweep", help="accuracy versus neighbour count K")
    _add_run_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", default=None, help="comma-separated K values")
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convert", help="ENVI band-sequential cube to hsc1")
    p.add_argument("header")
    p.add_argument("--payload", default=None)
    p.add_argument("--remove-bands", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, ContractError) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
