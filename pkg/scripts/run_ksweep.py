#!/usr/bin/env python3
"""Held-out OA as a function of the neighbour count K.

Either sweeps a synthetic cube (default) or a prepared run config:

    python3 scripts/run_ksweep.py --config runs/pines.json --epochs 50
"""
import argparse
import logging
from pathlib import Path

from mshcnet.data import SyntheticSpec, generate_synthetic, normalize
from mshcnet.experiments import DEFAULT_K_LIST, load_run_config, prepare_data, run_ksweep, write_ksweep_csv
from mshcnet.model import ModelConfig
from mshcnet.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=None, help="run config JSON; omit for a synthetic cube")
    ap.add_argument("--k", default=",".join(map(str, DEFAULT_K_LIST)))
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/ksweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.config:
        cfg = load_run_config(args.config, [f"train.epochs={args.epochs}"])
        cube, labels = prepare_data(cfg.data)
        mcfg, tcfg = cfg.model, cfg.train
    else:
        raw, labels = generate_synthetic(SyntheticSpec(m=32, n=32, b=8, p=4, noise_sigma=0.1, blobs_per_class=3, seed=7))
        cube = normalize(raw).values
        mcfg, tcfg = ModelConfig(), TrainConfig(epochs=args.epochs)

    rows = run_ksweep(cube, labels, mcfg, tcfg, [int(k) for k in args.k.split(",")])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ksweep_csv(rows, out / "ksweep.csv")
    for k, oa in rows:
        print(f"K={k:>3}  OA {oa:.4f}")


if __name__ == "__main__":
    main()
