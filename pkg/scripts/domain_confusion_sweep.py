#!/usr/bin/env python3
"""Multi-seed domain-confusion experiment.

For each seed: train the alignment VAE on a shared 2-domain phantom set,
then probe domain identity with a logistic classifier on (a) raw per-volume
intensity statistics and (b) latent mean vectors, and report the first- vs
final-epoch training MMD. Prints one row per seed.

Usage: domain_confusion_sweep.py [--config configs/desk2.json]
                                 [--out runs/confusion] [--seeds 0 1 2]
"""

import argparse
import json
import sys
from pathlib import Path

from vaemmd.cli import (
    build_phantom_spec,
    build_train_config,
    load_experiment_config,
    main as cli_main,
)
from vaemmd import phantoms, volume, trainer


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk2.json")
    ap.add_argument("--out", default="runs/confusion")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args(argv)

    doc = load_experiment_config(args.config)
    out = Path(args.out)
    data_dir = out / "data"
    phantoms.generate_dataset(build_phantom_spec(doc), data_dir)
    manifest_path = data_dir / "manifest.json"

    rows = []
    for seed in args.seeds:
        vae_dir = out / f"vae_seed{seed}"
        rc = cli_main([
            "train-vae", "--config", args.config,
            "--manifest", str(manifest_path), "--out", str(vae_dir),
            "--seed", str(seed),
        ])
        if rc != 0:
            return rc
        dom_dir = out / f"domain_seed{seed}"
        rc = cli_main([
            "eval-domain", "--checkpoint", str(vae_dir / "best.ckpt"),
            "--manifest", str(manifest_path), "--out", str(dom_dir),
            "--train-log", str(vae_dir / "train_log.jsonl"),
        ])
        if rc != 0:
            return rc
        rep = json.loads((dom_dir / "domain_report.json").read_text())
        rows.append((seed, rep["before"]["accuracy"], rep["after"]["accuracy"],
                     rep["mmd_ratio"]))

    print(f"{'seed':>4} {'raw acc':>8} {'latent acc':>10} {'mmd ratio':>10}")
    for seed, before, after, ratio in rows:
        print(f"{seed:>4} {before:>8.3f} {after:>10.3f} {ratio:>10.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
