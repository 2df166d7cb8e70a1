"""Single command-line entry point.

Subcommands cover the full experiment ladder: phantom generation, VAE
training, reconstruction, latent embedding, domain-confusion probing,
segmenter training on raw vs reconstructed inputs, segmentation evaluation,
and a `reproduce` command that chains everything from one JSON config.

Exit codes: 0 success, 2 invalid/missing configuration, 3 missing upstream
artifact, 4 internal numerical failure. Every command validates its inputs
before writing anything and drops a run_metadata.json (config hash, seed,
package version — deliberately no timestamps, so reruns are byte-identical).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint as ckpt
from . import losses, metrics, phantoms, segmenter, trainer, volume
from .autodiff import Tensor
from .metrics import MetricError
from .model import ConfigError
from .phantoms import PhantomError
from .segmenter import SegError, UNetConfig
from .trainer import TrainConfig, TrainError
from .volume import ManifestError, VolumeError


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

_CONFIG_EXC = (ConfigError, TrainError, PhantomError, SegError, MetricError,
               losses.LossError, KeyError, TypeError)
_ARTIFACT_EXC = (FileNotFoundError, ManifestError, ckpt.CheckpointError, VolumeError)
_NUMERIC_EXC = (FloatingPointError, ZeroDivisionError, np.linalg.LinAlgError)


# ----------------------------------------------------------------------
# experiment configuration
# ----------------------------------------------------------------------

def load_experiment_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"malformed config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise CliError(EXIT_CONFIG, "config root must be a JSON object")
    return doc


def build_phantom_spec(doc: dict) -> phantoms.PhantomSpec:
    sec = doc.get("phantoms")
    if not isinstance(sec, dict):
        raise CliError(EXIT_CONFIG, "config needs a 'phantoms' object")
    styles = []
    for entry in sec.get("styles", []):
        if isinstance(entry, str):
            if entry not in phantoms.PRESET_STYLES:
                raise CliError(
                    EXIT_CONFIG,
                    f"unknown style preset {entry!r}; available: {sorted(phantoms.PRESET_STYLES)}",
                )
            styles.append(phantoms.PRESET_STYLES[entry])
        else:
            styles.append(phantoms.style_from_dict(entry))
    if len(styles) < 2:
        raise CliError(EXIT_CONFIG, "phantom config needs >= 2 domain styles")
    spec = phantoms.PhantomSpec(
        shape=tuple(sec.get("shape", (32, 32, 32))),
        spacing_mm=tuple(sec.get("spacing_mm", (1.0, 1.0, 1.0))),
        styles=styles,
        cases_per_domain=int(sec.get("cases_per_domain", 20)),
        seed=int(sec.get("seed", 0)),
        val_fraction=float(sec.get("val_fraction", 0.25)),
    )
    for s in styles:
        s.validate()
    return spec


def build_train_config(doc: dict, seed_override=None) -> TrainConfig:
    sec = doc.get("train")
    if not isinstance(sec, dict):
        raise CliError(EXIT_CONFIG, "config needs a 'train' object")
    cfg = TrainConfig.from_dict(sec)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def build_unet_config(doc: dict, seed_override=None) -> UNetConfig:
    sec = doc.get("segmenter")
    if not isinstance(sec, dict):
        raise CliError(EXIT_CONFIG, "config needs a 'segmenter' object")
    cfg = UNetConfig.from_dict(sec)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def eval_options(doc: dict):
    sec = doc.get("eval", {})
    connectivity = int(sec.get("connectivity", 26))
    tolerance = float(sec.get("tolerance_mm", 1.0))
    if connectivity not in (6, 18, 26):
        raise CliError(EXIT_CONFIG, f"connectivity must be 6, 18, or 26, got {connectivity}")
    if tolerance <= 0:
        raise CliError(EXIT_CONFIG, "tolerance_mm must be positive")
    return connectivity, tolerance


def write_run_metadata(out_dir, command: str, config_doc=None, seed=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(config_doc, sort_keys=True) if config_doc is not None else ""
    meta = {
        "metadata_version": 1,
        "command": command,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": seed,
        "package_version": __version__,
    }
    _write_json(out_dir / "run_metadata.json", meta)


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _load_manifest(path) -> volume.DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_ARTIFACT, f"manifest not found: {path}")
    return volume.load_manifest(path)


def _require_file(path, what):
    if path is None:
        raise CliError(EXIT_CONFIG, f"missing required {what}")
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_ARTIFACT, f"{what} not found: {path}")
    return path


def _check_finite(values, context):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise CliError(EXIT_NUMERIC, f"non-finite values in {context}")


def _cases_for_split(manifest, split):
    if split == "all":
        cases = list(manifest.cases)
    else:
        cases = manifest.by_split(split)
    if not cases:
        raise CliError(EXIT_ARTIFACT, f"no cases in split {split!r}")
    return sorted(cases, key=lambda c: c.case_id)


# ----------------------------------------------------------------------
# shared inference helpers
# ----------------------------------------------------------------------

def _latent_mu(state, voxels: np.ndarray) -> np.ndarray:
    x = Tensor(np.asarray(voxels, dtype=np.float32)[None, None, ...])
    with ad.no_grad():
        dist, _ = state.model.encoder_forward(x, mode="eval")
    return dist.mu.data[0].astype(np.float64)


def _reconstruct_case(state, voxels: np.ndarray) -> np.ndarray:
    return segmenter.reconstruct_case(state, voxels)


def raw_volume_features(voxels: np.ndarray) -> np.ndarray:
    """Per-volume intensity statistics on the unnormalized image."""
    v = np.asarray(voxels, dtype=np.float64).ravel()
    return np.array([v.mean(), v.std(), np.percentile(v, 25), np.percentile(v, 75)])


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_phantoms(args):
    doc = load_experiment_config(args.config)
    spec = build_phantom_spec(doc)
    out = Path(args.out)
    manifest = phantoms.generate_dataset(spec, out)
    write_run_metadata(out, "gen-phantoms", doc, spec.seed)
    print(f"manifest: {out / 'manifest.json'} ({len(manifest.cases)} cases)")
    return 0


def cmd_train_vae(args):
    doc = load_experiment_config(args.config)
    cfg = build_train_config(doc, args.seed)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    best, log = trainer.train_vae(manifest, cfg, out)
    write_run_metadata(out, "train-vae", doc, cfg.seed)
    summary = [r for r in log if r["kind"] == "summary"][-1]
    _check_finite([summary["best_val_total"]], "training summary")
    print(f"checkpoint: {best} (best epoch {summary['best_epoch']}, "
          f"val total {summary['best_val_total']:.4f})")
    return 0


def cmd_reconstruct(args):
    manifest = _load_manifest(args.manifest)
    ckpt_path = _require_file(args.checkpoint, "VAE checkpoint")
    state, _ = trainer.load_train_checkpoint(ckpt_path)
    cases = _cases_for_split(manifest, args.split)
    out = Path(args.out)
    (out / "recons").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in cases:
        vol = volume.read_volume(manifest.resolve(c.image_path))
        x = volume.minmax_to_range(vol).voxels
        xhat = _reconstruct_case(state, x)
        if not np.all(np.isfinite(xhat)):
            raise CliError(EXIT_NUMERIC, f"non-finite reconstruction for case {c.case_id!r}")
        volume.write_volume(
            volume.make_image(xhat, vol.spacing), out / "recons" / f"{c.case_id}_recon.rvol"
        )
        # unit-range convention: map [-1,1] to [0,1] before MSE/PSNR
        mse = float((((x - xhat) / 2.0) ** 2).mean())
        rows.append({
            "case_id": c.case_id, "domain_id": c.domain_id, "split": c.split,
            "mse": mse, "psnr_db": losses.psnr_from_mse(mse),
        })
    finite = [r["psnr_db"] for r in rows if not math.isinf(r["psnr_db"])]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    _check_finite([r["mse"] for r in rows], "reconstruction MSE")
    report = {
        "cases": rows,
        "mean_mse": float(np.mean([r["mse"] for r in rows])),
        "mean_psnr_db": mean_psnr,
        "n_cases": len(rows),
    }
    _write_json(out / "recon_report.json", report)
    write_run_metadata(out, "reconstruct")
    print(f"mean PSNR {mean_psnr:.2f} dB over {len(rows)} cases -> {out / 'recon_report.json'}")
    return 0


def cmd_embed(args):
    manifest = _load_manifest(args.manifest)
    ckpt_path = _require_file(args.checkpoint, "VAE checkpoint")
    if args.method not in ("pca", "tsne"):
        raise CliError(EXIT_CONFIG, f"unknown embedding method {args.method!r}")
    state, _ = trainer.load_train_checkpoint(ckpt_path)
    cases = _cases_for_split(manifest, args.split)
    feats = []
    for c in cases:
        vol = volume.read_volume(manifest.resolve(c.image_path))
        feats.append(_latent_mu(state, volume.minmax_to_range(vol).voxels))
    coords = metrics.embed_project(np.stack(feats), method=args.method, seed=args.seed)
    _check_finite(coords, "embedding coordinates")
    out = Path(args.out)
    doc = {
        "method": args.method,
        "points": [
            {"case_id": c.case_id, "domain_id": c.domain_id, "split": c.split,
             "x": float(xy[0]), "y": float(xy[1])}
            for c, xy in zip(cases, coords)
        ],
    }
    _write_json(out / f"embed_{args.method}.json", doc)
    write_run_metadata(out, "embed", seed=args.seed)
    print(f"wrote {len(cases)} points -> {out / f'embed_{args.method}.json'}")
    return 0


def _epoch_mmd_means(log_path):
    by_epoch = {}
    for line in Path(log_path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("kind") == "step":
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss"]["mmd"])
    if not by_epoch:
        return None
    first = min(by_epoch)
    last = max(by_epoch)
    return float(np.mean(by_epoch[first])), float(np.mean(by_epoch[last]))


def cmd_eval_domain(args):
    manifest = _load_manifest(args.manifest)
    ckpt_path = _require_file(args.checkpoint, "VAE checkpoint")
    state, _ = trainer.load_train_checkpoint(ckpt_path)
    cases = _cases_for_split(manifest, args.split)
    labels = [c.domain_id for c in cases]
    if len(set(labels)) < 2:
        raise CliError(EXIT_CONFIG, "eval-domain needs cases from >= 2 domains")
    raw_feats, latent_feats = [], []
    for c in cases:
        vol = volume.read_volume(manifest.resolve(c.image_path))
        raw_feats.append(raw_volume_features(vol.voxels))
        latent_feats.append(_latent_mu(state, volume.minmax_to_range(vol).voxels))
    before = metrics.logistic_domain_classifier(
        np.stack(raw_feats), labels, seed=args.seed,
        feature_description="per-volume intensity stats (mean, std, p25, p75)",
    )
    after = metrics.logistic_domain_classifier(
        np.stack(latent_feats), labels, seed=args.seed,
        feature_description="latent mean vector",
    )
    doc = {"before": before.to_dict(), "after": after.to_dict()}
    if args.train_log:
        log_path = _require_file(args.train_log, "training log")
        mmds = _epoch_mmd_means(log_path)
        if mmds is not None:
            first, last = mmds
            doc["mmd_first_epoch"] = first
            doc["mmd_final_epoch"] = last
            doc["mmd_ratio"] = last / first if first > 0 else math.nan
    out = Path(args.out)
    _write_json(out / "domain_report.json", doc)
    write_run_metadata(out, "eval-domain", seed=args.seed)
    print(f"domain accuracy: raw features {before.accuracy:.3f} -> latent mu {after.accuracy:.3f}")
    return 0


VARIANT_ALIASES = {"raw": "raw", "vae": "vae_reconstructed", "vae_reconstructed": "vae_reconstructed"}


def cmd_train_seg(args):
    doc = load_experiment_config(args.config)
    cfg = build_unet_config(doc, args.seed)
    manifest = _load_manifest(args.manifest)
    if args.variant not in VARIANT_ALIASES:
        raise CliError(EXIT_CONFIG, f"unknown variant {args.variant!r} (raw|vae)")
    variant = VARIANT_ALIASES[args.variant]
    vae_ckpt = None
    if variant == "vae_reconstructed":
        vae_ckpt = _require_file(args.vae_checkpoint, "--vae-checkpoint")
    out = Path(args.out)
    best, log = segmenter.train_segmenter(manifest, variant, cfg, vae_ckpt, out)
    write_run_metadata(out, "train-seg", doc, cfg.seed)
    summary = [r for r in log if r["kind"] == "summary"][-1]
    _check_finite([summary["best_val_loss"]], "segmenter training summary")
    print(f"checkpoint: {best} ({variant}, best epoch {summary['best_epoch']})")
    return 0


def cmd_eval_seg(args):
    manifest = _load_manifest(args.manifest)
    seg_ckpt = _require_file(args.seg_checkpoint, "segmenter checkpoint")
    model, meta = segmenter.load_segmenter(seg_ckpt)
    variant = meta.get("input_variant", "raw")
    vae_ckpt = None
    if variant == "vae_reconstructed":
        vae_ckpt = _require_file(args.vae_checkpoint, "--vae-checkpoint (segmenter was trained on reconstructions)")
    cases = _cases_for_split(manifest, args.split)
    out = Path(args.out)
    images = segmenter.prepare_inputs(manifest, cases, variant, vae_ckpt, out / "recon")
    per_case = []
    by_domain = {}
    for c in cases:
        gt_vol = volume.read_volume(manifest.resolve(c.mask_path))
        pred = segmenter.predict_mask(model, images[c.case_id])
        segmenter.write_prediction(pred, gt_vol.spacing, out / "preds", c.case_id)
        cm = metrics.evaluate_case(
            c.case_id, gt_vol.voxels, pred, gt_vol.spacing,
            tolerance_mm=args.tolerance_mm, connectivity=args.connectivity,
        )
        per_case.append((c.domain_id, cm))
        by_domain.setdefault(c.domain_id, []).append(cm)
    cohort_doc = metrics.aggregate_cases([cm for _, cm in per_case]).to_dict()
    domain_docs = {
        d: metrics.aggregate_cases(v).to_dict() for d, v in sorted(by_domain.items())
    }
    report = {
        "input_variant": variant,
        "cohort": cohort_doc["cohort"],
        "cases": cohort_doc["cases"],
        "domains": {d: doc["cohort"] for d, doc in domain_docs.items()},
    }
    _write_json(out / "seg_report.json", report)
    table = metrics.render_table(
        {**{f"domain {d}": doc["cohort"] for d, doc in domain_docs.items()},
         "cohort": cohort_doc["cohort"]},
        title=f"segmentation metrics ({variant})",
    )
    (out / "seg_report.txt").write_text(table + "\n")
    write_run_metadata(out, "eval-seg")
    print(table)
    return 0


def cmd_reproduce(args):
    doc = load_experiment_config(args.config)
    workdir = Path(args.out or doc.get("workdir", "reproduce_run"))
    spec = build_phantom_spec(doc)
    train_cfg = build_train_config(doc)
    seg_cfg = build_unet_config(doc)
    connectivity, tolerance = eval_options(doc)

    data_dir = workdir / "data"
    phantoms.generate_dataset(spec, data_dir)
    manifest = volume.load_manifest(data_dir / "manifest.json")
    print(f"[1/6] phantoms: {len(manifest.cases)} cases in {data_dir}")

    vae_dir = workdir / "vae"
    best_vae, _ = trainer.train_vae(manifest, train_cfg, vae_dir)
    print(f"[2/6] vae checkpoint: {best_vae}")

    ns = argparse.Namespace(
        manifest=data_dir / "manifest.json", checkpoint=best_vae, split="all",
        out=workdir / "domain", seed=0, train_log=vae_dir / "train_log.jsonl",
    )
    cmd_eval_domain(ns)
    print("[3/6] domain report written")

    ns = argparse.Namespace(
        manifest=data_dir / "manifest.json", checkpoint=best_vae, split="test",
        out=workdir / "recon",
    )
    cmd_reconstruct(ns)
    print("[4/6] reconstruction report written")

    seg_reports = {}
    for variant, alias in (("raw", "raw"), ("vae_reconstructed", "vae")):
        seg_dir = workdir / f"seg_{alias}"
        vae_ckpt = best_vae if variant == "vae_reconstructed" else None
        segmenter.train_segmenter(manifest, variant, seg_cfg, vae_ckpt, seg_dir)
        ns = argparse.Namespace(
            manifest=data_dir / "manifest.json", seg_checkpoint=seg_dir / "seg_best.ckpt",
            vae_checkpoint=vae_ckpt, split="test", out=workdir / f"eval_{alias}",
            connectivity=connectivity, tolerance_mm=tolerance,
        )
        cmd_eval_seg(ns)
        seg_reports[variant] = json.loads(
            (workdir / f"eval_{alias}" / "seg_report.json").read_text()
        )
    print("[5/6] both segmenter variants trained and evaluated")

    comparison = {v: r["cohort"] for v, r in seg_reports.items()}
    _write_json(workdir / "comparison.json", comparison)
    table = metrics.render_table(comparison, title="raw vs reconstructed inputs (test split)")
    (workdir / "comparison.txt").write_text(table + "\n")
    write_run_metadata(workdir, "reproduce", doc, train_cfg.seed)
    print("[6/6] comparison table:")
    print(table)
    return 0


# ----------------------------------------------------------------------
# argument parsing and dispatch
# ----------------------------------------------------------------------

def _apply_threads(n):
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass


def build_parser():
    p = argparse.ArgumentParser(prog="vaemmd", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=0, help="cap worker/BLAS thread count")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-phantoms", help="generate a synthetic multi-domain dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-vae", help="train the alignment autoencoder")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("reconstruct", help="write reconstructions and a PSNR/MSE report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])

    s = sub.add_parser("embed", help="2-D projection of latent means")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="pca", choices=["pca", "tsne"])
    s.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval-domain", help="domain classifier probe before/after the VAE")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-log", default=None, help="training log for MMD first/final epoch stats")

    s = sub.add_parser("train-seg", help="train the segmenter on raw or reconstructed inputs")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", required=True)
    s.add_argument("--vae-checkpoint", default=None)
    s.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("eval-seg", help="segmentation metrics per domain and cohort")
    s.add_argument("--seg-checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--vae-checkpoint", default=None)
    s.add_argument("--connectivity", type=int, default=26, choices=[6, 18, 26])
    s.add_argument("--tolerance-mm", type=float, default=1.0)

    s = sub.add_parser("reproduce", help="run the full ladder from one config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="override the config workdir")
    return p


HANDLERS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train-vae": cmd_train_vae,
    "reconstruct": cmd_reconstruct,
    "embed": cmd_embed,
    "eval-domain": cmd_eval_domain,
    "train-seg": cmd_train_seg,
    "eval-seg": cmd_eval_seg,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return HANDLERS[args.cmd](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except _NUMERIC_EXC as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _ARTIFACT_EXC as e:
        print(f"missing or unreadable artifact: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except _CONFIG_EXC as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
