"""Batch operator surface: synth / train / eval / gradcheck / report.

Outputs land under --out only.  Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck, harness, metrics, networks, synthdata
from .harness import PAPER_LAMBDAS, TrainConfig

VARIANT_ORDER = ("PC", "RAND", "DU", "BM", "BDM")

DEFAULTS = {
    "n_sites": 20,
    "subjects_per_site": 1,
    "vol_extent": 64,
    "master_seed": 0,
    "seed": 0,
    "variant": "BM",
    "lambda": -1.0,  # -1 -> per-variant paper value
    "lr": 0.0001,
    "batch_size": 4,
    "epochs": 5,
    "steps_per_epoch": 20,
    "patch_extent": 32,
    "base_channels": 4,
    "stages": 4,
    "dropout_rate": 0.5,
    "folds": 5,
    "fold": 0,
    "connectivity": 26,
    "threshold": 0.5,
    "probe_crop": 16,
    "init_sigma": 0.05,
}


def _load_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(harness.parse_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        for cast in (int, float):
            try:
                settings[key] = cast(value.strip())
                break
            except ValueError:
                continue
        else:
            settings[key] = value.strip()
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if getattr(args, "variant", None):
        settings["variant"] = args.variant
    for key in ("n_sites", "subjects_per_site", "epochs"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    unknown = set(settings) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return settings


def _train_config(settings: dict, variant: str) -> TrainConfig:
    lam = float(settings["lambda"])
    if lam < 0:
        lam = PAPER_LAMBDAS.get(variant, 0.0)
    return TrainConfig(
        variant=variant, lam=lam, lr=float(settings["lr"]),
        batch_size=int(settings["batch_size"]), epochs=int(settings["epochs"]),
        steps_per_epoch=int(settings["steps_per_epoch"]),
        patch_extent=int(settings["patch_extent"]), seed=int(settings["seed"]),
        base_channels=int(settings["base_channels"]),
        stages=int(settings["stages"]),
        dropout_rate=float(settings["dropout_rate"]),
        init_sigma=float(settings["init_sigma"]),
        connectivity=int(settings["connectivity"]),
        threshold=float(settings["threshold"]))


def _cohort_base(out: Path) -> Path:
    return out / "cohort"


def cmd_synth(args) -> int:
    settings = _load_settings(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = (int(settings["vol_extent"]),) * 3
    master = int(settings["master_seed"])
    n_sites = int(settings["n_sites"])
    sps = int(settings["subjects_per_site"])
    samples = synthdata.gen_cohort(n_sites, sps, master, shape)
    seeds = [synthdata.subject_seed(master, s.site_id, i % sps)
             for i, s in enumerate(samples)]
    synthdata.write_manifest(samples, _cohort_base(out), seeds=seeds)
    print(f"wrote {len(samples)} subjects ({n_sites} sites) to {out}")
    return 0


def _model_path(out: Path, variant: str, fold: int) -> Path:
    return out / f"model_{variant}_fold{fold}.params"


def cmd_train(args) -> int:
    settings = _load_settings(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = synthdata.read_manifest(_cohort_base(out))
    variant = str(settings["variant"])
    cfg = _train_config(settings, variant)
    plans = harness.make_folds(dataset.subject_ids, k=int(settings["folds"]),
                               seed=int(settings["master_seed"]))
    fold = plans[int(settings["fold"])]
    model, history = harness.train_model(cfg, fold, dataset)
    networks.save_params(model, _model_path(out, variant, fold.fold_id))
    harness.write_history_csv(
        history,
        out / f"history_{variant}_fold{fold.fold_id}_steps.csv",
        out / f"history_{variant}_fold{fold.fold_id}_epochs.csv")
    print(f"trained {variant} fold {fold.fold_id}: "
          f"final loss {history.step_total[-1]:.4f}, "
          f"best val DSC {max(history.val_dsc):.4f}")
    return 0


def _trained_variants(out: Path, fold: int):
    return [v for v in VARIANT_ORDER if _model_path(out, v, fold).exists()]


def _eval_variant(out: Path, settings: dict, dataset, fold, variant: str):
    cfg = _train_config(settings, variant)
    model = harness.build_from_config(
        cfg, n_domains=len(set(dataset.site_ids)))
    networks.load_params(model, _model_path(out, variant, fold.fold_id))
    test_subjects = [dataset.load(i) for i in fold.test_ids]
    train_sites = {dataset.load(i).site_id for i in fold.train_ids}
    workers = max(1, int(os.environ.get("DSSEG_THREADS", "1")))
    if workers > 1:
        report = metrics.MetricsReport()
        with ThreadPoolExecutor(max_workers=workers) as ex:
            preds = list(ex.map(
                lambda s: harness.predict_volume(model, s, cfg), test_subjects))
        for s, probs in zip(test_subjects, preds):
            pred = metrics.binarize(probs, cfg.threshold)
            report.add(s.subject_id, s.site_id, s.site_id in train_sites,
                       metrics.evaluate_masks(pred, s.mask, cfg.connectivity))
    else:
        report = harness.evaluate(model, test_subjects, cfg, train_sites)
    return model, cfg, report


def cmd_eval(args) -> int:
    settings = _load_settings(args)
    out = Path(args.out)
    dataset = synthdata.read_manifest(_cohort_base(out))
    plans = harness.make_folds(dataset.subject_ids, k=int(settings["folds"]),
                               seed=int(settings["master_seed"]))
    fold = plans[int(settings["fold"])]
    nan_row = {m: math.nan for m in metrics.METRIC_NAMES}
    summary = {}
    for variant in VARIANT_ORDER:
        if variant not in _trained_variants(out, fold.fold_id):
            summary[variant] = nan_row
            continue
        _, _, report = _eval_variant(out, settings, dataset, fold, variant)
        report.write_csv(out / f"report_{variant}_fold{fold.fold_id}.csv")
        summary[variant] = report.aggregates()
        su = report.seen_unseen()
        with open(out / f"seen_unseen_{variant}_fold{fold.fold_id}.csv", "w") as f:
            f.write("split," + ",".join(metrics.METRIC_NAMES) + "\n")
            for split in ("seen", "unseen"):
                f.write(split + "," + ",".join(
                    f"{su[split][m]:.6f}" for m in metrics.METRIC_NAMES) + "\n")
    metrics.write_summary_csv(out / f"summary_fold{fold.fold_id}.csv", summary)
    print(f"wrote summary_fold{fold.fold_id}.csv "
          f"({len(VARIANT_ORDER)} method rows)")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_all(seed=args.seed or 0)
    ok = True
    for r in reports:
        print(r)
        ok = ok and r.passed
    return 0 if ok else 2


def cmd_report(args) -> int:
    settings = _load_settings(args)
    out = Path(args.out)
    dataset = synthdata.read_manifest(_cohort_base(out))
    plans = harness.make_folds(dataset.subject_ids, k=int(settings["folds"]),
                               seed=int(settings["master_seed"]))
    fold = plans[int(settings["fold"])]
    subjects = dataset.load_all()
    rows = []
    for variant in _trained_variants(out, fold.fold_id):
        cfg = _train_config(settings, variant)
        model = harness.build_from_config(
            cfg, n_domains=len(set(dataset.site_ids)))
        networks.load_params(model, _model_path(out, variant, fold.fold_id))
        acc = harness.probe_domain_accuracy(
            model, subjects, probe_seed=int(settings["seed"]),
            crop_extent=int(settings["probe_crop"]))
        rows.append((variant, acc))
    with open(out / f"probe_fold{fold.fold_id}.csv", "w") as f:
        f.write("method,probe_accuracy\n")
        for variant, acc in rows:
            f.write(f"{variant},{acc:.6f}\n")
    for variant, acc in rows:
        print(f"{variant}: probe accuracy {acc:.4f} "
              f"(chance {1.0 / len(set(dataset.site_ids)):.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsseg",
        description="Multi-site lesion segmentation experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, variant=False):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        if variant:
            p.add_argument("--variant", choices=networks.VARIANTS)

    p = sub.add_parser("synth", help="generate the synthetic cohort")
    common(p)
    p.add_argument("--n_sites", type=int)
    p.add_argument("--subjects_per_site", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant on one fold")
    common(p, variant=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained models on the test split")
    common(p, variant=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check all primitives")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="probe accuracies and merged comparison")
    common(p, variant=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
