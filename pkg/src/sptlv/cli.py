"""Command-line entry point: ``sptlv <subcommand> [--config FILE] [overrides]``.

Subcommands: gen-data, train, eval, attack, sweep, ablate, report.
Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
Environment: ``PQ_THREADS`` caps BLAS threads, ``PQ_SEED`` overrides the seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, evaluate, phantom
from .evaluate import FAMILIES, INDEX_NAMES, RobustnessReport
from .model import LVNet, build_variant, input_shape_label, output_shape_label
from .objective import CovarianceSet
from .perturb import Kind, PerturbationSpec
from .spt import Variant
from .tensor import NumericError
from .training import TrainConfig, train

logger = logging.getLogger("sptlv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

NOISE_GRID = [{"kind": "GaussianNoise"}, {"kind": "RicianNoise"}]
FULL_GRID = [{"kind": k.value} for k in (Kind.TRANSLATE_H, Kind.TRANSLATE_V, Kind.ROTATE,
                                          Kind.GAUSSIAN, Kind.IMPULSE, Kind.RICIAN, Kind.BLUR, Kind.JPEG)]

DEFAULTS = {
    "variant": "SPT-SC-L",
    "width_multiplier": 0.25,
    "dataset": "phantoms.pqds",
    "phantom": {"subjects": 20, "seed": 7, "size": [80, 80]},
    "training": {"epochs": 30, "lr": 4e-4, "batch": 60, "lam": 1e-3, "seed": 0,
                 "augmentation": False, "use_lstm": True},
    "cv_seed": 0,
    "folds": [0],
    "grid": NOISE_GRID,
    "ablate_variants": [v.value for v in Variant],
    "output_dir": "runs",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config
def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def normalize_config(cfg: dict) -> dict:
    """Validate and canonicalise an experiment config (raises ConfigError)."""
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, cfg)
    try:
        variant = Variant.parse(cfg["variant"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg["variant"] = variant.value
    tr = cfg["training"]
    extra = set(tr) - set(DEFAULTS["training"])
    if extra:
        raise ConfigError(f"unknown training keys: {sorted(extra)}")
    if tr["batch"] % phantom.FRAMES:
        raise ConfigError("training.batch must be a whole number of 20-frame subjects")
    if int(tr["epochs"]) < 0 or float(tr["lr"]) <= 0 or float(tr["lam"]) < 0:
        raise ConfigError("epochs >= 0, lr > 0 and lam >= 0 are required")
    # augmentation is part of the variant definition for the baselines
    if variant is Variant.BASELINE_AUG:
        tr["augmentation"] = True
    elif variant is Variant.BASELINE:
        tr["augmentation"] = False
    if not float(cfg["width_multiplier"]) > 0:
        raise ConfigError("width_multiplier must be positive")
    n = int(cfg["phantom"]["subjects"])
    if n <= 0 or n % 5:
        raise ConfigError("phantom.subjects must be a positive multiple of 5")
    folds = cfg["folds"]
    if folds == "all":
        cfg["folds"] = list(range(5))
    elif not all(isinstance(f, int) and 0 <= f < 5 for f in folds):
        raise ConfigError("folds must be 'all' or a list of integers in 0..4")
    try:
        evaluate.parse_grid(cfg["grid"])
        for v in cfg["ablate_variants"]:
            Variant.parse(v)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid grid/variants: {exc}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "output_dir"}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path: Optional[str], overrides: dict) -> dict:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    raw = _merge(raw, overrides)
    env_seed = os.environ.get("PQ_SEED")
    if env_seed is not None:
        try:
            raw = _merge(raw, {"training": {"seed": int(env_seed)}})
        except ValueError:
            raise ConfigError("PQ_SEED must be an integer") from None
    return normalize_config(raw)


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "variant", None):
        o["variant"] = args.variant
    if getattr(args, "width", None) is not None:
        o["width_multiplier"] = args.width
    if getattr(args, "dataset", None):
        o["dataset"] = args.dataset
    if getattr(args, "out", None):
        o["output_dir"] = args.out
    if getattr(args, "subjects", None) is not None:
        o.setdefault("phantom", {})["subjects"] = args.subjects
    if getattr(args, "data_seed", None) is not None:
        o.setdefault("phantom", {})["seed"] = args.data_seed
    if getattr(args, "epochs", None) is not None:
        o.setdefault("training", {})["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        o.setdefault("training", {})["seed"] = args.seed
    if getattr(args, "folds", None):
        o["folds"] = "all" if args.folds == "all" else [int(f) for f in args.folds.split(",")]
    return o


def artifact_meta(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "version": __version__}


# ------------------------------------------------------------------ helpers
def _run_dir(cfg: dict, variant: Optional[str] = None) -> Path:
    return Path(cfg["output_dir"]) / (variant or cfg["variant"])


def _checkpoint_path(cfg: dict, fold: int, variant: Optional[str] = None) -> Path:
    return _run_dir(cfg, variant) / f"fold{fold}.pqck"


def _load_data(cfg: dict) -> list:
    path = Path(cfg["dataset"])
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist; run gen-data first")
    try:
        return phantom.load_dataset(path)
    except phantom.DatasetError as exc:
        raise ConfigError(str(exc)) from None


def _splits(cfg: dict, data: list):
    by_id = {s.subject_id: s for s in data}
    folds = evaluate.crossval_split(sorted(by_id), seed=cfg["cv_seed"])
    for k in cfg["folds"]:
        f = folds[k]
        yield k, [by_id[i] for i in f.train], [by_id[i] for i in f.val], [by_id[i] for i in f.test]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_model(cfg: dict, fold: int, variant: Optional[str] = None) -> tuple[LVNet, CovarianceSet]:
    path = _checkpoint_path(cfg, fold, variant)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found; run train first")
    model, header, extra = LVNet.load(path)
    want = variant or cfg["variant"]
    if model.variant.value != want:
        raise ConfigError(f"checkpoint variant {model.variant.value} does not match config variant {want}")
    cov = CovarianceSet.from_arrays(extra, lam=header.get("lam", 1e-3)) if extra else None
    return model, cov


# ----------------------------------------------------------------- commands
def cmd_gen_data(cfg: dict, force: bool = False) -> list:
    path = Path(cfg["dataset"])
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    p = cfg["phantom"]
    data = phantom.generate_dataset(int(p["subjects"]), int(p["seed"]), tuple(p["size"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    phantom.save_dataset(data, path, meta={"phantom": p, **artifact_meta(cfg)})
    truth = np.concatenate([s.truth for s in data])
    print(f"subjects: {len(data)}  frames: {sum(len(s.frames) for s in data)}  -> {path}")
    for i, name in enumerate(INDEX_NAMES):
        print(f"  {name}: {truth[:, i].min():9.2f} .. {truth[:, i].max():9.2f}")
    return data


def _train_config(cfg: dict) -> TrainConfig:
    tr = cfg["training"]
    return TrainConfig(epochs=int(tr["epochs"]), lr=float(tr["lr"]),
                       batch_subjects=int(tr["batch"]) // phantom.FRAMES, lam=float(tr["lam"]),
                       seed=int(tr["seed"]), augment=bool(tr["augmentation"]))


def _save(model: LVNet, cov: CovarianceSet, path: Path, cfg: dict, fold: int, epoch: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path, extra=cov.arrays(),
               header={"fold": fold, "epoch": epoch, "lam": cov.lam, **artifact_meta(cfg)})


def cmd_train(cfg: dict) -> dict:
    data = _load_data(cfg)
    tcfg = _train_config(cfg)
    run = _run_dir(cfg)
    _write_json(run / "config.effective.json", cfg)
    results = {}
    for fold, tr_set, va_set, _ in _splits(cfg, data):
        model = build_variant(cfg["variant"], cfg["width_multiplier"], seed=tcfg.seed,
                              use_lstm=cfg["training"]["use_lstm"])
        ckpt = _checkpoint_path(cfg, fold)
        cov0 = CovarianceSet.identity(model.head_shape, lam=tcfg.lam)
        _save(model, cov0, ckpt, cfg, fold, 0)
        log_path = run / f"train_log_fold{fold}.csv"
        rows: list = []
        try:
            res = train(model, tr_set, va_set, tcfg, on_epoch=rows.append,
                        on_checkpoint=lambda m, c, e: _save(m, c, ckpt, cfg, fold, e))
        except NumericError:
            _write_log(log_path, rows, cfg)
            logger.error("numeric failure in fold %d; last good checkpoint kept at %s", fold, ckpt)
            raise
        _save(res.model, res.cov, ckpt, cfg, fold, res.best_epoch)
        _write_log(log_path, res.history, cfg)
        results[fold] = res
        print(f"fold {fold}: best epoch {res.best_epoch} -> {ckpt}")
    return results


def _write_log(path: Path, rows: list, cfg: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["epoch", "train_loss", "val_areas", "val_dimensions", "val_thicknesses", "val_loss", "lr"]
    with path.open("w", newline="") as fh:
        fh.write(f"# lambda={cfg['training']['lam']} " +
                 " ".join(f"{k}={v}" for k, v in sorted(artifact_meta(cfg).items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([r.get(k, "") if isinstance(r.get(k, ""), (int, str)) else f"{r[k]:.8g}" for k in keys])


def cmd_eval(cfg: dict) -> dict:
    data = _load_data(cfg)
    out = {}
    for fold, _, _, test in _splits(cfg, data):
        model, _ = _load_model(cfg, fold)
        preds = model.predict(np.stack([s.frames for s in test]))
        phys = np.stack([phantom.denormalize(p, s.spacing, s.shape) for p, s in zip(preds, test)])
        truth = np.stack([s.truth for s in test])
        mean, std = evaluate.mae_metric(phys, truth)
        rows = {}
        for i, name in enumerate(INDEX_NAMES):
            try:
                rho = evaluate.pearson_global(phys, truth, i)
            except evaluate.UndefinedMetricError:
                rho = float("nan")
            rows[name] = {"mae_mean": float(mean[i]), "mae_std": float(std[i]), "pearson": rho}
            print(f"fold {fold} {name}: MAE {mean[i]:8.3f} ± {std[i]:7.3f}  rho {rho:.3f}")
        out[fold] = rows
    _write_json(_run_dir(cfg) / "eval.json", {"meta": artifact_meta(cfg), "folds": out})
    return out


def cmd_attack(cfg: dict, alpha: float, iters: int) -> dict:
    data = _load_data(cfg)
    spec = PerturbationSpec.pgd(alpha / 255 if alpha >= 1 else alpha, iters)
    out = {}
    for fold, _, _, test in _splits(cfg, data):
        model, _ = _load_model(cfg, fold)
        rep = evaluate.sweep(model, test, [spec], seed=cfg["training"]["seed"], fold=fold,
                             meta=artifact_meta(cfg))
        clean, attacked = rep.clean, rep.cells[(spec.kind.value, spec.level)][0]
        out[fold] = {"clean": clean.tolist(), "attacked": attacked.tolist()}
        print(f"fold {fold}: mean MAE clean {clean.mean():.3f} -> attacked {attacked.mean():.3f}")
    _write_json(_run_dir(cfg) / f"attack_a{spec.pgd_params[0] * 255:.0f}_i{iters}.json",
                {"meta": artifact_meta(cfg), "folds": out})
    return out


def cmd_sweep(cfg: dict, variant: Optional[str] = None) -> RobustnessReport:
    data = _load_data(cfg)
    grid = evaluate.parse_grid(cfg["grid"])
    run = _run_dir(cfg, variant)
    reports = []
    for fold, _, _, test in _splits(cfg, data):
        model, _ = _load_model(cfg, fold, variant)
        rep = evaluate.sweep(model, test, grid, seed=cfg["training"]["seed"], fold=fold,
                             meta=artifact_meta(cfg))
        rep.write(run, f"report_fold{fold}")
        reports.append(rep)
    mean = evaluate.average_reports(reports)
    paths = mean.write(run, "report_mean")
    print(f"report -> {paths['csv']}")
    for kind in mean.kinds():
        fam = {f: np.mean([mean.family_ratio(kind, lv)[f] for lv in mean.levels(kind)]) for f in FAMILIES}
        print(f"  {kind:14s} " + "  ".join(f"{f} R={v:.3f}" for f, v in fam.items()))
    return mean


def cmd_ablate(cfg: dict) -> list:
    rows = []
    run = Path(cfg["output_dir"])
    for v in cfg["ablate_variants"]:
        sub = normalize_config({**{k: cfg[k] for k in cfg if k != "ablate_variants"}, "variant": v})
        _write_json(_run_dir(sub) / "config.echo.json", sub)
        cmd_train(sub)
        rep = cmd_sweep(sub)
        row = {"variant": sub["variant"], "input_shape": input_shape_label(v),
               "output_shape": output_shape_label(v), "augmentation": sub["training"]["augmentation"]}
        for f, idx in FAMILIES.items():
            row[f"clean_mae_{f}"] = float(np.mean(rep.clean[list(idx)]))
        for kind in rep.kinds():
            row[f"R_{kind}"] = rep.mean_ratio([kind])
        rows.append(row)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    path = run / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(" ".join(f"# {k}={v}" for k, v in sorted(artifact_meta(cfg).items())) + "\n")
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    print(f"ablation table -> {path}")
    return rows


def cmd_report(cfg: dict, paths: list) -> RobustnessReport:
    if not paths:
        run = _run_dir(cfg)
        paths = sorted(str(p) for p in run.glob("report_fold*.csv"))
    if not paths:
        raise ConfigError("no report CSVs found")
    reports = [RobustnessReport.from_csv(Path(p).read_text()) for p in paths]
    mean = evaluate.average_reports(reports)
    mean.meta = artifact_meta(cfg)
    out = mean.write(_run_dir(cfg, reports[0].variant), "report_combined")
    print(f"{len(reports)} reports averaged -> {out['csv']}")
    return mean


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sptlv", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON config")
        p.add_argument("--variant")
        p.add_argument("--width", type=float)
        p.add_argument("--dataset")
        p.add_argument("--out", help="output directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", help="'all' or comma-separated fold ids")
        return p

    g = common(sub.add_parser("gen-data", help="write a phantom dataset"))
    g.add_argument("--subjects", type=int)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--force", action="store_true")
    common(sub.add_parser("train", help="fold-wise training"))
    common(sub.add_parser("eval", help="clean MAE and correlation on test folds"))
    a = common(sub.add_parser("attack", help="PGD attack on test folds"))
    a.add_argument("--alpha", type=float, default=8, help="step size in 1/255 units")
    a.add_argument("--iters", type=int, default=50)
    common(sub.add_parser("sweep", help="robustness sweep over the perturbation grid"))
    common(sub.add_parser("ablate", help="train and sweep every listed variant"))
    r = common(sub.add_parser("report", help="average per-fold report CSVs"))
    r.add_argument("reports", nargs="*")
    return ap


def _dispatch(args) -> None:
    cfg = load_config(args.config, _overrides(args))
    c = args.command
    if c == "gen-data":
        cmd_gen_data(cfg, args.force)
    elif c == "train":
        cmd_train(cfg)
    elif c == "eval":
        cmd_eval(cfg)
    elif c == "attack":
        cmd_attack(cfg, args.alpha, args.iters)
    elif c == "sweep":
        cmd_sweep(cfg)
    elif c == "ablate":
        cmd_ablate(cfg)
    elif c == "report":
        cmd_report(cfg, args.reports)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("PQ_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                _dispatch(args)
        else:
            _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
