"""Metrics, cross-validation folds and robustness sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import perturb
from .perturb import Kind, PerturbationSpec
from .phantom import CineSequence, denormalize, normalize

logger = logging.getLogger(__name__)

INDEX_NAMES = ("A1", "A2", "D1", "D2", "D3", "T1", "T2", "T3", "T4", "T5", "T6")
FAMILIES = {"areas": (0, 1), "dimensions": (2, 3, 4), "thicknesses": (5, 6, 7, 8, 9, 10)}
CSV_COLUMNS = ("variant", "fold", "kind", "level", "index", "mae_mean", "mae_std", "R")
CLEAN = (Kind.NONE.value, 0)


class UndefinedMetricError(ArithmeticError):
    """A ratio or correlation is undefined for the given data."""


def _flat(a, i: Optional[int]) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a = a.reshape(-1, a.shape[-1])
    return a if i is None else a[:, i]


def mae_metric(preds, truth, index: Optional[int] = None) -> tuple:
    """Mean and (population) std of the absolute error over all subject-frame pairs.

    With ``index=None`` both are arrays over the 11 indices.
    """
    p, t = _flat(preds, index), _flat(truth, index)
    if p.shape != t.shape:
        raise ValueError("prediction and truth shapes differ")
    if p.shape[0] == 0:
        raise ValueError("empty input")
    err = np.abs(p - t)
    return err.mean(axis=0), err.std(axis=0)


def pearson_global(preds, truth, index: int) -> float:
    """Pearson correlation pooled over all subjects and frames."""
    p, t = _flat(preds, index), _flat(truth, index)
    if p.size < 2:
        raise ValueError("need at least two samples")
    p = p - p.mean()
    t = t - t.mean()
    den = math.sqrt(float((p * p).sum()) * float((t * t).sum()))
    if den == 0:
        raise UndefinedMetricError(f"zero variance for index {INDEX_NAMES[index]}")
    return float((p * t).sum() / den)


def robustness_ratio(mae_p, mae_0):
    """Elementwise MAE ratio against the unperturbed reference."""
    mae_p = np.asarray(mae_p, dtype=np.float64)
    mae_0 = np.asarray(mae_0, dtype=np.float64)
    if np.any(mae_0 == 0):
        raise UndefinedMetricError("reference MAE is zero; robustness ratio undefined")
    return mae_p / mae_0


# ---------------------------------------------------------------- cross-val
@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: tuple
    val: tuple
    test: tuple


def crossval_split(ids: Sequence[int], seed: int = 0, n_folds: int = 5) -> list[FoldSplit]:
    """Seeded partition into ``n_folds`` equal test groups.

    The non-test subjects of each fold are split into train/val with the
    101:15 ratio, flooring the validation count.
    """
    ids = list(ids)
    n = len(ids)
    if n == 0 or n % n_folds:
        raise ValueError(f"{n} subjects cannot be split into {n_folds} equal groups")
    order = np.random.default_rng(seed).permutation(n)
    groups = [tuple(ids[j] for j in order[k::n_folds]) for k in range(n_folds)]
    groups = [tuple(sorted(g)) for g in groups]
    rest = n - n // n_folds
    n_val = (rest * 15) // 116
    folds = []
    for k in range(n_folds):
        others = [i for j, g in enumerate(groups) if j != k for i in g]
        perm = np.random.default_rng([seed, k]).permutation(len(others))
        val = tuple(sorted(others[j] for j in perm[:n_val]))
        train = tuple(sorted(others[j] for j in perm[n_val:]))
        folds.append(FoldSplit(k, train, val, groups[k]))
    return folds


# ------------------------------------------------------------------ report
@dataclass
class RobustnessReport:
    """Per-perturbation MAE (physical units) and robustness ratios."""

    variant: str
    fold: str | int = 0
    seed: int = 0
    cells: dict = field(default_factory=dict)      # (kind, level) -> (mean[11], std[11])
    meta: dict = field(default_factory=dict)

    def add(self, spec: PerturbationSpec, mean, std) -> None:
        self.cells[(spec.kind.value, spec.level)] = (np.asarray(mean, float), np.asarray(std, float))

    @property
    def clean(self) -> np.ndarray:
        return self.cells[CLEAN][0]

    def ratio(self, kind, level: int) -> np.ndarray:
        key = (Kind.parse(kind).value, level)
        return robustness_ratio(self.cells[key][0], self.clean)

    def family_ratio(self, kind, level: int) -> dict:
        r = self.ratio(kind, level)
        return {f: float(np.mean(r[list(idx)])) for f, idx in FAMILIES.items()}

    def kinds(self) -> list[str]:
        seen = []
        for k, _ in self.cells:
            if k != Kind.NONE.value and k not in seen:
                seen.append(k)
        return seen

    def levels(self, kind) -> list[int]:
        kind = Kind.parse(kind).value
        return sorted(lv for k, lv in self.cells if k == kind)

    def mean_ratio(self, kinds: Optional[Iterable] = None) -> float:
        """Mean R over every index and level of the given kinds."""
        kinds = [Kind.parse(k).value for k in (kinds or self.kinds())]
        vals = [self.ratio(k, lv) for k in kinds for lv in self.levels(k)]
        if not vals:
            raise ValueError("report has no cells for the requested kinds")
        return float(np.mean(vals))

    # -- serialisation ---------------------------------------------------
    def rows(self) -> list[tuple]:
        out = []
        clean = self.clean
        for (kind, level), (mean, std) in self.cells.items():
            r = robustness_ratio(mean, clean)
            for i, name in enumerate(INDEX_NAMES):
                out.append((self.variant, self.fold, kind, level, name, mean[i], std[i], r[i]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.meta:
            buf.write("# " + " ".join(f"{k}={self.meta[k]}" for k in sorted(self.meta)) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows():
            w.writerow([*row[:5], *(f"{v:.10g}" for v in row[5:])])
        return buf.getvalue()

    def to_json(self) -> str:
        cells = []
        for (kind, level), (mean, std) in self.cells.items():
            cells.append({"kind": kind, "level": level, "mae_mean": [round(float(v), 10) for v in mean],
                          "mae_std": [round(float(v), 10) for v in std],
                          "R": [round(float(v), 10) for v in robustness_ratio(mean, self.clean)]})
        fam = {k: {str(lv): self.family_ratio(k, lv) for lv in self.levels(k)} for k in self.kinds()}
        return json.dumps({"variant": self.variant, "fold": self.fold, "seed": self.seed,
                           "meta": self.meta, "indices": list(INDEX_NAMES), "cells": cells,
                           "family_R": fam}, indent=1, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "RobustnessReport":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        if not rows:
            raise ValueError("empty report")
        rep = cls(rows[0]["variant"], rows[0]["fold"])
        acc: dict = {}
        for r in rows:
            key = (r["kind"], int(r["level"]))
            m, s = acc.setdefault(key, (np.zeros(11), np.zeros(11)))
            i = INDEX_NAMES.index(r["index"])
            m[i], s[i] = float(r["mae_mean"]), float(r["mae_std"])
        rep.cells = acc
        return rep

    def write(self, out_dir, stem: Optional[str] = None) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"report_{self.variant}_fold{self.fold}"
        paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(self.to_json())
        for fam in FAMILIES:
            p = out_dir / f"{stem}_{fam}.svg"
            p.write_text(svg_chart(self, fam))
            paths[f"svg_{fam}"] = p
        return paths


def average_reports(reports: Sequence[RobustnessReport], fold_label: str = "mean") -> RobustnessReport:
    """Unweighted average of per-fold MAE cells (R is recomputed from the averages)."""
    if not reports:
        raise ValueError("no reports to average")
    keys = list(reports[0].cells)
    out = RobustnessReport(reports[0].variant, fold_label, reports[0].seed, meta=dict(reports[0].meta))
    for key in keys:
        means = np.mean([r.cells[key][0] for r in reports], axis=0)
        stds = np.mean([r.cells[key][1] for r in reports], axis=0)
        out.cells[key] = (means, stds)
    return out


# --------------------------------------------------------------------- SVG
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f", "#bcbd22")


def svg_chart(report: RobustnessReport, family: str, width: int = 480, height: int = 320) -> str:
    """Mean R of one index family against level; dot radius grows with level."""
    kinds = report.kinds()
    series = {k: [(lv, report.family_ratio(k, lv)[family]) for lv in report.levels(k)] for k in kinds}
    pts = [v for s in series.values() for _, v in s] or [1.0]
    y_lo, y_hi = min(0.9, min(pts)), max(1.1, max(pts)) * 1.05
    x_hi = max([lv for s in series.values() for lv, _ in s] or [1])
    left, right, top, bottom = 50, 110, 20, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(lv):
        return left + pw * (lv / x_hi if x_hi else 0)

    def sy(v):
        return top + ph * (1 - (v - y_lo) / (y_hi - y_lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="14">{report.variant} {family}: mean R by level</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{sy(1.0):.1f}" x2="{left + pw}" y2="{sy(1.0):.1f}" '
             f'stroke="#999" stroke-dasharray="4 3"/>',
             f'<text x="{left - 8}" y="{sy(1.0) + 4:.1f}" text-anchor="end">1</text>',
             f'<text x="{left - 8}" y="{sy(y_hi) + 10:.1f}" text-anchor="end">{y_hi:.2f}</text>',
             f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">level</text>']
    for j, (kind, pts_k) in enumerate(series.items()):
        color = _PALETTE[j % len(_PALETTE)]
        if len(pts_k) > 1:
            path = " ".join(f"{sx(lv):.1f},{sy(v):.1f}" for lv, v in pts_k)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}"/>')
        for lv, v in pts_k:
            r = 2 + 4 * lv / x_hi
            parts.append(f'<circle cx="{sx(lv):.1f}" cy="{sy(v):.1f}" r="{r:.1f}" fill="{color}"/>')
        parts.append(f'<text x="{left + pw + 8}" y="{top + 14 * (j + 1)}" fill="{color}">{kind}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -------------------------------------------------------------------- sweep
def _stack(subjects: Sequence[CineSequence]):
    frames = np.stack([s.frames for s in subjects])
    truth = np.stack([s.truth for s in subjects]).astype(np.float64)
    targets = np.stack([normalize(s.truth, s.spacing, s.shape) for s in subjects])
    return frames, truth, targets


def _denorm(preds: np.ndarray, subjects: Sequence[CineSequence]) -> np.ndarray:
    return np.stack([denormalize(p, s.spacing, s.shape) for p, s in zip(preds, subjects)])


def perturbation_rng(seed: int, subject_id: int, spec: PerturbationSpec) -> np.random.Generator:
    kind_code = list(Kind).index(spec.kind)
    return np.random.default_rng([seed, subject_id, kind_code, spec.level])


def perturb_subjects(subjects: Sequence[CineSequence], spec: PerturbationSpec, seed: int) -> np.ndarray:
    """Apply a non-adversarial spec to every subject; returns (S, T, M, N)."""
    return np.stack([perturb.apply(s.frames, spec, perturbation_rng(seed, s.subject_id, spec))
                     for s in subjects]).astype(np.float32)


def evaluate_predictions(preds_norm: np.ndarray, subjects: Sequence[CineSequence]) -> tuple:
    _, truth, _ = _stack(subjects)
    return mae_metric(_denorm(preds_norm, subjects), truth)


def sweep(model, subjects: Sequence[CineSequence], grid: Sequence[PerturbationSpec], seed: int = 0,
          fold: int | str = 0, variant: Optional[str] = None, meta: Optional[dict] = None,
          batch_subjects: int = 4) -> RobustnessReport:
    """Clean MAE once, then MAE under every spec of ``grid``.

    PGD specs sharing a step size reuse one trajectory: the shorter attack is
    a snapshot of the longer one.
    """
    variant = variant or model.variant.value
    rep = RobustnessReport(variant, fold, seed, meta=dict(meta or {}))
    frames, truth, targets = _stack(subjects)

    def score(x):
        preds = model.predict(x, batch_subjects)
        return mae_metric(_denorm(preds, subjects), truth)

    rep.add(PerturbationSpec(), *score(frames))
    pgd = {}
    for spec in grid:
        if spec.kind is Kind.NONE:
            continue
        if spec.kind is Kind.PGD:
            alpha, iters = spec.pgd_params
            pgd.setdefault(alpha, set()).add(iters)
            continue
        rep.add(spec, *score(perturb_subjects(subjects, spec, seed)))
        logger.debug("sweep %s done", spec.label())
    for alpha in sorted(pgd):
        iters = sorted(pgd[alpha])
        _, snaps = pgd_attack_snapshots(model, frames, targets, alpha, iters)
        for it in iters:
            rep.add(PerturbationSpec.pgd(alpha, it), *score(snaps[it]))
    # keep cell order canonical regardless of grid order
    order = {spec: k for k, spec in enumerate(_canonical(grid))}
    rep.cells = dict(sorted(rep.cells.items(), key=lambda kv: order.get(kv[0], -1)))
    return rep


def pgd_attack_snapshots(model, frames, targets, alpha: float, iters: Sequence[int]):
    return perturb.pgd_attack(model, frames, targets, alpha, max(iters), snapshots=tuple(iters))


def _canonical(grid: Sequence[PerturbationSpec]) -> list:
    keys = [CLEAN]
    for s in grid:
        key = (s.kind.value, s.level)
        if key not in keys:
            keys.append(key)
    return keys


def parse_grid(entries: Sequence[dict]) -> list[PerturbationSpec]:
    """Grid entries ``{"kind": ..., "levels": [...]}``; PGD entries may give
    ``alphas`` (in 1/255 units or fractions) and ``iters`` instead of levels."""
    out: list[PerturbationSpec] = []
    for e in entries:
        kind = Kind.parse(e["kind"])
        if kind is Kind.PGD and ("alphas" in e or "iters" in e):
            for it in e.get("iters", perturb.PGD_ITERS):
                for a in e.get("alphas", [a * 255 for a in perturb.PGD_ALPHAS]):
                    out.append(PerturbationSpec.pgd(a / 255 if a >= 1 else a, int(it)))
            continue
        levels = e.get("levels")
        if levels is None:
            out.extend(perturb.ladder(kind))
        else:
            out.extend(PerturbationSpec(kind, int(lv)) for lv in levels)
    return out
