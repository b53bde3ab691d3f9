"""Evaluation metrics and report emission.

Per-case Chamfer-l1, F1 at a distance threshold, and fidelity error, computed
coronary-only by default; aggregation to mean with population standard
deviation; severity sweeps over fixed fracture ratios; CSV, JSON and SVG
outputs with byte-stable formatting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import CORONARY, PointCloud, nearest_indices
from .synth import FractureSpec, simulate_fracture

METRIC_KEYS = ("cd_l1", "f1", "fidelity")


@dataclass(frozen=True)
class EvalConfig:
    tau: float = 0.01
    coronary_only: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    def to_dict(self):
        return {"tau": self.tau, "coronary_only": self.coronary_only}


@dataclass(frozen=True)
class CaseMetrics:
    """One evaluated case; distances are in 1e-3 reporting units, f1 in %."""

    case_id: str
    cd_l1: float
    f1: float
    fidelity: float
    severity: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 100.0:
            raise ConfigError(f"f1 out of [0, 100]: {self.f1}")
        if self.cd_l1 < 0 or self.fidelity < 0:
            raise ConfigError("distances must be nonnegative")


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    mean: dict
    std: dict
    config: dict


def _nn_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, d = nearest_indices(a, b)
    return d


def chamfer_l1_value(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-number Chamfer-l1 (the loss module holds the differentiable one)."""
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("chamfer requires non-empty clouds")
    return 0.5 * (float(_nn_dists(a, b).mean()) + float(_nn_dists(b, a).mean()))


def fidelity_value(inp: np.ndarray, out: np.ndarray) -> float:
    if len(inp) == 0 or len(out) == 0:
        raise ConfigError("fidelity requires non-empty clouds")
    return float(_nn_dists(inp, out).mean())


def f1_score(pred: PointCloud, gt: PointCloud, tau: float) -> float:
    """200 P R / (P + R) in percent; P and R count tau-neighborhood hits."""
    if len(pred) == 0 or len(gt) == 0:
        raise ConfigError("f1_score requires non-empty clouds")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    precision = float(np.mean(_nn_dists(pred.points, gt.points) <= tau))
    recall = float(np.mean(_nn_dists(gt.points, pred.points) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def _coronary_subset(cloud: PointCloud, what: str) -> PointCloud:
    if cloud.labels is None:
        raise ConfigError(f"{what} cloud lacks labels, required for coronary-only evaluation")
    sub = cloud.with_label(CORONARY)
    if len(sub) == 0:
        raise DataError(f"{what} cloud has an empty coronary subset")
    return sub


def evaluate_case(pred: PointCloud, gt: PointCloud,
                  cfg: EvalConfig = EvalConfig(),
                  input_cloud: PointCloud | None = None,
                  case_id: str = "", severity: float | None = None) -> CaseMetrics:
    """Metrics for one case, in reporting units.

    Fidelity measures how well the observed points survive: it runs from the
    fractured input to the prediction when an input cloud is supplied, and
    from the ground truth otherwise.
    """
    if cfg.coronary_only:
        pred_m = _coronary_subset(pred, "prediction")
        gt_m = _coronary_subset(gt, "ground truth")
        src = input_cloud if input_cloud is not None else gt
        src_m = _coronary_subset(src, "fidelity source")
    else:
        pred_m, gt_m = pred, gt
        src_m = input_cloud if input_cloud is not None else gt
    cd = chamfer_l1_value(pred_m.points, gt_m.points)
    f1 = f1_score(pred_m, gt_m, cfg.tau)
    fe = fidelity_value(src_m.points, pred_m.points)
    return CaseMetrics(case_id=case_id, cd_l1=cd * 1e3, f1=f1,
                       fidelity=fe * 1e3, severity=severity)


def aggregate(rows, config: dict | None = None) -> EvalReport:
    """Mean and population std of every metric over the given rows."""
    rows = tuple(rows)
    if not rows:
        raise ConfigError("aggregate requires at least one row")
    mean, std = {}, {}
    for key in METRIC_KEYS:
        values = np.array([getattr(r, key) for r in rows], dtype=np.float64)
        mean[key] = float(values.mean())
        std[key] = float(values.std())  # population std
    return EvalReport(rows=rows, mean=mean, std=std, config=dict(config or {}))


def severity_sweep(complete_fn, gts, ratios, spec_template: FractureSpec,
                   seed: int, cfg: EvalConfig = EvalConfig()):
    """Evaluate a completion function at fixed fracture ratios.

    For each ratio, every ground truth is refractured at exactly that ratio
    (min = max), completed by `complete_fn(input cloud) -> cloud`, and
    evaluated against its ground truth with the fractured input as the
    fidelity source.  Returns a list of (ratio, EvalReport) in input order.
    """
    reports = []
    for ri, ratio in enumerate(ratios):
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"sweep ratio must lie in (0, 1), got {ratio}")
        spec = FractureSpec(
            min_ratio=ratio, max_ratio=ratio,
            min_break=spec_template.min_break, max_break=spec_template.max_break,
            seed=spec_template.seed, retry_limit=spec_template.retry_limit,
        )
        rows = []
        for pi, gt in enumerate(gts):
            rng = np.random.default_rng([seed, ri, pi])
            fractured, actual_ratio, _breaks = simulate_fracture(gt, spec, rng)
            pred = complete_fn(fractured)
            rows.append(evaluate_case(
                pred, gt, cfg, input_cloud=fractured,
                case_id=f"r{ratio:g}/p{pi}", severity=ratio,
            ))
        reports.append((ratio, aggregate(rows, cfg.to_dict())))
    return reports


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("case_id", "cd_l1_e3", "f1_pct", "fidelity_e3", "severity")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([
                r.case_id, _fmt(r.cd_l1), _fmt(r.f1), _fmt(r.fidelity),
                "" if r.severity is None else _fmt(r.severity),
            ])


def read_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected CSV header {header}")
        for rec in reader:
            if len(rec) != len(CSV_COLUMNS):
                raise DataError(f"{path}: malformed row {rec}")
            rows.append(CaseMetrics(
                case_id=rec[0], cd_l1=float(rec[1]), f1=float(rec[2]),
                fidelity=float(rec[3]),
                severity=None if rec[4] == "" else float(rec[4]),
            ))
    return rows


def write_report_json(reports, path):
    """JSON mirror of one or more (label, EvalReport) sections."""
    doc = []
    for label, report in reports:
        doc.append({
            "label": label,
            "config": report.config,
            "mean": report.mean,
            "std": report.std,
            "cases": [
                {
                    "case_id": r.case_id, "cd_l1_e3": r.cd_l1, "f1_pct": r.f1,
                    "fidelity_e3": r.fidelity, "severity": r.severity,
                }
                for r in report.rows
            ],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


# hand-rolled SVG so identical inputs give identical bytes
_SVG_METRICS = (("cd_l1", "CD-l1 (1e-3)"), ("f1", "F1 (%)"),
                ("fidelity", "Fidelity (1e-3)"))
_PANEL_W, _PANEL_H, _MARGIN = 260, 220, 46


def render_svg(groups, path):
    """Bar chart of metric means per group; groups = [(label, EvalReport)].

    One panel per metric, one bar per group, value printed above each bar.
    """
    groups = list(groups)
    if not groups:
        raise ConfigError("render_svg requires at least one group")
    width = len(_SVG_METRICS) * (_PANEL_W + _MARGIN) + _MARGIN
    height = _PANEL_H + 2 * _MARGIN + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for mi, (key, title) in enumerate(_SVG_METRICS):
        x0 = _MARGIN + mi * (_PANEL_W + _MARGIN)
        y0 = _MARGIN
        values = [rep.mean[key] for _label, rep in groups]
        top = max(values + [0.0]) or 1.0
        top *= 1.15
        parts.append(
            f'<text x="{x0 + _PANEL_W // 2}" y="{y0 - 14}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">{title}</text>'
        )
        parts.append(
            f'<line x1="{x0}" y1="{y0 + _PANEL_H}" x2="{x0 + _PANEL_W}" '
            f'y2="{y0 + _PANEL_H}" stroke="black"/>'
        )
        parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + _PANEL_H}" '
            f'stroke="black"/>'
        )
        slot = _PANEL_W / max(len(groups), 1)
        bar_w = slot * 0.6
        for gi, (label, rep) in enumerate(groups):
            v = rep.mean[key]
            h = 0.0 if top == 0 else _PANEL_H * (v / top)
            bx = x0 + gi * slot + (slot - bar_w) / 2
            by = y0 + _PANEL_H - h
            parts.append(
                f'<rect x="{bx:.2f}" y="{by:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="#4878a8"/>'
            )
            parts.append(
                f'<text x="{bx + bar_w / 2:.2f}" y="{by - 4:.2f}" '
                f'text-anchor="middle" font-family="sans-serif" '
                f'font-size="10">{_fmt(v)}</text>'
            )
            parts.append(
                f'<text x="{bx + bar_w / 2:.2f}" y="{y0 + _PANEL_H + 14}" '
                f'text-anchor="middle" font-family="sans-serif" '
                f'font-size="10">{label}</text>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")


def render_report(reports, csv_path, svg_path=None, json_path=None):
    """Emit CSV (all rows), optional SVG chart and JSON mirror.

    `reports` is a list of (label, EvalReport); rows keep section order.
    """
    reports = list(reports)
    all_rows = [r for _label, rep in reports for r in rep.rows]
    write_csv(all_rows, csv_path)
    if svg_path is not None:
        render_svg(reports, svg_path)
    if json_path is not None:
        write_report_json(reports, json_path)
