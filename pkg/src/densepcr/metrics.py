"""Evaluation at a chosen ladder resolution and report emission.

Reported numbers follow the usual table convention: Chamfer x100, EMD x10,
both computed after fitting each cloud to its own unit bounding box.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ShapeRecord, _atomic_write
from .model import DensePCRModel, forward_pyramid
from .pointset import chamfer, emd_approx, normalize_unit_bbox

CHAMFER_SCALE = 100.0
EMD_SCALE = 10.0
RESOLUTIONS = ("sparse", "mid", "dense")
FORMATS = ("json", "csv", "table")


@dataclass
class EvalReport:
    categories: dict  # category -> {"chamfer", "emd", "count"}
    overall: dict  # {"chamfer", "emd", "count"}
    config_hash: str
    resolution: str
    entries: list = field(default_factory=list)  # per-sample rows, kept in json output

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["categories"], d["overall"], d["config_hash"], d["resolution"],
                   list(d.get("entries", [])))


def evaluate_sample(pred, gt, eps: float = 0.01) -> tuple[float, float]:
    """(100 x Chamfer, 10 x EMD) after independent unit-box renormalization."""
    p, _, _ = normalize_unit_bbox(pred)
    g, _, _ = normalize_unit_bbox(gt)
    cd = chamfer(p, g).item()
    emd, _ = emd_approx(p, g, eps=eps)
    return CHAMFER_SCALE * cd, EMD_SCALE * emd.item()


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def aggregate(entries: Sequence[dict], config_hash: str = "", resolution: str = "dense") -> EvalReport:
    if not entries:
        raise ValueError("cannot aggregate an empty evaluation")
    cats: dict[str, list[dict]] = {}
    for e in entries:
        cats.setdefault(e["category"], []).append(e)
    categories = {
        c: {"chamfer": _mean([e["chamfer"] for e in rows]),
            "emd": _mean([e["emd"] for e in rows]),
            "count": len(rows)}
        for c, rows in sorted(cats.items())
    }
    overall = {"chamfer": _mean([e["chamfer"] for e in entries]),
               "emd": _mean([e["emd"] for e in entries]),
               "count": len(entries)}
    return EvalReport(categories, overall, config_hash, resolution, list(entries))


def evaluate_dataset(model: DensePCRModel, shapes: Sequence[ShapeRecord], resolution: str = "dense",
                     views: Optional[Sequence[int]] = None, eps: float = 0.01) -> EvalReport:
    """Run the pyramid on every (shape, view) and score the chosen stage."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution!r}")
    if not shapes:
        raise ValueError("evaluation split is empty")
    level = RESOLUTIONS.index(resolution)
    entries = []
    for rec in shapes:
        for v in (range(len(rec.images)) if views is None else views):
            pred = forward_pyramid(rec.images[v], model)[level]
            cd, emd = evaluate_sample(pred.data, rec.gt[level], eps)
            entries.append({"sample_id": rec.sample_id, "view": int(v), "category": rec.category,
                            "chamfer": cd, "emd": emd})
    return aggregate(entries, model.cfg.hash(), resolution)


def report_table(report: EvalReport) -> str:
    rows = [(c, v["chamfer"], v["emd"]) for c, v in report.categories.items()]
    rows.append(("mean", report.overall["chamfer"], report.overall["emd"]))
    width = max(8, max(len(r[0]) for r in rows))
    lines = [f"{'category':<{width}}  {'Chamfer':>10}  {'EMD':>10}", "-" * (width + 24)]
    for name, cd, emd in rows:
        if name == "mean":
            lines.append("-" * (width + 24))
        lines.append(f"{name:<{width}}  {cd:>10.4f}  {emd:>10.4f}")
    lines.append(f"(Chamfer x{CHAMFER_SCALE:g}, EMD x{EMD_SCALE:g}; resolution {report.resolution}, "
                 f"{report.overall['count']} samples, config {report.config_hash})")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "chamfer", "emd", "count"])
    for c, v in report.categories.items():
        w.writerow([c, repr(v["chamfer"]), repr(v["emd"]), v["count"]])
    w.writerow(["mean", repr(report.overall["chamfer"]), repr(report.overall["emd"]),
                report.overall["count"]])
    w.writerow([f"# resolution={report.resolution}", f"config_hash={report.config_hash}", "", ""])
    return buf.getvalue()


def parse_csv(text: str) -> EvalReport:
    """Inverse of :func:`report_csv`; per-sample entries are not carried by csv."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["category", "chamfer", "emd", "count"]:
        raise ValueError("not an evaluation csv")
    categories, overall, meta = {}, None, {}
    for row in rows[1:]:
        if row[0].startswith("#"):
            for cell in row:
                key, _, val = cell.lstrip("# ").partition("=")
                if key:
                    meta[key] = val
            continue
        vals = {"chamfer": float(row[1]), "emd": float(row[2]), "count": int(row[3])}
        if row[0] == "mean":
            overall = vals
        else:
            categories[row[0]] = vals
    if overall is None:
        raise ValueError("evaluation csv has no mean row")
    return EvalReport(categories, overall, meta.get("config_hash", ""), meta.get("resolution", ""))


def emit_report(report: EvalReport, path, fmt: str = "json") -> Path:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    path = Path(path)
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=1) + "\n"
    elif fmt == "csv":
        text = report_csv(report)
    else:
        text = report_table(report)
    _atomic_write(path, text.encode())
    return path


def read_report(path, fmt: Optional[str] = None) -> EvalReport:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    text = path.read_text()
    if fmt == "csv":
        return parse_csv(text)
    return EvalReport.from_dict(json.loads(text))


def recompute_means(report: EvalReport) -> EvalReport:
    """Rebuild every aggregate from the retained per-sample entries."""
    return aggregate(report.entries, report.config_hash, report.resolution)


def zero_offset_gap(model: DensePCRModel, shapes: Sequence[ShapeRecord]) -> np.ndarray:
    """Dense Chamfer of ``model`` divided by that of its copy-parent baseline, per (shape, view)."""
    base = model.zero_heads()
    ratios = []
    for rec in shapes:
        for v in range(len(rec.images)):
            cd = chamfer(forward_pyramid(rec.images[v], model)[2], rec.gt[2]).item()
            cb = chamfer(forward_pyramid(rec.images[v], base)[2], rec.gt[2]).item()
            ratios.append(cd / cb)
    return np.array(ratios)
