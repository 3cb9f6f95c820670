"""Evaluation metrics (IoU, AWD), per-run record keeping and summary
tables mirroring strategy/step/method comparisons at desk scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .locator import mask_bbox
from .volgrid import BBox3D


@dataclass(frozen=True)
class EvalRecord:
    method: str
    organ: str
    case_id: str
    iou: float
    awd: float
    time_s: float = 0.0
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou out of range: {self.iou}")
        if self.awd < 0:
            raise ValueError(f"awd must be non-negative: {self.awd}")


def iou3d(a: BBox3D, b: BBox3D) -> float:
    """Intersection over union of two boxes in continuous world mm.

    Zero-volume boxes: 1.0 when the boxes are equal, else 0.0.
    """
    if np.array_equal(a.min_corner, b.min_corner) and np.array_equal(
        a.max_corner, b.max_corner
    ):
        return 1.0
    inter_lo = np.maximum(a.min_corner, b.min_corner)
    inter_hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.maximum(inter_hi - inter_lo, 0.0)))
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def awd(a: BBox3D, b: BBox3D) -> float:
    """Absolute wall distance: mean over the six axis-aligned faces of the
    absolute difference between corresponding face coordinates, mm."""
    diffs = np.concatenate(
        [
            np.abs(a.min_corner - b.min_corner),
            np.abs(a.max_corner - b.max_corner),
        ]
    )
    return float(diffs.mean())


def evaluate_run(
    predictions: dict[str, dict[str, BBox3D]],
    ground_truth_masks: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]],
    method: str = "ours",
    times: dict[str, dict[str, float]] | None = None,
    config_hash: str = "",
) -> tuple[list[EvalRecord], dict[str, dict[str, float]], list[str]]:
    """Score predicted boxes against mask-derived tight boxes.

    ``predictions`` maps case id -> organ -> box; ``ground_truth_masks``
    maps case id -> organ -> (mask, spacing).  Returns (records, per-organ
    summary means, flags for missing predictions).
    """
    records: list[EvalRecord] = []
    flags: list[str] = []
    for case_id, organs in ground_truth_masks.items():
        for organ, (mask, spacing) in organs.items():
            pred = predictions.get(case_id, {}).get(organ)
            if pred is None:
                flags.append(f"{case_id}/{organ}")
                continue
            gt = mask_bbox(mask, spacing)
            time_s = (times or {}).get(case_id, {}).get(organ, 0.0)
            records.append(
                EvalRecord(
                    method=method,
                    organ=organ,
                    case_id=case_id,
                    iou=iou3d(pred, gt),
                    awd=awd(pred, gt),
                    time_s=time_s,
                    config_hash=config_hash,
                )
            )
    return records, summarize(records), flags


def summarize(records: list[EvalRecord]) -> dict[str, dict[str, float]]:
    """Per-organ mean IoU / AWD / time, plus an overall 'mean' row."""
    summary: dict[str, dict[str, float]] = {}
    organs = sorted({r.organ for r in records})
    for organ in organs:
        rows = [r for r in records if r.organ == organ]
        summary[organ] = _means(rows)
    if records:
        summary["mean"] = _means(records)
    return summary


def _means(rows: list[EvalRecord]) -> dict[str, float]:
    return {
        "iou": float(np.mean([r.iou for r in rows])),
        "awd": float(np.mean([r.awd for r in rows])),
        "time_s": float(np.mean([r.time_s for r in rows])),
        "n": len(rows),
    }


def write_records_csv(records: list[EvalRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "organ", "case_id", "iou", "awd", "time_s", "config_hash"]
        )
        for r in records:
            writer.writerow(
                [
                    r.method,
                    r.organ,
                    r.case_id,
                    f"{r.iou:.6f}",
                    f"{r.awd:.6f}",
                    f"{r.time_s:.4f}",
                    r.config_hash,
                ]
            )


def write_summary_csv(
    summaries: dict[str, dict[str, dict[str, float]]],
    path: str | Path,
    include_time: bool = False,
) -> None:
    """One row per (method/variant, organ) with mean IoU and AWD."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["method", "organ", "mean_iou", "mean_awd"]
    if include_time:
        header.append("mean_time_s")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for method, summary in summaries.items():
            for organ, stats in summary.items():
                row = [
                    method,
                    organ,
                    f"{stats['iou']:.6f}",
                    f"{stats['awd']:.6f}",
                ]
                if include_time:
                    row.append(f"{stats['time_s']:.4f}")
                writer.writerow(row)


def render_table(
    summaries: dict[str, dict[str, dict[str, float]]],
    title: str,
    include_time: bool = False,
) -> str:
    """Aligned-text table: rows are method variants, columns are organs,
    each cell 'IoU%, AWD mm' (and time when requested)."""
    organs = sorted(
        {o for summary in summaries.values() for o in summary if o != "mean"}
    )
    columns = organs + ["mean"]
    widths = {c: max(len(c), 12) for c in columns}
    name_w = max([len(m) for m in summaries] + [8])

    lines = [title, "-" * len(title)]
    header = "method".ljust(name_w) + "  " + "  ".join(
        c.ljust(widths[c]) for c in columns
    )
    if include_time:
        header += "  time_s"
    lines.append(header)
    for method, summary in summaries.items():
        cells = []
        for c in columns:
            stats = summary.get(c)
            cell = (
                f"{100 * stats['iou']:.1f}, {stats['awd']:.2f}" if stats else "-"
            )
            cells.append(cell.ljust(widths[c]))
        row = method.ljust(name_w) + "  " + "  ".join(cells)
        if include_time:
            mean = summary.get("mean", {})
            row += f"  {mean.get('time_s', 0.0):.2f}"
        lines.append(row)
    return "\n".join(lines)
