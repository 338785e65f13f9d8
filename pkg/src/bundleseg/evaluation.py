"""Bundle-level matching and metrics.

A bundle is a connected component (8-connectivity by default). Matching is
by pixel overlap, at least one shared pixel, with no IoU threshold:

  - a ground-truth component of class c is a true positive for class c when
    any of its pixels is predicted, otherwise a false negative for c;
  - a predicted component is a true positive when any of its pixels lies on
    ground-truth foreground of any class, otherwise a false positive.

The outline mask defines the annotated region; both predictions and ground
truth are restricted to it before matching, so anything outside contributes
to no count. Rates aggregate totals across sections first, then divide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError, ValidationError
from .slide_io import CLASS_NAMES, FOREGROUND_CLASSES, LabelMask, OutlineMask

_STRUCT_8 = np.ones((3, 3), dtype=bool)
_STRUCT_4 = ndimage.generate_binary_structure(2, 1)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return _STRUCT_8
    if connectivity == 4:
        return _STRUCT_4
    raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")


@dataclass
class BundleInstance:
    component_id: int
    pixel_count: int
    bounding_box: tuple[int, int, int, int]
    pixels: np.ndarray
    class_code: int | None = None

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ValidationError("a component must contain at least one pixel")


@dataclass
class SectionEvalCounts:
    section_id: str
    tp_class: dict[int, int] = field(default_factory=dict)
    fn_class: dict[int, int] = field(default_factory=dict)
    tp_pred: int = 0
    fp_pred: int = 0


@dataclass
class EvalReport:
    tpr_dense: float | None
    tpr_moderate: float | None
    tpr_sparse: float | None
    tp_avg: float
    fp_avg: float
    fdr: float | None
    n_sections: int
    per_section: list[SectionEvalCounts]


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[BundleInstance]:
    """Extract maximal connected foreground sets, in row-major discovery order."""
    mask = np.asarray(mask) > 0
    labeled, n = ndimage.label(mask, structure=_structure(connectivity))
    out = []
    slices = ndimage.find_objects(labeled)
    for i, sl in enumerate(slices, start=1):
        pix = np.argwhere(labeled == i)
        out.append(
            BundleInstance(
                component_id=i,
                pixel_count=len(pix),
                bounding_box=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                pixels=pix,
            )
        )
    return out


def evaluate_section(
    pred_mask: np.ndarray,
    gt: LabelMask,
    outline: OutlineMask | None,
    included_classes=FOREGROUND_CLASSES,
    connectivity: int = 8,
) -> SectionEvalCounts:
    """Count per-class TP/FN over ground-truth bundles and TP/FP over predictions.

    included_classes selects which ground-truth classes are scored per class;
    predicted-component matching always accepts overlap with any foreground
    class, so a model trained without sparse bundles is not charged a false
    positive for finding one.
    """
    pred = np.asarray(pred_mask) > 0
    if pred.shape != gt.labels.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape} != ground-truth shape {gt.labels.shape}"
        )
    if outline is not None:
        if outline.inside.shape != pred.shape:
            raise ShapeMismatchError(
                f"outline shape {outline.inside.shape} != prediction shape {pred.shape}"
            )
        inside = outline.inside
    else:
        inside = np.ones_like(pred, dtype=bool)

    pred = pred & inside
    codes = np.where(inside, gt.labels, 0)
    struct = _structure(connectivity)

    counts = SectionEvalCounts(section_id=gt.section_id)
    any_fg = np.isin(codes, FOREGROUND_CLASSES)
    for c in sorted(set(included_classes)):
        labeled, n = ndimage.label(codes == c, structure=struct)
        hit = np.unique(labeled[pred & (labeled > 0)])
        counts.tp_class[c] = int(hit.size)
        counts.fn_class[c] = int(n - hit.size)

    pred_labeled, n_pred = ndimage.label(pred, structure=struct)
    hit = np.unique(pred_labeled[any_fg & (pred_labeled > 0)])
    counts.tp_pred = int(hit.size)
    counts.fp_pred = int(n_pred - hit.size)
    return counts


def tpr_per_class(counts: list[SectionEvalCounts], class_code: int) -> float | None:
    """Total TP / (TP + FN) for one class over all sections; None when no bundles."""
    tp = sum(c.tp_class.get(class_code, 0) for c in counts)
    fn = sum(c.fn_class.get(class_code, 0) for c in counts)
    if tp + fn == 0:
        return None
    return tp / (tp + fn)


def fdr(counts: list[SectionEvalCounts]) -> float | None:
    """Total FP / (TP + FP) over predicted components; None when no predictions."""
    tp = sum(c.tp_pred for c in counts)
    fp = sum(c.fp_pred for c in counts)
    if tp + fp == 0:
        return None
    return fp / (tp + fp)


def build_report(counts: list[SectionEvalCounts]) -> EvalReport:
    if not counts:
        raise ValidationError("cannot build a report from zero sections")
    n = len(counts)
    return EvalReport(
        tpr_dense=tpr_per_class(counts, 1),
        tpr_moderate=tpr_per_class(counts, 2),
        tpr_sparse=tpr_per_class(counts, 3),
        tp_avg=sum(c.tp_pred for c in counts) / n,
        fp_avg=sum(c.fp_pred for c in counts) / n,
        fdr=fdr(counts),
        n_sections=n,
        per_section=list(counts),
    )


def report_to_dict(report: EvalReport) -> dict:
    return {
        "tpr_dense": report.tpr_dense,
        "tpr_moderate": report.tpr_moderate,
        "tpr_sparse": report.tpr_sparse,
        "tp_avg": report.tp_avg,
        "fp_avg": report.fp_avg,
        "fdr": report.fdr,
        "n_sections": report.n_sections,
        "per_section": [
            {
                "section_id": c.section_id,
                "tp_class": {str(k): v for k, v in sorted(c.tp_class.items())},
                "fn_class": {str(k): v for k, v in sorted(c.fn_class.items())},
                "tp_pred": c.tp_pred,
                "fp_pred": c.fp_pred,
            }
            for c in report.per_section
        ],
    }


def report_from_dict(doc: dict) -> EvalReport:
    return EvalReport(
        tpr_dense=doc["tpr_dense"],
        tpr_moderate=doc["tpr_moderate"],
        tpr_sparse=doc["tpr_sparse"],
        tp_avg=doc["tp_avg"],
        fp_avg=doc["fp_avg"],
        fdr=doc["fdr"],
        n_sections=doc["n_sections"],
        per_section=[
            SectionEvalCounts(
                section_id=c["section_id"],
                tp_class={int(k): v for k, v in c["tp_class"].items()},
                fn_class={int(k): v for k, v in c["fn_class"].items()},
                tp_pred=c["tp_pred"],
                fp_pred=c["fp_pred"],
            )
            for c in doc["per_section"]
        ],
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> EvalReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def format_report_table(report: EvalReport) -> str:
    """Render the summary metrics as a fixed-width table."""

    def _fmt(v):
        return "  n/a" if v is None else f"{v:5.2f}"

    lines = [
        f"sections evaluated: {report.n_sections}",
        "",
        "metric          value",
        "-------------  ------",
        f"TPR dense      {_fmt(report.tpr_dense)}",
        f"TPR moderate   {_fmt(report.tpr_moderate)}",
        f"TPR sparse     {_fmt(report.tpr_sparse)}",
        f"TP avg         {_fmt(report.tp_avg)}",
        f"FP avg         {_fmt(report.fp_avg)}",
        f"FDR            {_fmt(report.fdr)}",
    ]
    per_class_names = ", ".join(CLASS_NAMES[c] for c in FOREGROUND_CLASSES)
    lines.append("")
    lines.append(f"per-class rates cover: {per_class_names}")
    return "\n".join(lines)
