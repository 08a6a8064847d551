"""Dice/IoU scoring and sampled test-set evaluation reports."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, load_slice_pair
from .errors import EmptyManifest, ShapeMismatch
from .model import PromptSpec

FOREGROUND_CLASSES = (1, 2)
ALL_CLASSES = (0, 1, 2)

AGG_MACRO_FOREGROUND = "macro_foreground"
AGG_MACRO_ALL = "macro_all"
AGG_MICRO = "micro"
AGGREGATIONS = (AGG_MACRO_FOREGROUND, AGG_MACRO_ALL, AGG_MICRO)


def _counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[int, int, int]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|) for one class; 1.0 when the class is absent from both."""
    inter, na, nb = _counts(pred, gt, class_id)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """|A∩B| / |A∪B| for one class; 1.0 when the class is absent from both."""
    inter, na, nb = _counts(pred, gt, class_id)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class MetricsReport:
    per_class: dict[int, tuple[float, float]]  # class -> (dice, iou)
    overall_dice: float
    overall_iou: float
    n_slices_evaluated: int
    sampling_seed: int
    model_id: str
    aggregation: str
    # slices where a class was absent from both prediction and ground truth
    empty_class_slices: dict[int, int] = field(default_factory=dict)


def evaluate_model(
    model,
    test_manifest: DatasetManifest,
    sample_n: int,
    seed: int,
    aggregation: str = AGG_MACRO_FOREGROUND,
    root=None,
    prompt: PromptSpec | None = None,
    exclude_empty: bool = False,
    model_id: str | None = None,
) -> MetricsReport:
    """Score a model on a seed-deterministic sample of test slices.

    `model` needs a predict(image, prompt) -> (label, probs) method. With
    macro aggregations, per-slice per-class scores are averaged over
    slices; "overall" is the mean over gray and white matter (macro over
    all three classes for macro_all). Micro aggregation pools pixel counts
    globally before scoring. A class absent from both masks scores 1.0 and
    is flagged; `exclude_empty` drops such slices from that class's mean
    instead (the overall score always uses the fixed 1.0 convention).
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    entries = test_manifest.entries
    if not entries:
        raise EmptyManifest(f"test manifest for split {test_manifest.split!r} is empty")
    root = Path(root) if root is not None else Path(".")

    if sample_n > len(entries):
        warnings.warn(
            f"sample_n={sample_n} exceeds manifest size {len(entries)}; evaluating all slices"
        )
        chosen = list(range(len(entries)))
    else:
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.permutation(len(entries))[:sample_n].tolist())

    classes = ALL_CLASSES
    fg = FOREGROUND_CLASSES if aggregation != AGG_MACRO_ALL else ALL_CLASSES
    per_class_scores: dict[int, list[tuple[float, float]]] = {c: [] for c in classes}
    empty_counts = {c: 0 for c in classes}
    micro_totals = {c: np.zeros(3, dtype=np.int64) for c in classes}
    overall_terms = []

    for i in chosen:
        pair = load_slice_pair(root, entries[i])
        gt = pair.label
        pred, _ = model.predict(pair.image, prompt)
        slice_fg = []
        for c in classes:
            inter, na, nb = _counts(pred, gt, c)
            micro_totals[c] += (inter, na, nb)
            empty = na + nb == 0
            d = 1.0 if empty else 2.0 * inter / (na + nb)
            j = 1.0 if empty else inter / (na + nb - inter)
            if empty:
                empty_counts[c] += 1
                if not exclude_empty:
                    per_class_scores[c].append((d, j))
            else:
                per_class_scores[c].append((d, j))
            if c in fg:
                slice_fg.append((d, j))
        overall_terms.append(
            (float(np.mean([s[0] for s in slice_fg])), float(np.mean([s[1] for s in slice_fg])))
        )

    if aggregation == AGG_MICRO:
        per_class = {}
        for c in classes:
            inter, na, nb = (int(v) for v in micro_totals[c])
            d = 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)
            j = 1.0 if na + nb - inter == 0 else inter / (na + nb - inter)
            per_class[c] = (d, j)
        overall_dice = float(np.mean([per_class[c][0] for c in fg]))
        overall_iou = float(np.mean([per_class[c][1] for c in fg]))
    else:
        per_class = {
            c: (
                float(np.mean([s[0] for s in scores])) if scores else 1.0,
                float(np.mean([s[1] for s in scores])) if scores else 1.0,
            )
            for c, scores in per_class_scores.items()
        }
        overall_dice = float(np.mean([t[0] for t in overall_terms]))
        overall_iou = float(np.mean([t[1] for t in overall_terms]))

    return MetricsReport(
        per_class=per_class,
        overall_dice=overall_dice,
        overall_iou=overall_iou,
        n_slices_evaluated=len(chosen),
        sampling_seed=seed,
        model_id=model_id or getattr(model, "model_id", "model"),
        aggregation=aggregation,
        empty_class_slices=empty_counts,
    )


def compare_models(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Reports sorted by overall Dice, best first."""
    if not reports:
        raise ValueError("need at least one report to compare")
    return sorted(reports, key=lambda r: r.overall_dice, reverse=True)


def format_comparison_csv(reports: list[MetricsReport]) -> str:
    lines = ["model,overall_dice,overall_iou"]
    for r in compare_models(reports):
        lines.append(f"{r.model_id},{r.overall_dice:.4f},{r.overall_iou:.4f}")
    return "\n".join(lines) + "\n"


def format_comparison_text(reports: list[MetricsReport]) -> str:
    rows = compare_models(reports)
    width = max(len(r.model_id) for r in rows)
    lines = [f"{'model':<{width}}  dice    iou"]
    for r in rows:
        lines.append(f"{r.model_id:<{width}}  {r.overall_dice:.4f}  {r.overall_iou:.4f}")
    return "\n".join(lines) + "\n"


def write_report_json(report: MetricsReport, path) -> None:
    payload = {
        "model_id": report.model_id,
        "aggregation": report.aggregation,
        "overall_dice": report.overall_dice,
        "overall_iou": report.overall_iou,
        "n_slices_evaluated": report.n_slices_evaluated,
        "sampling_seed": report.sampling_seed,
        "per_class": {str(c): {"dice": d, "iou": j} for c, (d, j) in report.per_class.items()},
        "empty_class_slices": {str(c): n for c, n in report.empty_class_slices.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_report_csv(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_comparison_csv([report]), encoding="utf-8")
