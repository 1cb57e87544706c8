"""Evaluation: VOC-style mAP, prediction categorization, sequence analyses.

Detections are pooled across images per class, ranked by score, and
greedily assigned to ground truth: a detection is a true positive iff its
IoU with a not-yet-claimed ground-truth box of its class reaches the
threshold.  Average precision integrates the precision-recall curve either
exactly (all-point, the default) or with the legacy 11-point interpolation.

The analyses mirror the sequence-level views of the detector: a
per-iteration histogram over six prediction categories, per-iteration
precision, and the correlation between emitted detection counts and
ground-truth object counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import AnnotatedImage
from .geometry import BoxXYXY, decode_offsets, iou, nms
from .model import InferenceResult, SequentialDetector, StepOutput

CATEGORIES = ("good", "bad", "duplicate", "background", "eos_correct", "eos_incorrect")


@dataclass
class EvalReport:
    map: float
    per_class_ap: dict[str, Optional[float]]
    mode: str
    iou_threshold: float
    notices: list[str] = field(default_factory=list)
    category_histogram: list[dict[str, int]] = field(default_factory=list)
    per_iteration_precision: list[Optional[float]] = field(default_factory=list)
    count_pairs: list[tuple[int, int]] = field(default_factory=list)
    count_correlation: Optional[float] = None
    mean_iterations: Optional[float] = None
    mean_detections: Optional[float] = None
    mean_ground_truth: Optional[float] = None
    eos_rate: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": self.per_class_ap,
            "mode": self.mode,
            "iou_threshold": self.iou_threshold,
            "notices": self.notices,
            "category_histogram": self.category_histogram,
            "per_iteration_precision": self.per_iteration_precision,
            "count_pairs": [list(p) for p in self.count_pairs],
            "count_correlation": self.count_correlation,
            "mean_iterations": self.mean_iterations,
            "mean_detections": self.mean_detections,
            "mean_ground_truth": self.mean_ground_truth,
            "eos_rate": self.eos_rate,
            "extras": self.extras,
        }

    def to_text(self) -> str:
        lines = [
            f"mAP@{self.iou_threshold:g} ({self.mode}): {self.map:.4f}",
            "per-class AP:",
        ]
        for name, ap in self.per_class_ap.items():
            lines.append(f"  {name}: " + ("n/a" if ap is None else f"{ap:.4f}"))
        for notice in self.notices:
            lines.append(f"note: {notice}")
        if self.per_iteration_precision:
            lines.append("per-iteration precision (good / (good + bad + duplicate)):")
            for i, p in enumerate(self.per_iteration_precision, start=1):
                lines.append(f"  iter {i}: " + ("n/a" if p is None else f"{p:.4f}"))
        if self.count_correlation is not None:
            lines.append(f"count correlation (Pearson r): {self.count_correlation:.4f}")
        if self.mean_detections is not None:
            lines.append(f"mean detections per image: {self.mean_detections:.4f}")
        if self.mean_ground_truth is not None:
            lines.append(f"mean ground-truth objects per image: {self.mean_ground_truth:.4f}")
        if self.eos_rate is not None:
            lines.append(f"fraction of runs ended by EoS: {self.eos_rate:.4f}")
        if self.mean_iterations is not None:
            lines.append(f"mean iterations until stop: {self.mean_iterations:.4f}")
        for key, value in self.extras.items():
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# average precision core (pure functions, oracle-testable)


def average_precision(
    scores: Sequence[float], tp_flags: Sequence[bool], n_ground_truth: int, mode: str = "all-point"
) -> float:
    """AP of one class from ranked detections (already sorted by the caller)."""
    if n_ground_truth == 0:
        raise ValueError("AP undefined without ground truth")
    if not scores:
        return 0.0
    tp = np.asarray(tp_flags, dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_ground_truth
    precision = cum_tp / (cum_tp + cum_fp)
    if mode == "11-point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            total += precision[mask].max() if mask.any() else 0.0
        return total / 11.0
    if mode != "all-point":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mpre[changed]))


def compute_map(
    detections: Sequence[tuple[int, int, float, BoxXYXY]],
    ground_truths: Sequence[list[tuple[int, BoxXYXY]]],
    num_classes: int,
    iou_threshold: float = 0.5,
    mode: str = "all-point",
    class_names: Optional[Sequence[str]] = None,
) -> tuple[float, dict[str, Optional[float]], list[str]]:
    """mAP over classes from (image_idx, class_id, score, box) detections.

    Classes absent from the ground truth get AP None and are excluded from
    the mean, with a notice.  Returns (mAP, per-class AP, notices).
    """
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    per_class: dict[str, Optional[float]] = {}
    notices: list[str] = []
    aps = []
    for cls in range(num_classes):
        gt_boxes = {
            img_idx: [box for c, box in gts if c == cls]
            for img_idx, gts in enumerate(ground_truths)
        }
        n_gt = sum(len(v) for v in gt_boxes.values())
        if n_gt == 0:
            per_class[names[cls]] = None
            notices.append(f"class {names[cls]} absent from ground truth; excluded from mAP")
            continue
        cls_dets = [
            (order, img_idx, score, box)
            for order, (img_idx, det_cls, score, box) in enumerate(detections)
            if det_cls == cls
        ]
        cls_dets.sort(key=lambda d: (-d[2], d[0]))
        claimed: dict[int, set[int]] = {}
        scores, flags = [], []
        for _order, img_idx, score, box in cls_dets:
            candidates = gt_boxes.get(img_idx, [])
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(candidates):
                v = iou(box, gt_box)
                if v > best_iou:
                    best_iou, best_j = v, j
            taken = claimed.setdefault(img_idx, set())
            if best_iou >= iou_threshold and best_j not in taken:
                taken.add(best_j)
                flags.append(True)
            else:
                flags.append(False)
            scores.append(score)
        ap = average_precision(scores, flags, n_gt, mode)
        per_class[names[cls]] = ap
        aps.append(ap)
    overall = float(np.mean(aps)) if aps else 0.0
    return overall, per_class, notices


# ---------------------------------------------------------------------------
# sequence-level analyses


def categorize_predictions(
    sequences: Sequence[Sequence[StepOutput]],
    ground_truths: Sequence[list[tuple[int, BoxXYXY]]],
    eos_index: int,
    background_index: Optional[int],
    iou_threshold: float = 0.5,
) -> list[dict[str, int]]:
    """Per-iteration histogram over the six prediction categories.

    good: correct class, IoU at threshold against an unclaimed ground truth
    (which it claims); duplicate: same but the ground truth was already
    claimed; background: classified background; EoS correct/incorrect by
    whether every ground truth was claimed at emission time; bad: the rest.
    """
    max_len = max((len(s) for s in sequences), default=0)
    hist = [dict.fromkeys(CATEGORIES, 0) for _ in range(max_len)]
    for steps, gts in zip(sequences, ground_truths):
        claimed: set[int] = set()
        for it, step in enumerate(steps):
            if step.class_id == eos_index:
                key = "eos_correct" if len(claimed) == len(gts) else "eos_incorrect"
            elif background_index is not None and step.class_id == background_index:
                key = "background"
            else:
                best_unclaimed, best_unclaimed_iou = -1, 0.0
                any_claimed_hit = False
                for j, (gt_cls, gt_box) in enumerate(gts):
                    if gt_cls != step.class_id:
                        continue
                    v = iou(step.box, gt_box)
                    if v >= iou_threshold:
                        if j in claimed:
                            any_claimed_hit = True
                        elif v > best_unclaimed_iou or best_unclaimed < 0:
                            best_unclaimed, best_unclaimed_iou = j, v
                if best_unclaimed >= 0:
                    claimed.add(best_unclaimed)
                    key = "good"
                elif any_claimed_hit:
                    key = "duplicate"
                else:
                    key = "bad"
            hist[it][key] += 1
    return hist


def per_iteration_precision(histogram: Sequence[dict[str, int]]) -> list[Optional[float]]:
    """good / (good + bad + duplicate) per iteration; None when empty."""
    out = []
    for row in histogram:
        denom = row["good"] + row["bad"] + row["duplicate"]
        out.append(row["good"] / denom if denom else None)
    return out


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(xs) < 2:
        return None
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd @ xd) * (yd @ yd))
    if denom == 0.0:
        return 0.0
    return float((xd @ yd) / denom)


def run_inference(
    model: SequentialDetector,
    scenes: Sequence[AnnotatedImage],
    max_iters: int = 16,
    fixed_iters: Optional[int] = None,
    jobs: int = 1,
) -> list[InferenceResult]:
    """Inference over a dataset; fixed_iters switches to fixed-length decoding."""

    def one(scene: AnnotatedImage) -> InferenceResult:
        if fixed_iters is None:
            return model.infer(scene.image, max_iters=max_iters)
        return _fixed_length_infer(model, scene.image, fixed_iters)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, scenes))
    return [one(scene) for scene in scenes]


def _fixed_length_infer(model: SequentialDetector, image, iters: int) -> InferenceResult:
    """Decode a fixed number of iterations, ignoring EoS (dense regime)."""
    from . import autodiff as ad

    cfg = model.config
    with ad.no_grad():
        preds = model.decode_sequence(image, iters)
    steps = [
        StepOutput(
            class_id=p.argmax_class,
            probs=p.cls_values(),
            offsets=p.loc_values(),
            box=decode_offsets(p.loc_values()),
            attention=p.attention,
        )
        for p in preds
    ]
    detections = [
        (s.class_id, float(s.probs[s.class_id]), s.box)
        for s in steps
        if s.class_id != cfg.eos_index and s.class_id != cfg.background_index
    ]
    return InferenceResult(
        detections=detections,
        attention_maps=[s.attention for s in steps],
        steps=steps,
        stopped_by_eos=False,
    )


def ground_truth_boxes(scenes: Sequence[AnnotatedImage]) -> list[list[tuple[int, BoxXYXY]]]:
    return [[(cls, decode_offsets(box)) for cls, box in scene.objects] for scene in scenes]


def _pool_detections(results: Sequence[InferenceResult]) -> list[tuple[int, int, float, BoxXYXY]]:
    pooled = []
    for img_idx, res in enumerate(results):
        for cls, score, box in res.detections:
            pooled.append((img_idx, cls, score, box))
    return pooled


def evaluate_map(
    model: SequentialDetector,
    scenes: Sequence[AnnotatedImage],
    iou_threshold: float = 0.5,
    mode: str = "all-point",
    max_iters: int = 16,
    class_names: Optional[Sequence[str]] = None,
    jobs: int = 1,
    results: Optional[list[InferenceResult]] = None,
) -> EvalReport:
    """EoS-terminated inference (no NMS) plus the full analysis suite."""
    if results is None:
        results = run_inference(model, scenes, max_iters=max_iters, jobs=jobs)
    gts = ground_truth_boxes(scenes)
    overall, per_class, notices = compute_map(
        _pool_detections(results),
        gts,
        num_classes=model.config.num_classes,
        iou_threshold=iou_threshold,
        mode=mode,
        class_names=class_names,
    )
    hist = categorize_predictions(
        [r.steps for r in results],
        gts,
        eos_index=model.config.eos_index,
        background_index=model.config.background_index,
        iou_threshold=iou_threshold,
    )
    counts = [(len(scene.objects), len(res.detections)) for scene, res in zip(scenes, results)]
    report = EvalReport(
        map=overall,
        per_class_ap=per_class,
        mode=mode,
        iou_threshold=iou_threshold,
        notices=notices,
        category_histogram=hist,
        per_iteration_precision=per_iteration_precision(hist),
        count_pairs=counts,
        count_correlation=pearson_r([c[0] for c in counts], [c[1] for c in counts]),
        mean_iterations=float(np.mean([len(r.steps) for r in results])) if results else None,
        mean_detections=float(np.mean([len(r.detections) for r in results])) if results else None,
        mean_ground_truth=float(np.mean([len(s.objects) for s in scenes])) if scenes else None,
        eos_rate=float(np.mean([r.stopped_by_eos for r in results])) if results else None,
    )
    return report


def analysis_suite(
    model: SequentialDetector,
    scenes: Sequence[AnnotatedImage],
    iou_threshold: float = 0.5,
    max_iters: int = 16,
    jobs: int = 1,
) -> EvalReport:
    """Prediction-category histogram, per-iteration precision, count correlation."""
    return evaluate_map(model, scenes, iou_threshold=iou_threshold, max_iters=max_iters, jobs=jobs)


def evaluate_dense(
    model: SequentialDetector,
    scenes: Sequence[AnnotatedImage],
    nms_threshold: float = 0.5,
    fixed_iters: int = 9,
    iou_threshold: float = 0.5,
    mode: str = "all-point",
    class_names: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> EvalReport:
    """Fixed-length decoding (EoS ignored) with per-class NMS before mAP."""
    results = run_inference(model, scenes, fixed_iters=fixed_iters, jobs=jobs)
    gts = ground_truth_boxes(scenes)
    pooled = []
    kept_counts = []
    for img_idx, res in enumerate(results):
        kept = nms(res.detections, nms_threshold)
        kept_counts.append(len(kept))
        for cls, score, box in kept:
            pooled.append((img_idx, cls, score, box))
    overall, per_class, notices = compute_map(
        pooled,
        gts,
        num_classes=model.config.num_classes,
        iou_threshold=iou_threshold,
        mode=mode,
        class_names=class_names,
    )
    counts = [(len(scene.objects), k) for scene, k in zip(scenes, kept_counts)]
    report = EvalReport(
        map=overall,
        per_class_ap=per_class,
        mode=mode,
        iou_threshold=iou_threshold,
        notices=notices,
        count_pairs=counts,
        count_correlation=pearson_r([c[0] for c in counts], [c[1] for c in counts]),
        mean_detections=float(np.mean(kept_counts)) if kept_counts else None,
        mean_ground_truth=float(np.mean([len(s.objects) for s in scenes])) if scenes else None,
        extras={
            "inference": f"fixed {fixed_iters} iterations, EoS ignored, NMS@{nms_threshold:g}"
        },
    )
    return report


# ---------------------------------------------------------------------------
# hand-traced mAP oracle fixtures (shared by selfcheck and the test suite)


def map_oracle_fixtures() -> list[dict]:
    """Detection sets small enough to trace the PR curve by hand.

    Each fixture pins the exact mAP (and per-class APs) expected from
    compute_map; expected values were worked out on paper from the ranked
    detections, not from the implementation.
    """
    unit = BoxXYXY(0.1, 0.1, 0.4, 0.4)
    other = BoxXYXY(0.6, 0.6, 0.9, 0.9)
    return [
        {
            "name": "single true positive",
            "detections": [(0, 0, 0.9, unit)],
            "ground_truths": [[(0, unit)]],
            "num_classes": 2,
            "mode": "all-point",
            "expected_map": 1.0,
            "expected_ap": {"0": 1.0, "1": None},
        },
        {
            "name": "duplicate ranked below the hit keeps AP 1",
            "detections": [(0, 0, 0.9, unit), (0, 0, 0.8, unit)],
            "ground_truths": [[(0, unit)]],
            "num_classes": 1,
            "mode": "all-point",
            "expected_map": 1.0,
            "expected_ap": {"0": 1.0},
        },
        {
            "name": "false positive ranked above the hit halves AP",
            "detections": [(0, 0, 0.9, other), (0, 0, 0.8, unit)],
            "ground_truths": [[(0, unit)]],
            "num_classes": 1,
            "mode": "all-point",
            "expected_map": 0.5,
            "expected_ap": {"0": 0.5},
        },
        {
            "name": "no detections at all",
            "detections": [],
            "ground_truths": [[(0, unit)], [(0, other)]],
            "num_classes": 1,
            "mode": "all-point",
            "expected_map": 0.0,
            "expected_ap": {"0": 0.0},
        },
        {
            "name": "half recall, all-point",
            "detections": [(0, 0, 0.9, unit)],
            "ground_truths": [[(0, unit), (0, other)]],
            "num_classes": 1,
            "mode": "all-point",
            "expected_map": 0.5,
            "expected_ap": {"0": 0.5},
        },
        {
            "name": "half recall, 11-point",
            "detections": [(0, 0, 0.9, unit)],
            "ground_truths": [[(0, unit), (0, other)]],
            "num_classes": 1,
            "mode": "11-point",
            "expected_map": 6.0 / 11.0,
            "expected_ap": {"0": 6.0 / 11.0},
        },
        {
            "name": "class mean over perfect and missed classes",
            "detections": [(0, 0, 0.9, unit), (0, 1, 0.9, unit)],
            "ground_truths": [[(0, unit), (1, other)]],
            "num_classes": 2,
            "mode": "all-point",
            "expected_map": 0.5,
            "expected_ap": {"0": 1.0, "1": 0.0},
        },
    ]


def run_map_oracle_fixtures() -> int:
    """Assert every fixture reproduces exactly; returns the fixture count."""
    for fx in map_oracle_fixtures():
        overall, per_class, _ = compute_map(
            fx["detections"],
            fx["ground_truths"],
            num_classes=fx["num_classes"],
            mode=fx["mode"],
        )
        if overall != fx["expected_map"] or per_class != fx["expected_ap"]:
            raise AssertionError(
                f"mAP fixture {fx['name']!r}: got map={overall} per-class={per_class}, "
                f"expected {fx['expected_map']} / {fx['expected_ap']}"
            )
    return len(map_oracle_fixtures())


# ---------------------------------------------------------------------------
# report files


def write_report(directory, report: EvalReport, stem: str = "report") -> None:
    """Emit the machine-readable JSON, plain-text table, and histogram CSV."""
    import os

    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{stem}.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(directory, f"{stem}.txt"), "w") as f:
        f.write(report.to_text())
    if report.category_histogram:
        with open(os.path.join(directory, f"{stem}_categories.csv"), "w") as f:
            f.write("iteration," + ",".join(CATEGORIES) + "\n")
            for i, row in enumerate(report.category_histogram, start=1):
                f.write(f"{i}," + ",".join(str(row[c]) for c in CATEGORIES) + "\n")
    if report.count_pairs:
        with open(os.path.join(directory, f"{stem}_counts.csv"), "w") as f:
            f.write("ground_truth,detections\n")
            for gt, det in report.count_pairs:
                f.write(f"{gt},{det}\n")
