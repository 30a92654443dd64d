"""Average precision for instance masks and mask-derived boxes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import InstanceMask, PointCloudScene, box_from_mask, box_iou

AP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))

SceneSample = tuple[Sequence[InstanceMask], Sequence[InstanceMask]]


def mask_iou_matrix(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    a = np.stack([p.bits for p in preds]).astype(np.float64)
    b = np.stack([g.bits for g in gts]).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def box_iou_matrix(preds, gts, scene: PointCloudScene) -> np.ndarray:
    pb = [box_from_mask(scene, p) for p in preds]
    gb = [box_from_mask(scene, g) for g in gts]
    return np.array([[box_iou(a, b) for b in gb] for a in pb]).reshape(len(pb), len(gb))


def average_precision(tp: np.ndarray, n_pos: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_pos == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / n_pos
    prec = ctp / np.maximum(ctp + cfp, 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(math.fsum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_tp(samples: Sequence[SceneSample], ious: Sequence[np.ndarray], cls: int,
              thresh: float) -> tuple[np.ndarray, int]:
    entries = []  # (-conf, scene, pred index)
    n_pos = 0
    for s, (preds, gts) in enumerate(samples):
        n_pos += sum(1 for g in gts if g.class_id == cls)
        entries += [(-p.confidence, s, i) for i, p in enumerate(preds) if p.class_id == cls]
    entries.sort()
    matched = [np.zeros(len(gts), dtype=bool) for _, gts in samples]
    tp = np.zeros(len(entries))
    for k, (_, s, i) in enumerate(entries):
        gts = samples[s][1]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if g.class_id != cls or matched[s][j]:
                continue
            if ious[s][i, j] > best_iou:
                best, best_iou = j, ious[s][i, j]
        if best >= 0 and best_iou >= thresh:
            matched[s][best] = True
            tp[k] = 1.0
    return tp, n_pos


def _per_class_ap(samples, ious, thresh: float) -> dict[int, float]:
    classes = sorted({g.class_id for _, gts in samples for g in gts})
    return {c: average_precision(*_class_tp(samples, ious, c, thresh)) for c in classes}


def _mean(d: dict) -> float:
    return float(math.fsum(d.values()) / len(d)) if d else 0.0


def mask_ap_multi(samples: Sequence[SceneSample], iou_thresh: float) -> float:
    ious = [mask_iou_matrix(p, g) for p, g in samples]
    return _mean(_per_class_ap(samples, ious, iou_thresh))


def mask_ap(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask], iou_thresh: float) -> float:
    """Class-mean AP of ``preds`` against ``gts`` at one mask-IoU threshold."""
    return mask_ap_multi([(preds, gts)], iou_thresh)


def detection_ap_multi(samples: Sequence[SceneSample], scenes: Sequence[PointCloudScene],
                       iou_thresh: float) -> float:
    ious = [box_iou_matrix(p, g, sc) for (p, g), sc in zip(samples, scenes)]
    return _mean(_per_class_ap(samples, ious, iou_thresh))


def detection_ap(preds, gts, scene: PointCloudScene, iou_thresh: float) -> float:
    """AP with every mask replaced by its bounding box."""
    return detection_ap_multi([(preds, gts)], [scene], iou_thresh)


@dataclass
class EvalReport:
    ap: float = 0.0
    ap50: float = 0.0
    ap25: float = 0.0
    per_class: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    box_ap50: float = 0.0
    box_ap25: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): list(v) for k, v in self.per_class.items()}
        return d


def evaluate(samples: Sequence[SceneSample], scenes: Sequence[PointCloudScene] | None = None) -> EvalReport:
    """Mask AP (0.50:0.95), AP50, AP25 per class and overall, plus box APs if scenes are given."""
    ious = [mask_iou_matrix(p, g) for p, g in samples]
    by_t = {t: _per_class_ap(samples, ious, t) for t in AP_THRESHOLDS + (0.25,)}
    classes = sorted(by_t[0.5])
    per_class = {
        c: (float(np.mean([by_t[t][c] for t in AP_THRESHOLDS])), by_t[0.5][c], by_t[0.25][c])
        for c in classes
    }
    report = EvalReport(
        ap=float(np.mean([_mean(by_t[t]) for t in AP_THRESHOLDS])),
        ap50=_mean(by_t[0.5]),
        ap25=_mean(by_t[0.25]),
        per_class=per_class,
    )
    if scenes is not None:
        bious = [box_iou_matrix(p, g, sc) for (p, g), sc in zip(samples, scenes)]
        report.box_ap50 = _mean(_per_class_ap(samples, bious, 0.5))
        report.box_ap25 = _mean(_per_class_ap(samples, bious, 0.25))
    return report


def instances_from_labels(instance: np.ndarray, semantic: np.ndarray) -> list[InstanceMask]:
    out = []
    for inst in sorted(int(i) for i in np.unique(instance) if i >= 0):
        bits = instance == inst
        out.append(InstanceMask(bits, 1.0, int(semantic[bits][0])))
    return out


def gt_instances(scene: PointCloudScene) -> list[InstanceMask]:
    return instances_from_labels(scene.gt_instance, scene.gt_semantic)


def pseudo_label_quality(pseudo, scene: PointCloudScene) -> dict[int, float]:
    """Per-class AP50 of pseudo instances (confidence 1) against the scene's ground truth."""
    preds = instances_from_labels(pseudo.instance, pseudo.semantic)
    gts = gt_instances(scene)
    ious = [mask_iou_matrix(preds, gts)]
    return _per_class_ap([(preds, gts)], ious, 0.5)


def report_csv_rows(report: EvalReport) -> list[dict]:
    return [{"class": c, "ap": v[0], "ap50": v[1], "ap25": v[2]} for c, v in report.per_class.items()]
