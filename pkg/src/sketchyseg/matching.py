"""Bipartite matching between predictions and pseudo instances, and the training losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import DiffValue
from .diffcore import ops as T
from .geometry import PointCloudScene, box_from_points
from .segmentator import InstancePrediction, SceneTokens

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.5, 1.0, 0.5)
PAD_COST = 1e6  # sentinel for padded rows when predictions run short
_LOG_EPS = 1e-12


class NonFiniteCost(ValueError):
    pass


# ---------------------------------------------------------------- hungarian

def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for n_rows <= n_cols; returns column per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)   # owner[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost matching of a q x G cost matrix.

    Returns (prediction, ground truth) pairs sorted by ground truth.  When
    q >= G every ground truth is matched.  When q < G the matrix is padded
    with sentinel rows and the ground truths that land on padding stay
    unmatched.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.isfinite(c).all():
        raise NonFiniteCost("NonFiniteCost")
    q, g = c.shape
    if g == 0 or q == 0:
        return []
    if q < g:
        log.warning("%d predictions for %d targets; %d targets left unmatched", q, g, g - q)
        c = np.vstack([c, np.full((g - q, g), PAD_COST)])
    rows_for_gt = _assign_rows(c.T)
    return [(int(i), j) for j, i in enumerate(rows_for_gt) if i < q]


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost)
    return math.fsum(c[i, j] for i, j in pairs)


# ---------------------------------------------------------------- targets

@dataclass
class InstanceTargets:
    classes: np.ndarray     # G
    sp_masks: np.ndarray    # G x S, fraction of each superpoint's points in the instance
    boxes: np.ndarray       # G x 6, corners normalised to scene bounds
    sp_counts: np.ndarray   # S, points per superpoint

    @property
    def n(self) -> int:
        return self.classes.shape[0]


def build_targets(scene: PointCloudScene, instance: np.ndarray, semantic: np.ndarray,
                  tokens: SceneTokens) -> InstanceTargets:
    s = tokens.n_superpoints
    counts = np.bincount(scene.superpoint_id, minlength=s).astype(np.float64)
    ids = sorted(int(i) for i in np.unique(instance) if i >= 0)
    classes, masks, boxes = [], [], []
    for inst in ids:
        sel = instance == inst
        classes.append(int(semantic[sel][0]))
        masks.append(np.bincount(scene.superpoint_id[sel], minlength=s) / counts)
        b = box_from_points(scene.positions[sel])
        boxes.append(np.concatenate([(b.min_corner - tokens.lo) / tokens.extent,
                                     (b.max_corner - tokens.lo) / tokens.extent]))
    return InstanceTargets(np.array(classes, dtype=np.int64),
                           np.array(masks).reshape(len(ids), s),
                           np.array(boxes).reshape(len(ids), 6), counts)


# ---------------------------------------------------------------- costs

def pair_cost(cls_probs: np.ndarray, mask_probs: np.ndarray, gt_class: int, gt_mask: np.ndarray,
              lambda1: float = DEFAULT_LAMBDAS[0], lambda2: float = DEFAULT_LAMBDAS[1],
              eps: float = 1e-6) -> float:
    """lambda1 * CE(class) + lambda2 * (BCE + dice) for one prediction/target pair."""
    p = np.clip(mask_probs, _LOG_EPS, 1 - _LOG_EPS)
    t = np.asarray(gt_mask, dtype=np.float64)
    ce = -np.log(max(cls_probs[gt_class], _LOG_EPS))
    bce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    dice = 1.0 - (2.0 * (mask_probs * t).sum() + eps) / (mask_probs.sum() + t.sum() + eps)
    return float(lambda1 * ce + lambda2 * (bce + dice))


def cost_matrix(pred: InstancePrediction, targets: InstanceTargets,
                lambdas: Sequence[float] = DEFAULT_LAMBDAS, eps: float = 1e-6) -> np.ndarray:
    """q x G matrix of :func:`pair_cost` values, vectorised."""
    probs = pred.cls_probs()
    m = pred.mask_probs()
    t = targets.sp_masks
    ce = -np.log(np.maximum(probs[:, targets.classes], _LOG_EPS))
    p = np.clip(m, _LOG_EPS, 1 - _LOG_EPS)
    s = m.shape[1]
    bce = -(np.log(p) @ t.T + np.log(1 - p) @ (1 - t).T) / s
    dice = 1.0 - (2.0 * m @ t.T + eps) / (m.sum(1)[:, None] + t.sum(1)[None, :] + eps)
    return lambdas[0] * ce + lambdas[1] * (bce + dice)


# ---------------------------------------------------------------- losses

def soft_mask_iou(pred_bits: np.ndarray, target: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Point-level IoU between binary superpoint masks and fractional targets."""
    pb = pred_bits.astype(np.float64) * counts
    tc = target * counts
    inter = (pb * target).sum(axis=-1)
    union = pb.sum(axis=-1) + tc.sum(axis=-1) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 1.0)


def core_scale_target(pred_bits: np.ndarray, target: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return np.clip(soft_mask_iou(pred_bits, target, counts), 0.1, 1.0)


def block_loss(pred: InstancePrediction, targets: InstanceTargets, pairs, tokens: SceneTokens,
               lambdas: Sequence[float] = DEFAULT_LAMBDAS, mask_threshold: float = 0.5) -> DiffValue:
    l1, l2, l3 = lambdas
    q = pred.n_queries
    n_cls = pred.cls_logits.shape[1]
    cls_target = np.full(q, n_cls - 1, dtype=np.int64)
    rows = np.array([i for i, _ in pairs], dtype=np.int64)
    cols = np.array([j for _, j in pairs], dtype=np.int64)
    cls_target[rows] = targets.classes[cols]
    loss = T.mul(T.cross_entropy(pred.cls_logits, cls_target), l1)
    if rows.size == 0:
        return loss

    logits = T.take_rows(pred.mask_logits, rows)
    tmask = targets.sp_masks[cols]
    mask_term = T.add(T.binary_cross_entropy_with_logits(logits, tmask),
                      T.dice_loss(T.sigmoid(logits), tmask))
    loss = T.add(loss, T.mul(mask_term, l2))

    ext = tokens.extent
    norm_box = T.concat([T.div(T.sub(pred.box_min, tokens.lo), ext),
                         T.div(T.sub(pred.box_max, tokens.lo), ext)], axis=1)
    box_term = T.l1_loss(T.take_rows(norm_box, rows), targets.boxes[cols])
    bits = pred.mask_probs()[rows] > mask_threshold
    core_t = core_scale_target(bits, tmask, targets.sp_counts)[:, None]
    core_term = T.mse_loss(T.take_rows(pred.core_scale, rows), core_t)
    return T.add(loss, T.mul(T.add(box_term, core_term), l3))


def match(pred: InstancePrediction, targets: InstanceTargets,
          lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> list[tuple[int, int]]:
    if targets.n == 0:
        return []
    return hungarian(cost_matrix(pred, targets, lambdas))


def seg_loss(preds: Sequence[InstancePrediction], targets: InstanceTargets, assignments,
             tokens: SceneTokens, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
             mask_threshold: float = 0.5) -> DiffValue:
    """Mean over decoder stages of the per-stage matched loss."""
    if len(assignments) != len(preds):
        raise ValueError("one assignment per prediction stage is required")
    terms = [block_loss(p, targets, a, tokens, lambdas, mask_threshold)
             for p, a in zip(preds, assignments)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def total_loss(l_pl, l_seg) -> DiffValue:
    return T.add(l_pl, l_seg)
