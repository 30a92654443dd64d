"""Adaptive box-to-point pseudo labeling.

Points are split by box membership into background, single-box and
overlap points.  Single-box points are filtered with a feature/position
similarity to the box; overlap points are assigned by a small learned scorer
trained on the reliable (single-box, filtered) points of the two boxes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .diffcore import MLP, DiffValue, ParamSet, ShapeError
from .diffcore import ops as T
from .geometry import OrientedBox, PointCloudScene, contains_points

log = logging.getLogger(__name__)

DEFAULT_TAU_SIM = 0.3


class DegenerateFeature(ValueError):
    pass


class NoReliablePoints(ValueError):
    pass


class Source(IntEnum):
    OUTSIDE = 0
    SINGLE_FILTERED = 1
    OVERLAP_ASSIGNED = 2


@dataclass
class Partition:
    background_ids: np.ndarray
    single_ids: dict[int, np.ndarray]
    overlap_ids: dict[tuple[int, int], np.ndarray]
    n_points: int = 0

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.overlap_ids)


@dataclass
class PseudoLabels:
    instance: np.ndarray
    semantic: np.ndarray
    source: np.ndarray
    fallback_pairs: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, n_boxes: int) -> None:
        if ((self.instance < 0) != (self.semantic < 0)).any():
            raise ValueError("instance/semantic background flags disagree")
        if self.instance.max(initial=-1) >= n_boxes:
            raise ValueError("pseudo instance id does not name a box")


def box_centers(boxes: Sequence[OrientedBox]) -> np.ndarray:
    return np.array([b.center for b in boxes])


def membership(scene: PointCloudScene, boxes: Sequence[OrientedBox]) -> np.ndarray:
    """N x B boolean containment matrix."""
    return np.column_stack([contains_points(b, scene.positions) for b in boxes])


def partition_points(scene: PointCloudScene, boxes: Sequence[OrientedBox]) -> Partition:
    if len(boxes) == 0:
        raise ValueError("partition needs at least one box")
    inside = membership(scene, boxes)
    count = inside.sum(axis=1)
    background = np.flatnonzero(count == 0)
    single = {b: np.flatnonzero((count == 1) & inside[:, b]) for b in range(len(boxes))}

    multi = np.flatnonzero(count >= 2)
    centers = box_centers(boxes)
    pair_of = np.empty((multi.size, 2), dtype=np.int64)
    for row, p in enumerate(multi):
        cand = np.flatnonzero(inside[p])
        if cand.size > 2:
            d = np.linalg.norm(centers[cand] - scene.positions[p], axis=1)
            cand = np.sort(cand[np.argsort(d, kind="stable")[:2]])
        pair_of[row] = cand
    overlap: dict[tuple[int, int], np.ndarray] = {}
    for pair in sorted({tuple(r) for r in pair_of.tolist()}):
        sel = (pair_of[:, 0] == pair[0]) & (pair_of[:, 1] == pair[1])
        overlap[pair] = multi[sel]
    return Partition(background, single, overlap, scene.n_points)


def point_box_similarity(f_p, f_b, c_p, c_b) -> float:
    """cos(f_p, f_b) * exp(-|c_b - c_p|); coordinates already normalised."""
    f_p, f_b = np.asarray(f_p, float), np.asarray(f_b, float)
    np_, nb = np.linalg.norm(f_p), np.linalg.norm(f_b)
    if np_ == 0 or nb == 0:
        raise DegenerateFeature("DegenerateFeature")
    dist = np.linalg.norm(np.asarray(c_b, float) - np.asarray(c_p, float))
    return float(f_p @ f_b / (np_ * nb) * np.exp(-dist))


def similarities(feats: np.ndarray, coords: np.ndarray, f_b: np.ndarray, c_b: np.ndarray) -> np.ndarray:
    """Vectorised :func:`point_box_similarity` over rows."""
    fn = np.linalg.norm(feats, axis=1)
    bn = np.linalg.norm(f_b)
    if bn == 0 or (fn == 0).any():
        raise DegenerateFeature("DegenerateFeature")
    cos = feats @ f_b / (fn * bn)
    return cos * np.exp(-np.linalg.norm(coords - c_b, axis=1))


def filter_single_box(scene: PointCloudScene, box: OrientedBox, feats: np.ndarray,
                      tau_sim: float = DEFAULT_TAU_SIM, ids: np.ndarray | None = None) -> np.ndarray:
    """Ids among ``ids`` (default: every point inside ``box``) similar enough to the box.

    The box feature and center are the means over the candidate points.  The
    most similar point is always kept.
    """
    if ids is None:
        ids = np.flatnonzero(contains_points(box, scene.positions))
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids
    diag = max(scene.diagonal, 1e-9)
    f = np.asarray(feats)[ids]
    c = scene.positions[ids] / diag
    s = similarities(f, c, f.mean(axis=0), c.mean(axis=0))
    keep = s >= tau_sim
    keep[int(np.argmax(s))] = True
    return ids[keep]


def reliable_split(partition: Partition, pair: tuple[int, int],
                   kept: dict[int, np.ndarray] | None = None):
    """(B1_rel, B1_un, B2_rel, B2_un) for an overlapping pair.

    ``kept`` maps each box to its filtered single-box points; without it the
    unfiltered single-box points are used.  Both unreliable sets are the
    overlap points shared by the pair.
    """
    pair = tuple(sorted(pair))
    un = partition.overlap_ids.get(pair, np.empty(0, dtype=np.int64))
    src = kept if kept is not None else partition.single_ids
    rel1, rel2 = src[pair[0]], src[pair[1]]
    if rel1.size == 0 or rel2.size == 0:
        raise NoReliablePoints(f"NoReliablePoints for pair {pair}")
    return rel1, un, rel2, un


class OverlapAssigner:
    """Shared scorer over [f_p ; f_p - f_box]; softmax over the two boxes' scores."""

    def __init__(self, params: ParamSet, feat_dim: int, rng: np.random.Generator,
                 hidden: int = 64, zero_last: bool = False, prefix: str = "labeler"):
        self.feat_dim = feat_dim
        self.scorer = MLP(params, f"{prefix}.scorer", [2 * feat_dim, hidden, hidden, 1], rng,
                          zero_last=zero_last)

    def scores(self, f_p, f_box) -> DiffValue:
        f_p = T.as_value(f_p)
        return self.scorer(T.concat([f_p, T.sub(f_p, f_box)], axis=1))

    def __call__(self, f_p, f_b1, f_b2) -> DiffValue:
        """n x 2 logits for (box1, box2)."""
        f_p = T.as_value(f_p)
        if f_p.ndim != 2 or f_p.shape[1] != self.feat_dim:
            raise ShapeError(f"assigner expects n x {self.feat_dim}, got {f_p.shape}")
        if T.as_value(f_b1).shape != f_p.shape or T.as_value(f_b2).shape != f_p.shape:
            raise ShapeError("box feature rows must match point rows")
        # two same-shaped passes keep box swapping exact to the bit
        return T.concat([self.scores(f_p, f_b1), self.scores(f_p, f_b2)], axis=1)


def assign_overlap(f_p, f_b1_rel, f_b2_rel, assigner: OverlapAssigner) -> DiffValue:
    """2-way assignment probabilities for each row of ``f_p``."""
    f_p = T.as_value(f_p)
    squeeze = f_p.ndim == 1
    if squeeze:
        f_p = T.reshape(f_p, (1, -1))
    n = f_p.shape[0]

    def rows(f):
        f = T.as_value(f)
        if f.ndim == 1:
            f = T.reshape(f, (1, -1))
        return T.take_rows(f, np.zeros(n, dtype=np.int64)) if f.shape[0] == 1 and n > 1 else f

    return T.softmax(assigner(f_p, rows(f_b1_rel), rows(f_b2_rel)), axis=1)


@dataclass
class LabelerConfig:
    tau_sim: float = DEFAULT_TAU_SIM
    use_filter: bool = True
    hidden: int = 64
    max_samples_per_box: int = 64


@dataclass
class LabelContext:
    """Per-scene quantities derived from boxes and current features."""
    partition: Partition
    kept: dict[int, np.ndarray]
    valid_pairs: list[tuple[int, int]]
    fallback_pairs: list[tuple[int, int]]


def build_context(scene: PointCloudScene, boxes: Sequence[OrientedBox], feats: np.ndarray,
                  cfg: LabelerConfig, partition: Partition | None = None) -> LabelContext:
    part = partition if partition is not None else partition_points(scene, boxes)
    kept: dict[int, np.ndarray] = {}
    for b, ids in part.single_ids.items():
        if cfg.use_filter and ids.size:
            kept[b] = filter_single_box(scene, boxes[b], feats, cfg.tau_sim, ids=ids)
        else:
            kept[b] = ids
    valid, fallback = [], []
    for pair in part.pairs():
        try:
            reliable_split(part, pair, kept)
            valid.append(pair)
        except NoReliablePoints:
            fallback.append(pair)
    return LabelContext(part, kept, valid, fallback)


def labeler_loss(scene: PointCloudScene, boxes: Sequence[OrientedBox], feats,
                 assigner: OverlapAssigner, cfg: LabelerConfig | None = None,
                 ctx: LabelContext | None = None, rng: np.random.Generator | None = None
                 ) -> tuple[DiffValue, str | None]:
    """Cross-entropy of the assigner on reliable points of every overlapping pair.

    Returns ``(loss, flag)``; ``flag`` is ``"NoOverlapLoss"`` (and the loss 0)
    when no pair has reliable points on both sides.
    """
    cfg = cfg or LabelerConfig()
    feats = T.as_value(feats)
    if ctx is None:
        ctx = build_context(scene, boxes, feats.data, cfg)
    if not ctx.valid_pairs:
        return T.constant(0.0), "NoOverlapLoss"
    rng = rng or np.random.default_rng(0)

    n_boxes = len(boxes)
    rel_rows = [ctx.kept[b] for b in range(n_boxes)]
    box_feats = T.concat(
        [T.mean(T.take_rows(feats, ids), axis=0, keepdims=True) if ids.size
         else T.constant(np.zeros((1, feats.shape[1]))) for ids in rel_rows], axis=0)

    pts, b1, b2, tgt = [], [], [], []
    for i, j in ctx.valid_pairs:
        for owner, label in ((i, 0), (j, 1)):
            ids = ctx.kept[owner]
            if ids.size > cfg.max_samples_per_box:
                ids = np.sort(rng.choice(ids, cfg.max_samples_per_box, replace=False))
            pts.append(ids)
            b1.append(np.full(ids.size, i))
            b2.append(np.full(ids.size, j))
            tgt.append(np.full(ids.size, label))
    pts, b1, b2, tgt = map(np.concatenate, (pts, b1, b2, tgt))
    logits = assigner(T.take_rows(feats, pts), T.take_rows(box_feats, b1), T.take_rows(box_feats, b2))
    return T.cross_entropy(logits, tgt), None


def _nearest(centers: np.ndarray, pts: np.ndarray, pair: tuple[int, int]) -> np.ndarray:
    d0 = np.linalg.norm(pts - centers[pair[0]], axis=1)
    d1 = np.linalg.norm(pts - centers[pair[1]], axis=1)
    return np.where(d1 < d0, pair[1], pair[0])


def generate_pseudo_labels(scene: PointCloudScene, boxes: Sequence[OrientedBox],
                           box_classes: Sequence[int], feats: np.ndarray,
                           assigner: OverlapAssigner | None, cfg: LabelerConfig | None = None,
                           ctx: LabelContext | None = None) -> PseudoLabels:
    cfg = cfg or LabelerConfig()
    feats = np.asarray(feats.data if isinstance(feats, DiffValue) else feats)
    if ctx is None:
        ctx = build_context(scene, boxes, feats, cfg)
    n = scene.n_points
    inst = np.full(n, -1, dtype=np.int64)
    src = np.full(n, int(Source.OUTSIDE), dtype=np.int64)
    for b, ids in ctx.kept.items():
        inst[ids] = b
        src[ids] = int(Source.SINGLE_FILTERED)

    centers = box_centers(boxes)
    for pair in ctx.partition.pairs():
        ids = ctx.partition.overlap_ids[pair]
        pts = scene.positions[ids]
        if pair in ctx.fallback_pairs or assigner is None:
            if assigner is not None:
                log.debug("pair %s has no reliable points; nearest-center fallback", pair)
            owner = _nearest(centers, pts, pair)
        else:
            f1 = feats[ctx.kept[pair[0]]].mean(axis=0)
            f2 = feats[ctx.kept[pair[1]]].mean(axis=0)
            probs = assign_overlap(feats[ids], f1, f2, assigner).data
            owner = np.where(probs[:, 1] > probs[:, 0], pair[1], pair[0])
            tie = probs[:, 0] == probs[:, 1]
            owner[tie] = _nearest(centers, pts[tie], pair)
        inst[ids] = owner
        src[ids] = int(Source.OVERLAP_ASSIGNED)

    classes = np.asarray(box_classes, dtype=np.int64)
    sem = np.where(inst >= 0, classes[np.maximum(inst, 0)], -1)
    return PseudoLabels(inst, sem, src, list(ctx.fallback_pairs))
