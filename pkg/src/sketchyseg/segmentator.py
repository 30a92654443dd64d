"""Coarse-to-fine query decoder over superpoint features.

Queries first attend to every superpoint to give a coarse prediction.  Each
refinement block then attends to (1) the whole scene, (2) the reliable region
gated by mask probability times exp(IoU(predicted box, mask box)), and (3)
the core region inside the shrunk predicted box and the mask box, followed
by query self-attention and a feed-forward layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import MLP, DiffValue, LayerNorm, Linear, ParamSet, ShapeError
from .diffcore import ops as T
from .geometry import OrientedBox, PointCloudScene, aabb_iou, inflate_degenerate

ATTENTION_MODES = ("scene", "scene+coarse", "full")
MIN_BOX_FRAC = 1e-3  # smallest predicted box side, as a fraction of the scene extent
SEED_MIN_POINTS = 3
# fixed random frequencies (rad per metre) for the positional encoding, three octaves
_FREQS = np.concatenate([np.random.default_rng(20240613).normal(scale=sd, size=(8, 3))
                         for sd in (2.0, 4.0, 8.0)])
POS_DIM = 2 * _FREQS.shape[0]  # superpoints sparser than this are only used as seeds when needed


@dataclass
class SegConfig:
    n_queries: int = 16
    n_blocks: int = 3
    dim: int = 32
    n_classes: int = 3
    ffn_hidden: int = 64
    tau_gate: float = 0.5
    mask_threshold: float = 0.5
    attention: str = "full"
    iou_exponent: str = "iou"  # "inv_iou" uses exp(1/IoU) instead
    pos_encoding: bool = True
    seed_boxes: bool = True    # box centres are offsets from each query's seed superpoint
    box_prior: bool = True     # mask logits penalise superpoints outside the query's box

    def __post_init__(self):
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.iou_exponent not in ("iou", "inv_iou"):
            raise ValueError("iou_exponent must be 'iou' or 'inv_iou'")
        if self.n_queries < 1 or self.n_blocks < 0:
            raise ValueError("need n_queries >= 1 and n_blocks >= 0")


@dataclass
class SceneTokens:
    """Superpoint geometry the decoder needs besides features."""
    centroids: np.ndarray   # S x 3
    sp_min: np.ndarray      # S x 3, per-superpoint point bounds
    sp_max: np.ndarray
    lo: np.ndarray          # scene bounds
    hi: np.ndarray
    seeds: np.ndarray       # superpoint index feeding each query

    @property
    def n_superpoints(self) -> int:
        return self.centroids.shape[0]

    @property
    def extent(self) -> np.ndarray:
        return np.maximum(self.hi - self.lo, 1e-9)


def fourier_features(points: np.ndarray) -> np.ndarray:
    """cos/sin of fixed random projections; dot products approximate a distance kernel."""
    z = points @ _FREQS.T
    return np.concatenate([np.cos(z), np.sin(z)], axis=1) / np.sqrt(_FREQS.shape[0])


def farthest_point_order(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic farthest-point sampling; cycles when k exceeds len(points)."""
    n = points.shape[0]
    start = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    order = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    while len(order) < min(k, n):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    out = np.array(order, dtype=np.int64)
    return np.resize(out, k)


def scene_tokens(scene: PointCloudScene, n_queries: int) -> SceneTokens:
    sp = scene.superpoint_id
    s = scene.n_superpoints
    counts = np.bincount(sp, minlength=s)[:, None]
    cent = np.zeros((s, 3))
    np.add.at(cent, sp, scene.positions)
    cent /= counts
    sp_min = np.full((s, 3), np.inf)
    sp_max = np.full((s, 3), -np.inf)
    np.minimum.at(sp_min, sp, scene.positions)
    np.maximum.at(sp_max, sp, scene.positions)
    lo, hi = scene.bounds
    return SceneTokens(cent, sp_min, sp_max, lo, hi, seed_superpoints(cent, counts[:, 0], n_queries))


def seed_superpoints(centroids: np.ndarray, counts: np.ndarray, k: int) -> np.ndarray:
    """Farthest-point seeds drawn from dense superpoints first.

    Isolated clutter forms near-empty superpoints at the fringe of the scene,
    which plain farthest-point sampling would favour.
    """
    dense = np.flatnonzero(counts >= SEED_MIN_POINTS)
    if dense.size < k:
        return farthest_point_order(centroids, k)
    return dense[farthest_point_order(centroids[dense], k)]


@dataclass
class InstancePrediction:
    cls_logits: DiffValue    # q x (K+1), last column = no-object
    mask_logits: DiffValue   # q x S
    box_min: DiffValue       # q x 3, world coordinates
    box_max: DiffValue
    core_scale: DiffValue    # q x 1, in (0, 1)

    @property
    def n_queries(self) -> int:
        return self.mask_logits.shape[0]

    def cls_probs(self) -> np.ndarray:
        z = self.cls_logits.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def mask_probs(self) -> np.ndarray:
        return T._sigmoid(self.mask_logits.data)

    def boxes(self) -> list[OrientedBox]:
        return [OrientedBox(lo, hi) for lo, hi in zip(self.box_min.data, self.box_max.data)]

    def core_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        c = 0.5 * (self.box_min.data + self.box_max.data)
        half = 0.5 * (self.box_max.data - self.box_min.data) * self.core_scale.data
        return c - half, c + half


class CrossAttention:
    """Single-head attention with residual + layer norm around it."""

    def __init__(self, params: ParamSet, name: str, dim: int, rng: np.random.Generator):
        self.q = Linear(params, f"{name}.q", dim, dim, rng, bias=False)
        self.k = Linear(params, f"{name}.k", dim, dim, rng, bias=False)
        self.v = Linear(params, f"{name}.v", dim, dim, rng, bias=False)
        self.out = Linear(params, f"{name}.out", dim, dim, rng)
        self.norm = LayerNorm(params, f"{name}.norm", dim)

    def __call__(self, queries, keys, mask=None) -> DiffValue:
        att = T.scaled_dot_attention(self.q(queries), self.k(keys), self.v(keys), mask)
        return self.norm(T.add(queries, self.out(att)))


class FeedForward:
    def __init__(self, params: ParamSet, name: str, dim: int, hidden: int, rng: np.random.Generator):
        self.mlp = MLP(params, f"{name}.mlp", [dim, hidden, dim], rng)
        self.norm = LayerNorm(params, f"{name}.norm", dim)

    def __call__(self, x) -> DiffValue:
        return self.norm(T.add(x, self.mlp(x)))


class Heads:
    """Class, mask, box and core-scale heads shared by all decoder stages."""

    def __init__(self, params: ParamSet, cfg: SegConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cls = Linear(params, "seg.head.cls", d, cfg.n_classes + 1, rng)
        self.mask_embed = MLP(params, "seg.head.mask_embed", [d, d, d], rng)
        self.mask_feat = Linear(params, "seg.head.mask_feat", d, d, rng)
        self.box = Linear(params, "seg.head.box", d, 6, rng)
        self.core = Linear(params, "seg.head.core", d, 1, rng)
        self.cfg = cfg
        if cfg.box_prior:
            self.prior_gain = params.add("seg.head.box_prior", np.full((1, 1), 4.0))

    def __call__(self, queries, feats, tokens: SceneTokens) -> InstancePrediction:
        mask_logits = T.matmul(self.mask_embed(queries), T.transpose(self.mask_feat(feats)))
        u = T.sigmoid(self.box(queries))
        ext = tokens.extent
        if self.cfg.seed_boxes:
            anchor = tokens.centroids[tokens.seeds]
            center = T.add(anchor, T.mul(T.sub(T.take_cols(u, [0, 1, 2]), 0.5), ext))
        else:
            center = T.add(tokens.lo, T.mul(T.take_cols(u, [0, 1, 2]), ext))
        size = T.add(T.mul(T.take_cols(u, [3, 4, 5]), ext), MIN_BOX_FRAC * ext)
        half = T.mul(size, 0.5)
        if self.cfg.box_prior:
            outside = box_outside_distance(tokens.centroids, center.data, half.data)
            mask_logits = T.sub(mask_logits, T.mul(outside, self.prior_gain))
        return InstancePrediction(
            cls_logits=self.cls(queries),
            mask_logits=mask_logits,
            box_min=T.sub(center, half),
            box_max=T.add(center, half),
            core_scale=T.sigmoid(self.core(queries)),
        )


def box_outside_distance(points: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    """q x S sum over axes of how far each point lies outside each box, in half-sizes."""
    gap = np.abs(points[None, :, :] - center[:, None, :]) - half[:, None, :]
    return (np.maximum(gap, 0.0) / np.maximum(half[:, None, :], 1e-9)).sum(axis=2)


# ---------------------------------------------------------------- region gates

def mask_boxes(mask_bits: np.ndarray, tokens: SceneTokens):
    """Per-query box spanning the points of the selected superpoints (None if empty)."""
    out = []
    for bits in mask_bits:
        if not bits.any():
            out.append(None)
        else:
            out.append(inflate_degenerate(tokens.sp_min[bits].min(axis=0), tokens.sp_max[bits].max(axis=0)))
    return out


def _fallback(sel: np.ndarray, weight: np.ndarray) -> np.ndarray:
    empty = ~sel.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        sel[rows, np.argmax(weight[rows], axis=1)] = True
    return sel


def reliable_region_weights(m: np.ndarray, pred_boxes, mboxes, exponent: str = "iou") -> np.ndarray:
    """Mask probability times exp(IoU of predicted box and mask box), per query and superpoint."""
    w = np.empty_like(m)
    for i, (pb, mb) in enumerate(zip(pred_boxes, mboxes)):
        iou = 0.0 if mb is None else aabb_iou(pb[0], pb[1], mb[0], mb[1])
        if exponent == "iou":
            gain = np.exp(iou)
        else:
            gain = np.exp(1.0 / iou) if iou > 1e-3 else np.exp(1e3)
        w[i] = m[i] * gain
    return w


def reliable_region_mask(m, pred_boxes, mboxes, tau_gate: float = 0.5, exponent: str = "iou") -> np.ndarray:
    w = reliable_region_weights(m, pred_boxes, mboxes, exponent)
    return _fallback(w > tau_gate, w)


def core_region_indicator(centroids: np.ndarray, core_boxes, mboxes) -> np.ndarray:
    """True where a superpoint centroid lies in both the core box and the mask box."""
    ind = np.zeros((len(core_boxes), centroids.shape[0]), dtype=bool)
    for i, (cb, mb) in enumerate(zip(core_boxes, mboxes)):
        if mb is None:
            continue
        lo = np.maximum(cb[0], mb[0])
        hi = np.minimum(cb[1], mb[1])
        if (lo > hi).any():
            continue
        ind[i] = ((centroids >= lo) & (centroids <= hi)).all(axis=1)
    return ind


def core_region_mask(m, centroids, core_boxes, mboxes, tau_gate: float = 0.5) -> np.ndarray:
    w = m * core_region_indicator(centroids, core_boxes, mboxes)
    # rows with nothing in the core fall back to their strongest mask superpoint
    fallback_w = np.where(w.max(axis=1, keepdims=True) > 0, w, m)
    return _fallback(w > tau_gate, fallback_w)


def reliable_region_features(feats: np.ndarray, m: np.ndarray, pred_box, mask_box,
                             tau_gate: float = 0.5, exponent: str = "iou") -> np.ndarray:
    """Rows of ``feats`` selected by the reliable-region gate for one query."""
    sel = reliable_region_mask(m[None, :], [pred_box], [mask_box], tau_gate, exponent)[0]
    return feats[sel]


def core_region_features(feats: np.ndarray, m: np.ndarray, centroids: np.ndarray, core_box,
                         mask_box, tau_gate: float = 0.5) -> np.ndarray:
    sel = core_region_mask(m[None, :], centroids, [core_box], [mask_box], tau_gate)[0]
    return feats[sel]


def region_masks(pred: InstancePrediction, tokens: SceneTokens, cfg: SegConfig):
    m = pred.mask_probs()
    mboxes = mask_boxes(m > cfg.mask_threshold, tokens)
    pboxes = list(zip(pred.box_min.data, pred.box_max.data))
    clo, chi = pred.core_boxes()
    rel = reliable_region_mask(m, pboxes, mboxes, cfg.tau_gate, cfg.iou_exponent)
    core = core_region_mask(m, tokens.centroids, list(zip(clo, chi)), mboxes, cfg.tau_gate)
    return rel, core


# ---------------------------------------------------------------- decoder

class MultiLevelBlock:
    def __init__(self, params: ParamSet, name: str, cfg: SegConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.scene_att = CrossAttention(params, f"{name}.scene", d, rng)
        self.rel_att = CrossAttention(params, f"{name}.reliable", d, rng)
        self.core_att = CrossAttention(params, f"{name}.core", d, rng)
        self.self_att = CrossAttention(params, f"{name}.self", d, rng)
        self.ffn = FeedForward(params, f"{name}.ffn", d, cfg.ffn_hidden, rng)

    def __call__(self, queries, feats, prev: InstancePrediction, tokens: SceneTokens,
                 heads: Heads):
        cfg = self.cfg
        x = self.scene_att(queries, feats)
        if cfg.attention != "scene":
            rel, core = region_masks(prev, tokens, cfg)
            x = self.rel_att(x, feats, rel)
            if cfg.attention == "full":
                x = self.core_att(x, feats, core)
        x = self.self_att(x, x)
        x = self.ffn(x)
        return x, heads(x, feats, tokens)


class Segmentator:
    def __init__(self, params: ParamSet, cfg: SegConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.query_embed = params.add("seg.query_embed", rng.normal(scale=0.1, size=(cfg.n_queries, d)))
        self.seed_proj = Linear(params, "seg.seed_proj", d, d, rng)
        self.pos_proj = Linear(params, "seg.pos_proj", POS_DIM, d, rng)
        self.coarse_att = CrossAttention(params, "seg.coarse", d, rng)
        self.blocks = [MultiLevelBlock(params, f"seg.block{i}", cfg, rng) for i in range(cfg.n_blocks)]
        self.heads = Heads(params, cfg, rng)

    def init_queries(self, feats, tokens: SceneTokens) -> DiffValue:
        if tokens.seeds.shape[0] != self.cfg.n_queries:
            raise ShapeError("scene tokens were built for a different query count")
        return T.add(self.query_embed, self.seed_proj(T.take_rows(feats, tokens.seeds)))

    def coarse_predict(self, feats, tokens: SceneTokens):
        """Queries, prediction and position-augmented keys after the coarse stage."""
        feats = T.as_value(feats)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.dim:
            raise ShapeError(f"features must be S x {self.cfg.dim}, got {feats.shape}")
        if feats.shape[0] != tokens.n_superpoints:
            raise ShapeError("feature rows differ from superpoint count")
        feats = self.with_position(feats, tokens)
        q = self.coarse_att(self.init_queries(feats, tokens), feats)
        return q, self.heads(q, feats, tokens), feats

    def with_position(self, feats, tokens: SceneTokens) -> DiffValue:
        if not self.cfg.pos_encoding:
            return feats
        center = 0.5 * (tokens.lo + tokens.hi)
        return T.add(feats, self.pos_proj(fourier_features(tokens.centroids - center)))

    def __call__(self, feats, tokens: SceneTokens, n_blocks: int | None = None) -> list[InstancePrediction]:
        """Coarse prediction followed by one prediction per refinement block."""
        n = self.cfg.n_blocks if n_blocks is None else n_blocks
        if n > len(self.blocks):
            raise ValueError(f"only {len(self.blocks)} blocks are built")
        q, pred, feats = self.coarse_predict(feats, tokens)
        preds = [pred]
        for block in self.blocks[:n]:
            q, pred = block(q, feats, pred, tokens, self.heads)
            preds.append(pred)
        return preds


def segment(feats, tokens: SceneTokens, model: Segmentator, n_blocks: int | None = None):
    return model(feats, tokens, n_blocks)


@dataclass
class DetectedInstance:
    query: int
    class_id: int
    confidence: float
    sp_mask: np.ndarray       # superpoint bits
    box: OrientedBox
    core_scale: float


def postprocess(pred: InstancePrediction, cfg: SegConfig) -> list[DetectedInstance]:
    """Keep queries that are not no-object and whose mask is non-empty."""
    probs = pred.cls_probs()
    m = pred.mask_probs()
    bits = m > cfg.mask_threshold
    boxes = pred.boxes()
    out = []
    for i in range(pred.n_queries):
        if probs[i, -1] >= 0.5 or not bits[i].any():
            continue
        k = int(np.argmax(probs[i, :-1]))
        score = float(probs[i, k] * m[i][bits[i]].mean())
        out.append(DetectedInstance(i, k, min(max(score, 0.0), 1.0), bits[i].copy(), boxes[i],
                                    float(pred.core_scale.data[i, 0])))
    return out
