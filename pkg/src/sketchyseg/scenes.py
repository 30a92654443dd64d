"""Procedural indoor-like scenes: instances on a floor, sampled on their surfaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox, PointCloudScene, aabb_iou, box_from_points, voxel_superpoints

SHAPES = ("cuboid", "sphere", "L-shape")
GAP = 0.15           # clearance kept between boxes that must not intersect
MIN_PENETRATION = 0.06
ATTEMPTS_PER_COUNT = 300
PACKING = 0.35  # padded object footprint area / floor area
DEPTH_RANGE = (0.05, 0.15)  # penetration depth as a fraction of the smaller side

# per-class base colors; instances jitter around them
_PALETTE = np.array([
    [0.80, 0.25, 0.20], [0.20, 0.55, 0.85], [0.25, 0.75, 0.30], [0.85, 0.70, 0.15],
    [0.60, 0.30, 0.75], [0.15, 0.70, 0.70], [0.90, 0.45, 0.60], [0.45, 0.35, 0.20],
])


class PlacementFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneGenConfig:
    n_instances: tuple[int, int] = (3, 8)
    shapes: tuple[str, ...] = SHAPES
    points_per_instance: tuple[int, int] = (150, 400)
    background_points: int = 300
    overlap_fraction: float = 0.3
    color_noise: float = 0.03
    normal_noise: float = 0.05
    position_noise: float = 0.02
    n_classes: int = 3
    background_in_boxes: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_instances", "points_per_instance"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} range must be non-empty and positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}")


@dataclass
class GeneratedScene:
    scene: PointCloudScene
    gt_boxes: list[OrientedBox]
    box_classes: list[int]


# ---------------------------------------------------------------- surface sampling

def _sample_box_surface(rng, lo, hi, n):
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    face_p = np.repeat(areas, 2) / (2 * areas.sum())
    faces = rng.choice(6, size=n, p=face_p)
    pts = lo + rng.random((n, 3)) * ext
    normals = np.zeros((n, 3))
    axis = faces // 2
    side = faces % 2
    rows = np.arange(n)
    pts[rows, axis] = np.where(side == 0, lo[axis], hi[axis])
    normals[rows, axis] = np.where(side == 0, -1.0, 1.0)
    return pts, normals


def _sample_shape(rng, shape: str, footprint_lo: np.ndarray, size: np.ndarray, n: int):
    lo = np.array([footprint_lo[0], footprint_lo[1], 0.0])
    hi = lo + size
    if shape == "cuboid":
        return _sample_box_surface(rng, lo, hi, n)
    if shape == "sphere":
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        c = 0.5 * (lo + hi)
        return c + nrm * (0.5 * size), nrm
    # L-shape: low seat slab plus a tall back along the y-max side
    seat_hi = np.array([hi[0], hi[1], lo[2] + 0.45 * size[2]])
    back_lo = np.array([lo[0], hi[1] - 0.3 * size[1], lo[2]])
    pts, nrm = [], []
    while sum(len(p) for p in pts) < n:
        a_p, a_n = _sample_box_surface(rng, lo, seat_hi, n)
        b_p, b_n = _sample_box_surface(rng, back_lo, hi, n)
        a_keep = ~(((a_p > back_lo + 1e-9) & (a_p < hi - 1e-9)).all(axis=1))
        b_keep = ~(((b_p > lo + 1e-9) & (b_p < seat_hi - 1e-9)).all(axis=1))
        pts += [a_p[a_keep], b_p[b_keep]]
        nrm += [a_n[a_keep], b_n[b_keep]]
    p, q = np.concatenate(pts), np.concatenate(nrm)
    pick = rng.permutation(len(p))[:n]
    return p[pick], q[pick]


def _shape_size(rng, shape: str) -> np.ndarray:
    if shape == "sphere":
        return np.full(3, rng.uniform(0.35, 0.8))
    if shape == "L-shape":
        return np.array([rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8), rng.uniform(0.6, 1.0)])
    return np.array([rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.8)])


# ---------------------------------------------------------------- placement

def _footprints_intersect(a, b, margin: float) -> bool:
    """True if footprints (x0, y0, x1, y1) intersect once each is grown by ``margin``."""
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _overlap_count(cand, placed, taken=()) -> tuple[int, bool]:
    """(# of placed footprints penetrated by cand, all contacts are clean)."""
    count, clean = 0, True
    for k, fp in enumerate(placed):
        ox = min(cand[2], fp[2]) - max(cand[0], fp[0])
        oy = min(cand[3], fp[3]) - max(cand[1], fp[1])
        if ox > 0 and oy > 0:
            count += 1
            if min(ox, oy) < MIN_PENETRATION or k in taken:
                clean = False
        elif _footprints_intersect(cand, fp, GAP):
            clean = False
    return count, clean


def _overlap_requests(rng, n: int, overlap_fraction: float) -> set[int]:
    """Instances that must overlap one earlier, still unpaired instance.

    Pairs are exclusive, so at most n // 2 can be requested; odd positions
    always have an unpaired predecessor available.
    """
    wanted = int(round(overlap_fraction * n * (n - 1) / 2))
    slots = list(range(1, n, 2))
    k = min(wanted, len(slots))
    return {int(i) for i in rng.choice(slots, size=k, replace=False)} if k else set()


def _room_side(sizes: list[np.ndarray]) -> float:
    area = sum((s[0] + GAP) * (s[1] + GAP) for s in sizes)
    return float(max(np.sqrt(area / PACKING), max(max(s[0], s[1]) for s in sizes) + 2 * GAP))


def _place(rng, sizes: list[np.ndarray], overlap_fraction: float, room: float):
    placed: list[np.ndarray] = []
    taken: set[int] = set()
    requests = _overlap_requests(rng, len(sizes), overlap_fraction)
    for i, size in enumerate(sizes):
        for target in ((1, 0) if i in requests else (0,)):
            budget = ATTEMPTS_PER_COUNT if target else 1000
            fp, pk = None, -1
            free = [k for k in range(len(placed)) if k not in taken]
            if target and not free:
                continue
            for _ in range(budget):
                if target == 0:
                    x0 = rng.uniform(0, room - size[0])
                    y0 = rng.uniform(0, room - size[1])
                else:
                    pk = free[rng.integers(len(free))]
                    partner = placed[pk]
                    pc = 0.5 * (partner[:2] + partner[2:])
                    pe = partner[2:] - partner[:2]
                    axis = rng.integers(2)
                    sign = rng.choice([-1.0, 1.0])
                    depth = rng.uniform(*DEPTH_RANGE) * min(size[axis], pe[axis])
                    c = pc.copy()
                    c[axis] += sign * (0.5 * (pe[axis] + size[axis]) - depth)
                    c[1 - axis] += rng.uniform(-0.3, 0.3) * pe[1 - axis]
                    x0, y0 = c[0] - 0.5 * size[0], c[1] - 0.5 * size[1]
                cand = np.array([x0, y0, x0 + size[0], y0 + size[1]])
                count, clean = _overlap_count(cand, placed, taken)
                if count == target and clean:
                    fp = cand
                    break
            if fp is not None:
                if target:
                    taken.update({pk, i})
                placed.append(fp)
                break
        else:
            raise PlacementFailed("PlacementFailed")
    return placed


# ---------------------------------------------------------------- scene

def generate_scene(cfg: SceneGenConfig) -> GeneratedScene:
    rng = np.random.default_rng(cfg.seed)
    n_inst = int(rng.integers(cfg.n_instances[0], cfg.n_instances[1] + 1))
    classes = [int(rng.integers(cfg.n_classes)) for _ in range(n_inst)]
    shapes = [cfg.shapes[c % len(cfg.shapes)] for c in classes]
    sizes = [_shape_size(rng, s) for s in shapes]
    room = _room_side(sizes)
    footprints = _place(rng, sizes, cfg.overlap_fraction, room)

    pos, nrm, col, inst, sem = [], [], [], [], []
    for k, (shape, size, fp, c) in enumerate(zip(shapes, sizes, footprints, classes)):
        n = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
        p, q = _sample_shape(rng, shape, fp[:2], size, n)
        base = _PALETTE[c % len(_PALETTE)] + rng.uniform(-0.12, 0.12, size=3)
        pos.append(p + rng.normal(scale=cfg.position_noise, size=p.shape))
        nrm.append(q)
        col.append(np.tile(base, (n, 1)))
        inst.append(np.full(n, k))
        sem.append(np.full(n, c))
    boxes = [box_from_points(p) for p in pos]

    height = max(s[2] for s in sizes) + 0.2
    bg_n = cfg.background_points
    if bg_n:
        bg = []
        while sum(len(b) for b in bg) < bg_n:
            cand = rng.random((2 * bg_n, 3)) * np.array([room, room, height])
            if not cfg.background_in_boxes:
                inside = np.zeros(len(cand), dtype=bool)
                for b in boxes:
                    inside |= ((cand >= b.min_corner) & (cand <= b.max_corner)).all(axis=1)
                cand = cand[~inside]
            bg.append(cand)
        bgp = np.concatenate(bg)[:bg_n]
        q = rng.normal(size=(bg_n, 3))
        pos.append(bgp)
        nrm.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        col.append(np.tile(rng.uniform(0.35, 0.65, size=(bg_n, 1)), (1, 3)))
        inst.append(np.full(bg_n, -1))
        sem.append(np.full(bg_n, -1))

    positions = np.concatenate(pos)
    normals = np.concatenate(nrm) + rng.normal(scale=cfg.normal_noise, size=positions.shape)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = np.clip(np.concatenate(col) + rng.normal(scale=cfg.color_noise, size=positions.shape), 0, 1)
    diag = float(np.linalg.norm(positions.max(0) - positions.min(0)))
    scene = PointCloudScene(
        positions=positions, colors=colors, normals=normals,
        gt_instance=np.concatenate(inst), gt_semantic=np.concatenate(sem),
        superpoint_id=voxel_superpoints(positions, diag / 20.0),
        n_classes=cfg.n_classes, meta={"seed": cfg.seed},
    )
    return GeneratedScene(scene, boxes, classes)


def pairwise_overlap_fraction(boxes: list[OrientedBox]) -> float:
    n = len(boxes)
    if n < 2:
        return 0.0
    hits = sum(
        aabb_iou(boxes[i].min_corner, boxes[i].max_corner, boxes[j].min_corner, boxes[j].max_corner) > 0
        for i in range(n) for j in range(i + 1, n)
    )
    return hits / (n * (n - 1) / 2)


def toy_corpus(seed: int = 42, n_scenes: int = 12, **overrides) -> list[GeneratedScene]:
    """Deterministic list of scenes; scene k uses seed ``seed * 1000 + k``."""
    return [generate_scene(SceneGenConfig(seed=seed * 1000 + k, **overrides)) for k in range(n_scenes)]
