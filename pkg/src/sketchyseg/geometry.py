"""Scene data model and box algebra shared by every stage of the pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOX_EPS = 1e-6  # per-side inflation for zero-extent boxes


class EmptyMask(ValueError):
    pass


def wrap_deg(angle: float) -> float:
    """Map an angle in degrees into (-180, 180]."""
    a = float(np.fmod(angle, 360.0))
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


@dataclass(frozen=True, eq=False)
class OrientedBox:
    min_corner: np.ndarray
    max_corner: np.ndarray
    yaw_deg: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "yaw_deg", float(self.yaw_deg))
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box corners must be finite")
        if (lo > hi).any():
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        if not -180.0 < self.yaw_deg <= 180.0:
            raise ValueError(f"yaw {self.yaw_deg} outside (-180, 180]")
        if np.prod(hi - lo) <= 0:
            raise ValueError("box has zero volume")

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def corners(self) -> np.ndarray:
        """The eight world-space corners, yaw applied about the center."""
        lo, hi = self.min_corner, self.max_corner
        pts = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
        return _rotate_z(pts - self.center, self.yaw_deg) + self.center

    def aabb(self) -> "OrientedBox":
        """Axis-aligned hull (identity for yaw 0)."""
        if self.yaw_deg == 0.0:
            return self
        c = self.corners()
        return OrientedBox(c.min(axis=0), c.max(axis=0), 0.0)

    def isclose(self, other: "OrientedBox", atol: float = 0.0) -> bool:
        return (np.allclose(self.min_corner, other.min_corner, rtol=0, atol=atol)
                and np.allclose(self.max_corner, other.max_corner, rtol=0, atol=atol)
                and abs(self.yaw_deg - other.yaw_deg) <= atol)

    def to_dict(self) -> dict:
        return {"min": self.min_corner.tolist(), "max": self.max_corner.tolist(), "yaw": self.yaw_deg}

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(d["min"], d["max"], d.get("yaw", 0.0))


def _rotate_z(pts: np.ndarray, deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T


def contains_points(box: OrientedBox, points: np.ndarray) -> np.ndarray:
    """Boolean membership of each row of ``points`` (closed intervals)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if box.yaw_deg != 0.0:
        c = box.center
        pts = _rotate_z(pts - c, -box.yaw_deg) + c
    return ((pts >= box.min_corner) & (pts <= box.max_corner)).all(axis=1)


def contains(box: OrientedBox, p) -> bool:
    return bool(contains_points(box, np.asarray(p, dtype=np.float64)[None, :])[0])


def aabb_iou(lo_a, hi_a, lo_b, hi_b) -> float:
    inter = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
    vi = float(np.prod(inter))
    union = float(np.prod(hi_a - lo_a) + np.prod(hi_b - lo_b)) - vi
    return vi / union if union > 0 else 0.0


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    """IoU of the axis-aligned hulls of two boxes."""
    ha, hb = a.aabb(), b.aabb()
    return aabb_iou(ha.min_corner, ha.max_corner, hb.min_corner, hb.max_corner)


def inflate_degenerate(lo: np.ndarray, hi: np.ndarray, eps: float = BOX_EPS):
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    flat = (hi - lo) <= 0
    lo[flat] -= eps
    hi[flat] += eps
    return lo, hi


@dataclass
class PointCloudScene:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    gt_instance: np.ndarray
    gt_semantic: np.ndarray
    superpoint_id: np.ndarray
    n_classes: int = 3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.gt_instance = np.asarray(self.gt_instance, dtype=np.int64).reshape(-1)
        self.gt_semantic = np.asarray(self.gt_semantic, dtype=np.int64).reshape(-1)
        self.superpoint_id = np.asarray(self.superpoint_id, dtype=np.int64).reshape(-1)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_superpoints(self) -> int:
        return int(self.superpoint_id.max()) + 1

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def instance_ids(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.gt_instance) if i >= 0)

    def validate(self) -> None:
        n = self.n_points
        if n < 1:
            raise ValueError("scene needs at least one point")
        for name in ("colors", "normals"):
            if getattr(self, name).shape != (n, 3):
                raise ValueError(f"{name} has wrong shape")
        for name in ("gt_instance", "gt_semantic", "superpoint_id"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} has wrong length")
        if not np.all(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) <= 1e-6):
            raise ValueError("normals must be unit length")
        if ((self.gt_instance < 0) != (self.gt_semantic < 0)).any():
            raise ValueError("background flags of instance and semantic labels disagree")
        for inst in self.instance_ids():
            if np.unique(self.gt_semantic[self.gt_instance == inst]).size != 1:
                raise ValueError(f"instance {inst} is not semantically pure")
        if self.gt_semantic.max() >= self.n_classes:
            raise ValueError("semantic id out of range")
        sp = self.superpoint_id
        if sp.min() < 0 or np.unique(sp).size != sp.max() + 1:
            raise ValueError("superpoint ids must cover 0..S-1 contiguously")


@dataclass
class InstanceMask:
    bits: np.ndarray
    confidence: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def box_from_points(points: np.ndarray) -> OrientedBox:
    pts = np.atleast_2d(points)
    if pts.shape[0] == 0:
        raise EmptyMask("EmptyMask")
    lo, hi = inflate_degenerate(pts.min(axis=0), pts.max(axis=0))
    return OrientedBox(lo, hi, 0.0)


def box_from_mask(scene: PointCloudScene, mask: InstanceMask | np.ndarray) -> OrientedBox:
    """Axis-aligned box spanning the points selected by ``mask``."""
    bits = mask.bits if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=bool)
    if bits.shape[0] != scene.n_points:
        raise ValueError("mask length differs from scene size")
    if not bits.any():
        raise EmptyMask("EmptyMask")
    return box_from_points(scene.positions[bits])


def superpoint_pool(scene: PointCloudScene, point_feats: np.ndarray) -> np.ndarray:
    """Mean of ``point_feats`` over each superpoint."""
    feats = np.asarray(point_feats, dtype=np.float64)
    if feats.shape[0] != scene.n_points:
        raise ValueError("feature rows must match point count")
    sp = scene.superpoint_id
    s = scene.n_superpoints
    out = np.zeros((s,) + feats.shape[1:])
    np.add.at(out, sp, feats)
    counts = np.bincount(sp, minlength=s).reshape((-1,) + (1,) * (feats.ndim - 1))
    return out / counts


def superpoint_broadcast(scene: PointCloudScene, sp_values: np.ndarray) -> np.ndarray:
    return np.asarray(sp_values)[scene.superpoint_id]


def voxel_superpoints(positions: np.ndarray, voxel: float) -> np.ndarray:
    """Contiguous superpoint ids from a regular voxel grid."""
    keys = np.floor((positions - positions.min(axis=0)) / max(voxel, 1e-12)).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1)
