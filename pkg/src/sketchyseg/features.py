"""Per-point descriptors and the small trainable point encoder standing in for a 3D U-Net."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .diffcore import DiffValue, LayerNorm, Linear, ParamSet, ShapeError
from .diffcore import ops as T
from .geometry import PointCloudScene

RAW_DIM = 10


@dataclass(frozen=True)
class FeatureConfig:
    raw_dim: int = RAW_DIM
    feat_dim: int = 32
    encoder_depth: int = 2

    def __post_init__(self):
        if self.feat_dim < 4:
            raise ValueError("feat_dim must be >= 4")
        if self.encoder_depth < 1:
            raise ValueError("encoder_depth must be >= 1")


def local_density(positions: np.ndarray, radius: float) -> np.ndarray:
    """Fraction of all points within ``radius`` of each point (self included)."""
    tree = cKDTree(positions)
    counts = tree.query_ball_point(positions, r=radius, return_length=True)
    return np.asarray(counts, dtype=np.float64) / positions.shape[0]


def raw_descriptor(scene: PointCloudScene) -> np.ndarray:
    """N x 10: centered/diagonal position, color, normal, local density."""
    pos = scene.positions
    diag = max(scene.diagonal, 1e-9)
    centered = (pos - pos.mean(axis=0)) / diag
    density = local_density(pos, 0.1 * diag)
    return np.column_stack([centered, scene.colors, scene.normals, density])


class PointEncoder:
    """Stacked linear+ReLU layers followed by an affine layer norm."""

    def __init__(self, params: ParamSet, cfg: FeatureConfig, rng: np.random.Generator,
                 prefix: str = "encoder"):
        self.cfg = cfg
        widths = [cfg.raw_dim] + [cfg.feat_dim] * cfg.encoder_depth
        self.layers = [Linear(params, f"{prefix}.{i}", a, b, rng)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.norm = LayerNorm(params, f"{prefix}.norm", cfg.feat_dim)

    def __call__(self, desc) -> DiffValue:
        x = T.as_value(desc)
        if x.ndim != 2 or x.shape[1] != self.cfg.raw_dim:
            raise ShapeError(f"encoder expects N x {self.cfg.raw_dim}, got {x.shape}")
        for layer in self.layers:
            x = T.relu(layer(x))
        return self.norm(x)


def encode(desc, encoder: PointEncoder) -> DiffValue:
    return encoder(desc)
