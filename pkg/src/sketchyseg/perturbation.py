"""Sketchy box generation: scaling, translation and yaw rotation of ground-truth boxes."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import OrientedBox, wrap_deg


class Preset(str, Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"


# which operations each preset composes, and the magnitude multiplier
_PRESET_OPS = {
    Preset.S0: ((), 0.0),
    Preset.S1: (("scale",), 1.0),
    Preset.S2: (("scale", "translate"), 1.0),
    Preset.S3: (("scale", "translate", "rotate"), 1.0),
    Preset.S4: (("scale", "translate", "rotate"), 2.0),
}


@dataclass(frozen=True)
class PerturbParams:
    alpha: float = 0.05
    beta: float = 0.05
    gamma_deg: float = 5.0
    preset: Preset = Preset.S0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "preset", Preset(self.preset))
        if self.alpha < 0 or self.beta < 0 or self.gamma_deg < 0:
            raise ValueError("perturbation magnitudes must be non-negative")

    @classmethod
    def for_preset(cls, preset, seed: int = 0, **kw) -> "PerturbParams":
        return cls(preset=Preset(preset), seed=seed, **kw)


def scale_box(b: OrientedBox, alpha: float) -> OrientedBox:
    e = b.extent
    return OrientedBox(b.min_corner - alpha * e, b.max_corner + alpha * e, b.yaw_deg)


def translate_box(b: OrientedBox, beta: float, direction) -> OrientedBox:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("translation direction must be a unit vector")
    shift = beta * b.extent * d
    return OrientedBox(b.min_corner + shift, b.max_corner + shift, b.yaw_deg)


def rotate_box(b: OrientedBox, gamma_deg: float) -> OrientedBox:
    return OrientedBox(b.min_corner, b.max_corner, wrap_deg(b.yaw_deg + gamma_deg))


@dataclass(frozen=True)
class BoxDraws:
    """Random choices for one box; recorded so compositions can be replayed."""
    scale_sign: float
    direction: np.ndarray
    rotate_sign: float


def box_draws(seed: int, index: int) -> BoxDraws:
    # per-box stream keyed on (seed, index): independent of processing order
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])
    scale_sign = 1.0 if rng.random() < 0.5 else -1.0
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    rotate_sign = 1.0 if rng.random() < 0.5 else -1.0
    return BoxDraws(scale_sign, d, rotate_sign)


def perturb_box(b: OrientedBox, params: PerturbParams, draws: BoxDraws) -> OrientedBox:
    ops, mult = _PRESET_OPS[params.preset]
    out = b
    if "scale" in ops:
        out = scale_box(out, draws.scale_sign * mult * params.alpha)
    if "translate" in ops:
        out = translate_box(out, mult * params.beta, draws.direction)
    if "rotate" in ops:
        out = rotate_box(out, draws.rotate_sign * mult * params.gamma_deg)
    return out


def apply_preset(gt_boxes: list[OrientedBox], params: PerturbParams) -> list[OrientedBox]:
    """Sketchy version of every box, in input order."""
    if params.preset is Preset.S0:
        return list(gt_boxes)
    return [perturb_box(b, params, box_draws(params.seed, i)) for i, b in enumerate(gt_boxes)]
