"""Training orchestration (joint and disjoint), evaluation and ablation sweeps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import AdamW, NonFiniteError, ParamSet, load_checkpoint, save_checkpoint
from .diffcore import ops as T
from .features import FeatureConfig, PointEncoder, raw_descriptor
from .geometry import InstanceMask, OrientedBox, PointCloudScene, superpoint_broadcast
from .labeler import (LabelerConfig, OverlapAssigner, PseudoLabels, build_context,
                      generate_pseudo_labels, labeler_loss, partition_points)
from .matching import DEFAULT_LAMBDAS, build_targets, match, seg_loss
from .metrics import EvalReport, evaluate, gt_instances
from .perturbation import PerturbParams, Preset, apply_preset
from .scenes import GeneratedScene
from .segmentator import (DetectedInstance, SceneTokens, SegConfig, Segmentator, postprocess,
                          scene_tokens)

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "l_pl", "l_seg", "l_total", "ap", "ap50", "ap25"]
SWEEP_AXES = ("preset", "q", "n_blocks", "lambda", "attention")


class DivergedTraining(RuntimeError):
    """Raised on a non-finite loss; carries the last good parameter state."""

    def __init__(self, message: str, state: dict[str, np.ndarray], iteration: int):
        super().__init__(message)
        self.state = state
        self.iteration = iteration


@dataclass
class TrainConfig:
    mode: str = "joint"
    lr: float = 2e-4
    weight_decay: float = 0.05
    iters: int = 2000
    q: int = 16
    n_blocks: int = 3
    lambda1: float = DEFAULT_LAMBDAS[0]
    lambda2: float = DEFAULT_LAMBDAS[1]
    lambda3: float = DEFAULT_LAMBDAS[2]
    preset: str = "S0"
    seed: int = 42
    feat_dim: int = 32
    attention: str = "full"
    tau_sim: float = 0.3
    use_filter: bool = True
    labeler_iters: int = 0          # disjoint phase 1 length; 0 means iters // 2
    resample_boxes: bool = False    # redraw sketchy boxes every epoch
    grad_accum: int = 1
    clip: float = 0.0               # global gradient norm clip, 0 disables
    augment: bool = True            # random vertical-axis rotation, mirror and color jitter
    pos_encoding: bool = True
    seed_boxes: bool = True
    box_prior: bool = True
    eval_every: int = 100
    schedule: str = "cosine"        # learning-rate decay: "constant" or "cosine"
    min_lr_frac: float = 0.05

    def __post_init__(self):
        if self.mode not in ("joint", "disjoint"):
            raise ValueError("mode must be 'joint' or 'disjoint'")
        if self.lr <= 0 or self.iters < 0:
            raise ValueError("lr must be positive and iters non-negative")
        if min(self.lambdas) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.grad_accum < 1 or self.q < 1:
            raise ValueError("grad_accum and q must be at least 1")
        Preset(self.preset)

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def seg_config(self, n_classes: int) -> SegConfig:
        return SegConfig(n_queries=self.q, n_blocks=self.n_blocks, dim=self.feat_dim,
                         n_classes=n_classes, attention=self.attention,
                         pos_encoding=self.pos_encoding, seed_boxes=self.seed_boxes,
                         box_prior=self.box_prior)

    def labeler_config(self) -> LabelerConfig:
        return LabelerConfig(tau_sim=self.tau_sim, use_filter=self.use_filter)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- model

class Model:
    """Encoder, overlap assigner and segmentator with separate parameter groups."""

    def __init__(self, cfg: TrainConfig, n_classes: int):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.n_classes = n_classes
        self.encoder_params = ParamSet()
        self.labeler_params = ParamSet()
        self.seg_params = ParamSet()
        self.encoder = PointEncoder(self.encoder_params, FeatureConfig(feat_dim=cfg.feat_dim), rng)
        self.assigner = OverlapAssigner(self.labeler_params, cfg.feat_dim, rng)
        self.seg_cfg = cfg.seg_config(n_classes)
        self.segmentator = Segmentator(self.seg_params, self.seg_cfg, rng)
        self.params = self.encoder_params.merged(self.labeler_params, self.seg_params)

    def state(self) -> dict[str, np.ndarray]:
        return self.params.state()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.params.load_state(state)


def save_model(model: Model, path) -> None:
    """Tensors go to the binary checkpoint; the config to a JSON sidecar."""
    path = Path(path)
    save_checkpoint(path, model.state())
    meta = {"train": asdict(model.cfg), "n_classes": model.n_classes}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_model(path) -> Model:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = Model(TrainConfig(**meta["train"]), meta["n_classes"])
    model.load_state(load_checkpoint(path))
    return model


# ---------------------------------------------------------------- data

@dataclass
class PreparedScene:
    scene: PointCloudScene
    gt_boxes: list[OrientedBox]
    box_classes: list[int]
    boxes: list[OrientedBox]         # sketchy annotation used for training
    desc: np.ndarray
    tokens: SceneTokens
    partition: object
    index: int = 0
    gts: list[InstanceMask] = field(default_factory=list)


def sketchy_boxes(gt_boxes: Sequence[OrientedBox], preset: str, seed: int) -> list[OrientedBox]:
    return apply_preset(list(gt_boxes), PerturbParams.for_preset(Preset(preset), seed=seed))


def prepare(gen: GeneratedScene, cfg: TrainConfig, index: int, epoch: int = 0) -> PreparedScene:
    scene = gen.scene
    boxes = sketchy_boxes(gen.gt_boxes, cfg.preset, _box_seed(cfg.seed, index, epoch))
    return PreparedScene(scene, list(gen.gt_boxes), list(gen.box_classes), boxes,
                         raw_descriptor(scene), scene_tokens(scene, cfg.q),
                         partition_points(scene, boxes), index, gt_instances(scene))


def _box_seed(seed: int, index: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, index, epoch]).generate_state(1)[0])


def _resample(ps: PreparedScene, cfg: TrainConfig, epoch: int) -> None:
    ps.boxes = sketchy_boxes(ps.gt_boxes, cfg.preset, _box_seed(cfg.seed, ps.index, epoch))
    ps.partition = partition_points(ps.scene, ps.boxes)


# ---------------------------------------------------------------- augmentation

@dataclass
class View:
    """Network-side view of a scene: descriptor, geometry and tokens."""
    desc: np.ndarray
    scene: PointCloudScene
    tokens: SceneTokens


def identity_view(ps: PreparedScene) -> View:
    return View(ps.desc, ps.scene, ps.tokens)


def augmented_view(ps: PreparedScene, rng: np.random.Generator, n_queries: int) -> View:
    """Rigid vertical-axis rotation plus optional mirror about the scene center.

    Point order and superpoints are untouched, so labels computed in the
    original frame stay valid for the view.
    """
    theta = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if rng.random() < 0.5:
        rot = rot @ np.diag([-1.0, 1.0, 1.0])
    sc = ps.scene
    center = sc.positions.mean(axis=0)
    pos = (sc.positions - center) @ rot.T + center
    nrm = sc.normals @ rot.T
    col = np.clip(sc.colors * rng.uniform(0.9, 1.1) + rng.normal(scale=0.02, size=3), 0.0, 1.0)
    view = PointCloudScene(pos, col, nrm, sc.gt_instance, sc.gt_semantic, sc.superpoint_id,
                           sc.n_classes, dict(sc.meta))
    desc = ps.desc.copy()
    desc[:, 0:3] = desc[:, 0:3] @ rot.T
    desc[:, 3:6] = col
    desc[:, 6:9] = nrm
    return View(desc, view, scene_tokens(view, n_queries))


# ---------------------------------------------------------------- steps

def _sp_feats(feats, scene: PointCloudScene):
    return T.segment_mean(feats, scene.superpoint_id, scene.n_superpoints)


def _seg_loss_for(model: Model, view: View, sp_feats, pseudo: PseudoLabels):
    cfg = model.cfg
    targets = build_targets(view.scene, pseudo.instance, pseudo.semantic, view.tokens)
    preds = model.segmentator(sp_feats, view.tokens)
    assignments = [match(p, targets, cfg.lambdas) for p in preds]
    return seg_loss(preds, targets, assignments, view.tokens, cfg.lambdas, model.seg_cfg.mask_threshold)


def _view(model: Model, ps: PreparedScene, rng: np.random.Generator) -> View:
    return augmented_view(ps, rng, model.cfg.q) if model.cfg.augment else identity_view(ps)


def joint_loss(model: Model, ps: PreparedScene, rng: np.random.Generator):
    """(L_pl, L_seg) for one scene with gradients reaching every parameter group."""
    lcfg = model.cfg.labeler_config()
    view = _view(model, ps, rng)
    feats = model.encoder(view.desc)
    ctx = build_context(ps.scene, ps.boxes, feats.data, lcfg, ps.partition)
    l_pl, _ = labeler_loss(ps.scene, ps.boxes, feats, model.assigner, lcfg, ctx, rng)
    pseudo = generate_pseudo_labels(ps.scene, ps.boxes, ps.box_classes, feats.data,
                                    model.assigner, lcfg, ctx)
    l_seg = _seg_loss_for(model, view, _sp_feats(feats, ps.scene), pseudo)
    return l_pl, l_seg


def detect(model: Model, ps: PreparedScene) -> list[tuple[InstanceMask, DetectedInstance]]:
    """Point masks of the final stage, paired with the raw detections."""
    feats = model.encoder(ps.desc)
    preds = model.segmentator(_sp_feats(feats, ps.scene), ps.tokens)
    out = []
    for det in postprocess(preds[-1], model.seg_cfg):
        bits = superpoint_broadcast(ps.scene, det.sp_mask.astype(np.float64)) > 0.5
        out.append((InstanceMask(bits, det.confidence, det.class_id), det))
    return out


def predict(model: Model, ps: PreparedScene) -> list[InstanceMask]:
    return [m for m, _ in detect(model, ps)]


def evaluate_model(model: Model, prepared: Sequence[PreparedScene]) -> EvalReport:
    samples = [(predict(model, ps), ps.gts) for ps in prepared]
    return evaluate(samples, [ps.scene for ps in prepared])


# ---------------------------------------------------------------- training loop

def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    frac = step / (total - 1)
    lo = cfg.lr * cfg.min_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    final_loss: float
    phase1_state: dict[str, np.ndarray] | None = None


class _Trainer:
    def __init__(self, model: Model, prepared: list[PreparedScene], held_out: list[PreparedScene],
                 log_rows: list[dict], log_path):
        self.model = model
        self.cfg = model.cfg
        self.prepared = prepared
        self.held_out = held_out
        self.rows = log_rows
        self.log_path = log_path
        self.rng = np.random.default_rng([self.cfg.seed, 7])
        self.it = 0
        self.last_good = model.state()

    def order(self):
        """Endless scene order, reshuffled every epoch."""
        epoch = 0
        while True:
            if epoch and self.cfg.resample_boxes:
                for ps in self.prepared:
                    _resample(ps, self.cfg, epoch)
            for k in self.rng.permutation(len(self.prepared)):
                yield self.prepared[k]
            epoch += 1

    def run(self, n_iters: int, params: ParamSet, loss_fn) -> float:
        cfg = self.cfg
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip or None)
        scenes = self.order()
        last = float("nan")
        for step in range(n_iters):
            opt.lr = learning_rate(cfg, step, n_iters)
            params.zero_grad()
            l_pl_sum = l_seg_sum = 0.0
            try:
                for _ in range(cfg.grad_accum):
                    l_pl, l_seg = loss_fn(next(scenes))
                    total = T.mul(T.add(l_pl, l_seg), 1.0 / cfg.grad_accum)
                    if not np.isfinite(total.data).all():
                        raise NonFiniteError("non-finite loss")
                    total.backward()
                    l_pl_sum += float(l_pl.data) / cfg.grad_accum
                    l_seg_sum += float(l_seg.data) / cfg.grad_accum
                if not all(np.isfinite(p.grad).all() for p in params.values()):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                self.model.load_state(self.last_good)
                raise DivergedTraining(f"DivergedTraining at iteration {self.it}: {exc}",
                                       self.last_good, self.it) from exc
            opt.step()
            self.it += 1
            last = l_pl_sum + l_seg_sum
            self.log(l_pl_sum, l_seg_sum)
            if self.it % cfg.eval_every == 0:
                self.last_good = self.model.state()
        return last

    def log(self, l_pl: float, l_seg: float) -> None:
        row = {"iter": self.it, "l_pl": l_pl, "l_seg": l_seg, "l_total": l_pl + l_seg,
               "ap": "", "ap50": "", "ap25": ""}
        if self.held_out and self.cfg.eval_every and self.it % self.cfg.eval_every == 0:
            rep = evaluate_model(self.model, self.held_out)
            row.update(ap=rep.ap, ap50=rep.ap50, ap25=rep.ap25)
            log.info("iter %d  loss %.4f  AP50 %.3f", self.it, l_pl + l_seg, rep.ap50)
        self.rows.append(row)
        if self.log_path is not None:
            new = not Path(self.log_path).exists() or self.it == 1
            with open(self.log_path, "w" if self.it == 1 else "a", newline="") as fh:
                w = csv.DictWriter(fh, LOG_HEADER)
                if new:
                    w.writeheader()
                w.writerow(row)


def train(scenes: Sequence[GeneratedScene], cfg: TrainConfig,
          held_out: Sequence[GeneratedScene] = (), log_path=None,
          checkpoint_path=None) -> TrainResult:
    """Train on ``scenes``; held-out scenes are evaluated every ``cfg.eval_every`` iterations."""
    if not scenes:
        raise ValueError("train needs at least one scene")
    n_classes = scenes[0].scene.n_classes
    model = Model(cfg, n_classes)
    prepared = [prepare(g, cfg, i) for i, g in enumerate(scenes)]
    held = [prepare(g, cfg, len(scenes) + i) for i, g in enumerate(held_out)]
    if log_path is not None:
        Path(log_path).unlink(missing_ok=True)
    trainer = _Trainer(model, prepared, held, [], log_path)
    phase1 = None
    if cfg.mode == "joint":
        last = trainer.run(cfg.iters, model.params, lambda ps: joint_loss(model, ps, trainer.rng))
    else:
        last = _train_disjoint(model, trainer)
        phase1 = trainer.phase1_state
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
    return TrainResult(model, trainer.rows, last, phase1)


def _train_disjoint(model: Model, trainer: _Trainer) -> float:
    cfg = model.cfg
    lcfg = cfg.labeler_config()
    n1 = cfg.labeler_iters or cfg.iters // 2
    front = model.encoder_params.merged(model.labeler_params)
    zero = T.constant(0.0)

    def phase1_loss(ps):
        feats = model.encoder(_view(model, ps, trainer.rng).desc)
        ctx = build_context(ps.scene, ps.boxes, feats.data, lcfg, ps.partition)
        l_pl, _ = labeler_loss(ps.scene, ps.boxes, feats, model.assigner, lcfg, ctx, trainer.rng)
        return l_pl, zero

    trainer.run(n1, front, phase1_loss)
    trainer.phase1_state = front.state()

    # frozen front end: pseudo labels are computed once per set of boxes
    cache = {}

    def phase2_loss(ps):
        hit = cache.get(ps.index)
        if hit is None or hit[0] is not ps.boxes:
            feats = model.encoder(ps.desc).data
            ctx = build_context(ps.scene, ps.boxes, feats, lcfg, ps.partition)
            hit = cache[ps.index] = (ps.boxes, generate_pseudo_labels(
                ps.scene, ps.boxes, ps.box_classes, feats, model.assigner, lcfg, ctx))
        view = _view(model, ps, trainer.rng)
        feats = T.constant(model.encoder(view.desc).data)
        return zero, _seg_loss_for(model, view, _sp_feats(feats, ps.scene), hit[1])

    return trainer.run(cfg.iters, model.seg_params, phase2_loss)


# ---------------------------------------------------------------- sweeps

def split_corpus(corpus: Sequence[GeneratedScene], n_train: int | None = None):
    """First ``n_train`` scenes train, the rest are held out (default 75/25)."""
    n = n_train if n_train is not None else max(1, int(round(len(corpus) * 0.75)))
    return list(corpus[:n]), list(corpus[n:])


def _apply_axis(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "preset":
        return replace(cfg, preset=str(getattr(value, "value", value)))
    if axis == "q":
        return replace(cfg, q=int(value))
    if axis == "n_blocks":
        return replace(cfg, n_blocks=int(value))
    if axis == "lambda":
        l1, l2, l3 = (float(v) for v in value)
        return replace(cfg, lambda1=l1, lambda2=l2, lambda3=l3)
    if axis == "attention":
        return replace(cfg, attention=str(value))
    raise ValueError(f"axis must be one of {SWEEP_AXES}")


def _value_label(axis: str, value) -> str:
    if axis == "lambda":
        return "/".join(f"{float(v):g}" for v in value)
    return str(getattr(value, "value", value))


SWEEP_HEADER = ["axis", "value", "ap", "ap50", "ap25", "box_ap50", "box_ap25", "train_ap50", "error"]


def sweep(axis: str, values: Sequence, base: TrainConfig, train_scenes: Sequence[GeneratedScene],
          held_out: Sequence[GeneratedScene], csv_path=None) -> list[dict]:
    """Train and evaluate once per value with shared seeds; failures become error rows."""
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    rows = []
    for value in values:
        row = {"axis": axis, "value": _value_label(axis, value)}
        try:
            cfg = _apply_axis(base, axis, value)
            res = train(train_scenes, cfg)
            rep = evaluate_model(res.model, [prepare(g, cfg, len(train_scenes) + i)
                                             for i, g in enumerate(held_out)])
            tr = evaluate_model(res.model, [prepare(g, cfg, i) for i, g in enumerate(train_scenes)])
            row.update(ap=rep.ap, ap50=rep.ap50, ap25=rep.ap25, box_ap50=rep.box_ap50,
                       box_ap25=rep.box_ap25, train_ap50=tr.ap50, error="")
        except Exception as exc:  # one bad cell must not sink the sweep
            log.error("sweep %s=%s failed: %s", axis, row["value"], exc)
            row.update({k: "" for k in SWEEP_HEADER[2:-1]}, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    if csv_path is not None:
        write_rows(csv_path, rows, SWEEP_HEADER)
    return rows


def write_rows(path, rows: Sequence[dict], header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(header))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
