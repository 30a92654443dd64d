import csv

import numpy as np
import pytest

from sketchyseg import training
from sketchyseg.diffcore import DiffValue, load_checkpoint
from sketchyseg.geometry import contains_points
from sketchyseg.scenes import (PlacementFailed, SceneGenConfig, generate_scene, pairwise_overlap_fraction,
                               toy_corpus)
from sketchyseg.training import (SWEEP_HEADER, DivergedTraining, Model, TrainConfig, learning_rate, load_model,
                                 prepare, split_corpus, sweep, train)

SMALL = dict(n_instances=(2, 3), points_per_instance=(40, 60), background_points=40)


def tiny_cfg(**kw):
    base = dict(iters=4, q=4, n_blocks=1, feat_dim=8, eval_every=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return toy_corpus(1, 3, **SMALL)


# ---------------------------------------------------------------- scenes

def test_same_seed_same_scene():
    a, b = generate_scene(SceneGenConfig(seed=9)), generate_scene(SceneGenConfig(seed=9))
    for f in ("positions", "colors", "normals", "gt_instance", "gt_semantic", "superpoint_id"):
        assert np.array_equal(getattr(a.scene, f), getattr(b.scene, f))
    assert not np.array_equal(a.scene.positions[:10], generate_scene(SceneGenConfig(seed=10)).scene.positions[:10])


def test_single_instance_without_background():
    g = generate_scene(SceneGenConfig(n_instances=(1, 1), background_points=0, seed=3))
    assert set(np.unique(g.scene.gt_instance)) == {0}
    assert len(g.gt_boxes) == 1 and contains_points(g.gt_boxes[0], g.scene.positions).all()


def test_zero_overlap_gives_disjoint_boxes():
    for s in range(20):
        assert pairwise_overlap_fraction(generate_scene(SceneGenConfig(overlap_fraction=0.0, seed=s)).gt_boxes) == 0


def test_overlap_fraction_is_approximately_reached():
    got = [pairwise_overlap_fraction(generate_scene(SceneGenConfig(seed=s)).gt_boxes) for s in range(50)]
    assert abs(np.mean(got) - 0.3) <= 0.15


def test_background_kept_out_of_boxes_on_request():
    g = generate_scene(SceneGenConfig(background_in_boxes=False, seed=4))
    bg = g.scene.positions[g.scene.gt_instance < 0]
    for b in g.gt_boxes:
        assert not contains_points(b, bg).any()


def test_gt_boxes_hold_their_instances():
    g = generate_scene(SceneGenConfig(seed=5))
    for k, b in enumerate(g.gt_boxes):
        assert contains_points(b, g.scene.positions[g.scene.gt_instance == k]).all()
    assert all(0 <= c < 3 for c in g.box_classes)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneGenConfig(overlap_fraction=1.5)
    with pytest.raises(ValueError):
        SceneGenConfig(n_instances=(4, 2))
    with pytest.raises(ValueError):
        SceneGenConfig(shapes=("torus",))
    assert issubclass(PlacementFailed, RuntimeError)


def test_toy_corpus_seeds_and_split(corpus):
    again = toy_corpus(1, 3, **SMALL)
    assert all(np.array_equal(a.scene.positions, b.scene.positions) for a, b in zip(corpus, again))
    assert corpus[2].scene.meta["seed"] == 1002
    tr, held = split_corpus(toy_corpus(42, 12, **SMALL))
    assert (len(tr), len(held)) == (9, 3)
    tr, held = split_corpus(corpus, 2)
    assert (len(tr), len(held)) == (2, 1)


# ---------------------------------------------------------------- training

def test_zero_iterations_keep_initial_parameters(corpus, tmp_path):
    cfg = tiny_cfg(iters=0)
    res = train(corpus[:2], cfg, checkpoint_path=tmp_path / "m.ckpt")
    init = Model(cfg, 3).state()
    saved = load_checkpoint(tmp_path / "m.ckpt")
    assert saved.keys() == init.keys()
    assert all(np.array_equal(saved[k], init[k]) for k in init)
    assert res.log == []


def test_fixed_seed_reproduces_losses_bitwise(corpus, tmp_path):
    a = train(corpus[:2], tiny_cfg(), corpus[2:], log_path=tmp_path / "a.csv")
    b = train(corpus[:2], tiny_cfg(), corpus[2:], log_path=tmp_path / "b.csv")
    assert [r["l_total"] for r in a.log] == [r["l_total"] for r in b.log]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 4 and rows[1]["ap50"] != "" and rows[0]["ap50"] == ""
    c = train(corpus[:2], tiny_cfg(seed=7))
    assert c.final_loss != a.final_loss


def test_joint_training_moves_every_group(corpus):
    cfg = tiny_cfg()
    init = Model(cfg, 3)
    res = train(corpus[:2], cfg)
    for group in ("encoder_params", "labeler_params", "seg_params"):
        before, after = getattr(init, group).state(), getattr(res.model, group).state()
        assert any(not np.array_equal(before[k], after[k]) for k in before), group


def test_disjoint_phase_two_freezes_front_end(corpus):
    res = train(corpus[:2], tiny_cfg(mode="disjoint", iters=3, labeler_iters=3))
    frozen = res.model.encoder_params.merged(res.model.labeler_params).state()
    assert frozen.keys() == res.phase1_state.keys()
    assert all(np.array_equal(frozen[k], res.phase1_state[k]) for k in frozen)
    init = Model(res.model.cfg, 3).seg_params.state()
    assert any(not np.array_equal(init[k], v) for k, v in res.model.seg_params.state().items())


def test_sketchy_boxes_fixed_within_an_epoch(corpus):
    cfg = tiny_cfg(preset="S4", resample_boxes=True)
    model = Model(cfg, 3)
    prepared = [prepare(g, cfg, i) for i, g in enumerate(corpus)]
    trainer = training._Trainer(model, prepared, [], [], None)
    order = trainer.order()
    first = [next(order) for _ in range(3)]
    epoch0 = {ps.index: [b.to_dict() for b in ps.boxes] for ps in first}
    assert sorted(epoch0) == [0, 1, 2]
    second = next(order)  # opens epoch 1: all boxes redrawn at once
    assert all([b.to_dict() for b in ps.boxes] != epoch0[ps.index] for ps in prepared)
    snapshot = {ps.index: [b.to_dict() for b in ps.boxes] for ps in prepared}
    next(order), next(order)
    assert {ps.index: [b.to_dict() for b in ps.boxes] for ps in prepared} == snapshot
    assert any(second is ps for ps in prepared)
    # without resampling the boxes never move
    again = [prepare(g, cfg, i) for i, g in enumerate(corpus)]
    assert [b.to_dict() for b in again[0].boxes] == epoch0[0]


def test_divergence_restores_last_good_state(corpus, monkeypatch):
    real = training.joint_loss
    calls = {"n": 0}

    def flaky(model, ps, rng):
        calls["n"] += 1
        l_pl, l_seg = real(model, ps, rng)
        if calls["n"] == 3:
            return l_pl, DiffValue(np.nan)
        return l_pl, l_seg

    monkeypatch.setattr(training, "joint_loss", flaky)
    cfg = tiny_cfg(iters=5, eval_every=1, schedule="constant")
    with pytest.raises(DivergedTraining) as info:
        train(corpus[:2], cfg)
    assert info.value.iteration == 2
    monkeypatch.setattr(training, "joint_loss", real)
    ref = train(corpus[:2], tiny_cfg(iters=2, eval_every=1, schedule="constant")).model.state()
    assert all(np.array_equal(info.value.state[k], ref[k]) for k in ref)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=1e-3)
    assert learning_rate(cfg, 0, 100) == pytest.approx(1e-3)
    assert learning_rate(cfg, 99, 100) == pytest.approx(5e-5)
    lrs = [learning_rate(cfg, s, 100) for s in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert learning_rate(TrainConfig(schedule="constant"), 50, 100) == 2e-4


def test_train_config_validation():
    for bad in (dict(mode="both"), dict(lr=0), dict(lambda1=-1), dict(preset="S9"), dict(q=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        train([], TrainConfig())


def test_model_round_trip(corpus, tmp_path):
    res = train(corpus[:2], tiny_cfg(), checkpoint_path=tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.cfg == res.model.cfg
    st = res.model.state()
    assert all(np.array_equal(st[k], v) for k, v in back.state().items())


# ---------------------------------------------------------------- sweeps

def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_preset_sweep_csv(corpus, tmp_path):
    cfg = tiny_cfg(iters=2)
    rows = sweep("preset", ["S0", "S1", "S2", "S3", "S4"], cfg, corpus[:2], corpus[2:], tmp_path / "p.csv")
    table = _read(tmp_path / "p.csv")
    assert table[0] == SWEEP_HEADER and len(table) == 6
    assert [r[1] for r in table[1:]] == ["S0", "S1", "S2", "S3", "S4"]
    assert all(r["error"] == "" for r in rows)
    sweep("preset", ["S0", "S1", "S2", "S3", "S4"], cfg, corpus[:2], corpus[2:], tmp_path / "p2.csv")
    assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()


def test_lambda_sweep_csv(corpus, tmp_path):
    grid = [(0.5, 1, 0.5), (0.1, 1, 0.5), (1, 1, 0.5), (0.5, 0.5, 0.5), (0.5, 2, 0.5), (0.5, 1, 1)]
    sweep("lambda", grid, tiny_cfg(iters=1), corpus[:2], corpus[2:], tmp_path / "l.csv")
    table = _read(tmp_path / "l.csv")
    assert len(table) == 7 and table[1][1] == "0.5/1/0.5"


def test_sweep_records_failures(corpus):
    rows = sweep("q", [4, 0], tiny_cfg(iters=1), corpus[:2], corpus[2:])
    assert rows[0]["error"] == "" and rows[1]["error"].startswith("ValueError")
    with pytest.raises(ValueError):
        sweep("depth", [1], tiny_cfg(), corpus[:2], corpus[2:])
    with pytest.raises(ValueError):
        sweep("q", [], tiny_cfg(), corpus[:2], corpus[2:])
