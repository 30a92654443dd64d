import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import kink_margin, make_scene
from sketchyseg.diffcore import ParamSet, grad_check
from sketchyseg.geometry import OrientedBox, contains_points
from sketchyseg.labeler import (DegenerateFeature, LabelerConfig, NoReliablePoints, OverlapAssigner, Source,
                                assign_overlap, build_context, filter_single_box, generate_pseudo_labels,
                                labeler_loss, partition_points, point_box_similarity, reliable_split)
from sketchyseg.perturbation import PerturbParams, Preset, apply_preset
from sketchyseg.scenes import SceneGenConfig, generate_scene

D = 4


def assigner(seed=0, zero_last=False, feat_dim=D, hidden=64):
    params = ParamSet()
    return params, OverlapAssigner(params, feat_dim, np.random.default_rng(seed), hidden=hidden,
                                   zero_last=zero_last)


def two_box_scene(seed=0, n=20):
    """Boxes [0,2]x[0,1]^2 and [1.5,3.5]x[0,1]^2; one-hot features e0 / e1 per side."""
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.uniform(0.05, 1.45, n), rng.random(n), rng.random(n)])
    b = np.column_stack([rng.uniform(2.05, 3.45, n), rng.random(n), rng.random(n)])
    o = np.column_stack([rng.uniform(1.55, 1.95, 6), rng.random(6), rng.random(6)])
    pts = np.vstack([a, b, o])
    inst = np.array([0] * n + [1] * n + [0, 1] * 3)
    feats = np.zeros((len(pts), D))
    feats[inst == 0, 0] = 1.0
    feats[inst == 1, 1] = 1.0
    feats += 0.01 * rng.normal(size=feats.shape)
    boxes = [OrientedBox([0, 0, 0], [2, 1, 1]), OrientedBox([1.5, 0, 0], [3.5, 1, 1])]
    return make_scene(pts, instance=inst, semantic=inst), boxes, feats


# ---------------------------------------------------------------- partition

def test_partition_disjoint_boxes():
    sc = make_scene([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5], [9, 9, 9]])
    part = partition_points(sc, [OrientedBox([0, 0, 0], [1, 1, 1]), OrientedBox([2, 0, 0], [3, 1, 1])])
    assert part.overlap_ids == {}
    assert list(part.single_ids[0]) == [0] and list(part.single_ids[1]) == [1]
    assert list(part.background_ids) == [2]


def test_partition_duplicate_box_is_all_overlap():
    sc = make_scene(np.random.default_rng(0).random((10, 3)))
    box = OrientedBox([0, 0, 0], [1, 1, 1])
    part = partition_points(sc, [box, box])
    assert list(part.overlap_ids[(0, 1)]) == list(range(10))
    assert part.single_ids[0].size == 0 and part.background_ids.size == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_matches_membership_count(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 3, size=(120, 3))
    boxes = []
    for _ in range(3):
        lo = rng.uniform(0, 2, 3)
        boxes.append(OrientedBox(lo, lo + rng.uniform(0.5, 1.5, 3), rng.choice([0.0, 20.0])))
    part = partition_points(make_scene(pts), boxes)
    got = {}
    for i in part.background_ids:
        got[int(i)] = ("bg",)
    for b, ids in part.single_ids.items():
        for i in ids:
            got[int(i)] = ("single", b)
    for pair, ids in part.overlap_ids.items():
        for i in ids:
            got[int(i)] = ("pair",) + pair
    assert len(got) == len(pts) == (part.background_ids.size + sum(v.size for v in part.single_ids.values())
                                    + sum(v.size for v in part.overlap_ids.values()))
    for i, p in enumerate(pts):
        inside = [b for b, box in enumerate(boxes) if contains_points(box, p[None])[0]]
        if not inside:
            want = ("bg",)
        elif len(inside) == 1:
            want = ("single", inside[0])
        else:
            near = sorted(inside, key=lambda b: (np.linalg.norm(boxes[b].center - p), b))[:2]
            want = ("pair",) + tuple(sorted(near))
        assert got[i] == want


# ---------------------------------------------------------------- similarity and filter

def test_similarity_examples():
    f = np.array([1.0, 2.0, -1.0])
    c = np.zeros(3)
    assert point_box_similarity(f, f, c, c) == pytest.approx(1.0, abs=1e-15)
    assert point_box_similarity(-f, f, c, c) == pytest.approx(-1.0, abs=1e-15)
    assert point_box_similarity(f, f, c, [0, 0, 1.0]) == pytest.approx(math.exp(-1), abs=1e-15)
    assert round(math.exp(-1), 4) == 0.3679
    with pytest.raises(DegenerateFeature):
        point_box_similarity(np.zeros(3), f, c, c)


def test_filter_keeps_everything_when_trivial():
    pts = np.full((5, 3), 0.5)
    pts[0] = 0.4
    sc = make_scene(pts)
    box = OrientedBox([0, 0, 0], [1, 1, 1])
    feats = np.ones((5, D))
    assert list(filter_single_box(sc, box, feats)) == list(range(5))
    feats = np.random.default_rng(0).normal(size=(5, D))
    assert list(filter_single_box(sc, box, feats, tau_sim=-1.0)) == list(range(5))


def test_filter_against_brute_force_threshold():
    rng = np.random.default_rng(3)
    obj = rng.uniform(0.3, 0.7, size=(80, 3))
    bg = rng.uniform(0.0, 1.0, size=(20, 3))
    sc = make_scene(np.vstack([obj, bg]))
    feats = np.vstack([np.tile([1.0, 0.2, 0, 0], (80, 1)) + 0.05 * rng.normal(size=(80, D)),
                       np.tile([-1.0, 0, 0.3, 0], (20, 1)) + 0.05 * rng.normal(size=(20, D))])
    box = OrientedBox([0, 0, 0], [1, 1, 1])
    kept = filter_single_box(sc, box, feats, tau_sim=0.3)
    diag = sc.diagonal
    fb = feats.mean(axis=0)
    cb = (sc.positions / diag).mean(axis=0)
    want = [i for i in range(100)
            if point_box_similarity(feats[i], fb, sc.positions[i] / diag, cb) >= 0.3]
    assert list(kept) == want
    assert set(range(80)) <= set(want) and not set(range(80, 100)) & set(want)


# ---------------------------------------------------------------- reliable split

def test_reliable_split_cases():
    sc, boxes, _ = two_box_scene()
    part = partition_points(sc, boxes)
    r1, u1, r2, u2 = reliable_split(part, (1, 0))
    assert set(r1) == {i for i in range(len(sc.positions)) if contains_points(boxes[0], sc.positions[i:i + 1])[0]
                       and not contains_points(boxes[1], sc.positions[i:i + 1])[0]}
    assert set(u1) == set(u2) == set(range(40, 46))
    assert not set(r1) & set(r2) and not set(r1) & set(u1)
    # disjoint pair: no shared points
    far = [boxes[0], OrientedBox([5, 5, 5], [6, 6, 6])]
    part = partition_points(make_scene(np.vstack([sc.positions, [[5.5, 5.5, 5.5]]])), far)
    assert reliable_split(part, (0, 1))[1].size == 0
    # nested boxes: the inner one keeps nothing of its own
    nested = [OrientedBox([0, 0, 0], [3.5, 1, 1]), OrientedBox([1, 0, 0], [2, 1, 1])]
    with pytest.raises(NoReliablePoints):
        reliable_split(partition_points(sc, nested), (0, 1))


# ---------------------------------------------------------------- assigner

def test_zero_initialised_assigner_is_uniform():
    _, a = assigner(zero_last=True)
    p = assign_overlap(np.random.default_rng(0).normal(size=(5, D)), np.ones(D), -np.ones(D), a).data
    assert np.array_equal(p, np.full((5, 2), 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_assigner_swap_equivariance_is_exact(seed):
    rng = np.random.default_rng(seed)
    _, a = assigner(seed)
    f = rng.normal(size=(7, D))
    b1, b2 = rng.normal(size=D), rng.normal(size=D)
    p = assign_overlap(f, b1, b2, a).data
    q = assign_overlap(f, b2, b1, a).data
    assert np.array_equal(p, q[:, ::-1])
    same = assign_overlap(f, b1, b1, a).data
    assert np.array_equal(same[:, 0], same[:, 1])


def test_assigner_learns_separable_toy_features():
    from sketchyseg.diffcore import AdamW
    from sketchyseg.diffcore import ops as T
    rng = np.random.default_rng(0)
    params, a = assigner(1)
    fb1, fb2 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])

    def sample(n):
        y = rng.integers(2, size=n)
        f = np.where(y[:, None] == 0, fb1, fb2) + 0.25 * rng.normal(size=(n, D))
        return f, y

    opt = AdamW(params, lr=1e-2, weight_decay=0.0)
    f, y = sample(200)
    for _ in range(150):
        params.zero_grad()
        loss = T.cross_entropy(a(f, np.tile(fb1, (200, 1)), np.tile(fb2, (200, 1))), y)
        loss.backward()
        opt.step()
    ft, yt = sample(400)
    pred = assign_overlap(ft, fb1, fb2, a).data.argmax(1)
    assert (pred == yt).mean() > 0.95


# ---------------------------------------------------------------- loss

def _distance_scorer(a, gain=10.0):
    """Hand-set weights: score(box) = -gain * L1(f_p - f_box)."""
    l0, l1, l2 = a.scorer.layers
    h = l0.weight.data.shape[1]
    w0 = np.zeros((2 * D, h))
    for i in range(D):
        w0[D + i, 2 * i] = 1.0
        w0[D + i, 2 * i + 1] = -1.0
    l0.weight.data, l0.bias.data = w0, np.zeros(h)
    l1.weight.data, l1.bias.data = np.eye(h), np.zeros(h)
    l2.weight.data = np.full((h, 1), -gain)
    l2.bias.data = np.zeros(1)


def test_loss_of_near_perfect_scorer():
    sc, boxes, feats = two_box_scene()
    _, a = assigner()
    _distance_scorer(a)
    loss, flag = labeler_loss(sc, boxes, feats, a, LabelerConfig(use_filter=False))
    assert flag is None and loss.item() < 1e-3


def test_loss_of_uniform_scorer_is_ln2():
    sc, boxes, feats = two_box_scene()
    _, a = assigner(zero_last=True)
    loss, _ = labeler_loss(sc, boxes, feats, a)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_loss_without_overlap_flags():
    sc = make_scene([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5]])
    boxes = [OrientedBox([0, 0, 0], [1, 1, 1]), OrientedBox([2, 0, 0], [3, 1, 1])]
    _, a = assigner()
    loss, flag = labeler_loss(sc, boxes, np.ones((2, D)), a)
    assert flag == "NoOverlapLoss" and loss.item() == 0.0


def test_labeler_loss_grad_check():
    from sketchyseg.diffcore import DiffValue
    sc, boxes, feats = two_box_scene(n=12)
    cfg = LabelerConfig(max_samples_per_box=6)
    ctx = build_context(sc, boxes, feats, cfg)

    def f(_x=None, fv=None):
        return labeler_loss(sc, boxes, fv if fv is not None else feats, a, cfg, ctx,
                            np.random.default_rng(0))[0]

    # resample weights until no ReLU input lies within 1e-3 of its kink
    for seed in range(50):
        params, a = assigner(seed, hidden=8)
        if kink_margin(f) > 1e-3:
            break
    else:
        pytest.fail("no kink-free initialisation found")

    for p in params.values():
        assert grad_check(lambda _p: f(), p, h=1e-5) < 1e-4
    x = DiffValue(feats.copy())
    assert grad_check(lambda v: f(fv=v), x, h=1e-5) < 1e-4


# ---------------------------------------------------------------- pseudo labels

def test_s0_disjoint_clean_scenes_are_exact():
    for seed in range(5):
        gen = generate_scene(SceneGenConfig(overlap_fraction=0.0, background_in_boxes=False, seed=seed))
        sc = gen.scene
        from sketchyseg.features import raw_descriptor
        pl = generate_pseudo_labels(sc, gen.gt_boxes, gen.box_classes, raw_descriptor(sc), None,
                                    LabelerConfig(use_filter=False))
        assert np.array_equal(pl.instance, sc.gt_instance)
        assert np.array_equal(pl.semantic, sc.gt_semantic)


def test_tie_goes_to_nearer_center():
    # symmetric scene: the shared point is equidistant in features but closer to box 1's center
    pts = np.array([[0.2, 0.5, 0.5], [2.8, 0.5, 0.5], [1.6, 0.5, 0.5]])
    sc = make_scene(pts, instance=[0, 1, 1], semantic=[0, 0, 0])
    boxes = [OrientedBox([0, 0, 0], [1.8, 1, 1]), OrientedBox([1.2, 0, 0], [3.0, 1, 1])]
    _, a = assigner(zero_last=True)
    feats = np.ones((3, D))
    pl = generate_pseudo_labels(sc, boxes, [0, 2], feats, a, LabelerConfig(use_filter=False))
    assert pl.instance[2] == 1 and pl.semantic[2] == 2
    assert pl.source[2] == Source.OVERLAP_ASSIGNED


def test_nearest_center_fallback_for_nested_boxes():
    sc, _, feats = two_box_scene()
    nested = [OrientedBox([0, 0, 0], [3.5, 1, 1]), OrientedBox([1, 0, 0], [2, 1, 1])]
    _, a = assigner()
    pl = generate_pseudo_labels(sc, nested, [0, 1], feats, a)
    assert pl.fallback_pairs == [(0, 1)]
    inner = np.flatnonzero(contains_points(nested[1], sc.positions))
    d0 = np.linalg.norm(sc.positions[inner] - nested[0].center, axis=1)
    d1 = np.linalg.norm(sc.positions[inner] - nested[1].center, axis=1)
    assert np.array_equal(pl.instance[inner], np.where(d1 < d0, 1, 0))


def test_no_filter_no_overlap_is_containment_labeling():
    gen = generate_scene(SceneGenConfig(overlap_fraction=0.0, seed=3))
    sc = gen.scene
    pl = generate_pseudo_labels(sc, gen.gt_boxes, gen.box_classes, np.ones((sc.n_points, D)), None,
                                LabelerConfig(use_filter=False))
    want = np.full(sc.n_points, -1)
    for b, box in enumerate(gen.gt_boxes):
        want[contains_points(box, sc.positions)] = b
    assert np.array_equal(pl.instance, want)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(Preset)))
def test_pseudo_label_coverage_and_consistency(seed, preset):
    gen = generate_scene(SceneGenConfig(seed=seed))
    boxes = apply_preset(gen.gt_boxes, PerturbParams.for_preset(preset, seed=seed))
    from sketchyseg.features import raw_descriptor
    _, a = assigner(seed, feat_dim=10)
    pl = generate_pseudo_labels(gen.scene, boxes, gen.box_classes, raw_descriptor(gen.scene), a)
    pl.validate(len(boxes))
    assert pl.instance.shape == (gen.scene.n_points,)
    assert ((pl.instance >= -1) & (pl.instance < len(boxes))).all()
    assert np.array_equal(pl.source == Source.OUTSIDE, pl.instance == -1)


def test_accuracy_degrades_monotonically_along_presets():
    from sketchyseg.features import raw_descriptor
    scenes = [generate_scene(SceneGenConfig(seed=100 + k)) for k in range(20)]
    acc = []
    for preset in Preset:
        vals = []
        for k, gen in enumerate(scenes):
            boxes = apply_preset(gen.gt_boxes, PerturbParams.for_preset(preset, seed=k))
            pl = generate_pseudo_labels(gen.scene, boxes, gen.box_classes, raw_descriptor(gen.scene), None)
            vals.append(np.mean(pl.instance == gen.scene.gt_instance))
        acc.append(np.mean(vals))
    assert all(a >= b for a, b in zip(acc, acc[1:])), acc
