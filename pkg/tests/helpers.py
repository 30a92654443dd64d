"""Small scene builders shared by the unit tests."""
import numpy as np

from sketchyseg.geometry import PointCloudScene


def make_scene(positions, instance=None, semantic=None, superpoints=None, colors=None,
               n_classes=3, seed=0):
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(pos)
    rng = np.random.default_rng(seed)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    inst = np.zeros(n, int) if instance is None else np.asarray(instance)
    sem = np.where(inst >= 0, 0, -1) if semantic is None else np.asarray(semantic)
    sp = np.arange(n) if superpoints is None else np.asarray(superpoints)
    col = rng.random((n, 3)) if colors is None else np.asarray(colors, dtype=float)
    return PointCloudScene(pos, col, nrm, inst, sem, sp, n_classes=n_classes)


def random_box(rng, lo=-2.0, hi=2.0, yaw=False):
    from sketchyseg.geometry import OrientedBox
    a = rng.uniform(lo, hi, 3)
    b = a + rng.uniform(0.1, 1.5, 3)
    return OrientedBox(a, b, rng.uniform(-179, 180) if yaw else 0.0)


def kink_margin(fn):
    """Smallest |input| seen by relu/abs while ``fn`` runs.

    Finite differences are only meaningful when no such input sits within
    the probe step of zero.
    """
    from sketchyseg.diffcore import tensor
    seen = [np.inf]
    relu, abs_ = tensor.relu, tensor.abs_

    def spy(op):
        def wrapped(x):
            x = tensor.as_value(x)
            if x.data.size:
                seen[0] = min(seen[0], float(np.abs(x.data).min()))
            return op(x)
        return wrapped

    tensor.relu, tensor.abs_ = spy(relu), spy(abs_)
    try:
        fn()
    finally:
        tensor.relu, tensor.abs_ = relu, abs_
    return seen[0]


class replaying:
    """Record a module function's results on the first pass, replay them afterwards.

    Used to hold stop-gradient inputs fixed while finite differences probe the
    rest of a graph.
    """

    def __init__(self, module, name):
        self.module, self.name = module, name
        self.orig = getattr(module, name)
        self.tape, self.pos, self.recording = [], 0, True

    def __enter__(self):
        def fn(*args, **kw):
            if self.recording:
                out = self.orig(*args, **kw)
                self.tape.append(out)
                return out
            out = self.tape[self.pos % len(self.tape)]
            self.pos += 1
            return out
        setattr(self.module, self.name, fn)
        return self

    def replay(self):
        self.recording = False
        self.pos = 0

    def __exit__(self, *exc):
        setattr(self.module, self.name, self.orig)
