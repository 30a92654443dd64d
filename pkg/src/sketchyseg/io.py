"""Readers and writers: JSON-lines scenes, box and prediction files, PLY export."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import OrientedBox, PointCloudScene


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- scenes

def write_scene(path, scene: PointCloudScene) -> None:
    """Header line, then one JSON object per point."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"n_points": scene.n_points, "n_classes": scene.n_classes}) + "\n")
        for i in range(scene.n_points):
            fh.write(json.dumps({
                "p": scene.positions[i].tolist(), "c": scene.colors[i].tolist(),
                "n": scene.normals[i].tolist(), "inst": int(scene.gt_instance[i]),
                "sem": int(scene.gt_semantic[i]), "sp": int(scene.superpoint_id[i]),
            }) + "\n")


def _read_lines(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if header.get("n_points") != len(rows):
        raise FormatError(f"{path}: header announces {header.get('n_points')} points, found {len(rows)}")
    return header, rows


def read_scene(path) -> PointCloudScene:
    header, rows = _read_lines(path)
    try:
        scene = PointCloudScene(
            positions=np.array([r["p"] for r in rows], dtype=np.float64).reshape(-1, 3),
            colors=np.array([r["c"] for r in rows], dtype=np.float64).reshape(-1, 3),
            normals=np.array([r["n"] for r in rows], dtype=np.float64).reshape(-1, 3),
            gt_instance=np.array([r["inst"] for r in rows], dtype=np.int64),
            gt_semantic=np.array([r["sem"] for r in rows], dtype=np.int64),
            superpoint_id=np.array([r["sp"] for r in rows], dtype=np.int64),
            n_classes=int(header.get("n_classes", 3)),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: point record lacks {exc}") from exc
    scene.validate()
    return scene


# ---------------------------------------------------------------- boxes

def write_boxes(path, boxes: Sequence[OrientedBox], classes: Sequence[int]) -> None:
    records = [dict(b.to_dict(), inst=i, sem=int(c)) for i, (b, c) in enumerate(zip(boxes, classes))]
    Path(path).write_text(json.dumps(records, indent=1))


def read_boxes(path) -> tuple[list[OrientedBox], list[int]]:
    records = json.loads(Path(path).read_text())
    records = sorted(records, key=lambda r: r.get("inst", 0))
    return [OrientedBox.from_dict(r) for r in records], [int(r["sem"]) for r in records]


# ---------------------------------------------------------------- pseudo labels

def write_pseudo_labels(path, scene: PointCloudScene, pseudo) -> None:
    """Scene format with labels replaced by pseudo labels, plus the label source."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"n_points": scene.n_points, "n_classes": scene.n_classes}) + "\n")
        for i in range(scene.n_points):
            fh.write(json.dumps({
                "p": scene.positions[i].tolist(), "c": scene.colors[i].tolist(),
                "n": scene.normals[i].tolist(), "inst": int(pseudo.instance[i]),
                "sem": int(pseudo.semantic[i]), "sp": int(scene.superpoint_id[i]),
                "src": int(pseudo.source[i]),
            }) + "\n")


def read_pseudo_labels(path):
    """(instance, semantic, source) arrays from a pseudo-label file."""
    _, rows = _read_lines(path)
    return tuple(np.array([r[k] for r in rows], dtype=np.int64) for k in ("inst", "sem", "src"))


# ---------------------------------------------------------------- predictions

def write_predictions(path, instances: Iterable) -> None:
    """One JSON object per predicted instance; masks are point indices."""
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps({
                "class": int(inst["class"]), "conf": float(inst["conf"]),
                "mask": [int(i) for i in inst["mask"]], "box": inst["box"],
                "core_scale": float(inst.get("core_scale", 1.0)),
            }) + "\n")


def read_predictions(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


# ---------------------------------------------------------------- PLY

def instance_colors(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    """uint8 RGB per point; unlabeled points are grey."""
    labels = np.asarray(labels)
    top = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    palette = np.random.default_rng(seed).integers(40, 256, size=(max(top, 1), 3))
    out = np.full((labels.size, 3), 128, dtype=np.uint8)
    sel = labels >= 0
    out[sel] = palette[labels[sel]]
    return out


def write_ply(path, positions: np.ndarray, colors: np.ndarray, binary: bool = False) -> None:
    pos = np.asarray(positions, dtype=np.float32)
    col = np.asarray(colors, dtype=np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pos)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    if binary:
        rec = np.empty(len(pos), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("r", "u1"), ("g", "u1"), ("b", "u1")])
        rec["x"], rec["y"], rec["z"] = pos.T
        rec["r"], rec["g"], rec["b"] = col.T
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for p, c in zip(pos, col):
                fh.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Reads the vertex layout written by :func:`write_ply` (ASCII or binary)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    n = next(int(ln.split()[2]) for ln in header if ln.startswith("element vertex"))
    body = raw[end + len(b"end_header\n"):]
    if any("binary_little_endian" in ln for ln in header):
        rec = np.frombuffer(body, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                         ("r", "u1"), ("g", "u1"), ("b", "u1")], count=n)
        pos = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
        col = np.column_stack([rec["r"], rec["g"], rec["b"]])
    else:
        vals = np.array(body.decode("ascii").split(), dtype=np.float64).reshape(n, 6)
        pos, col = vals[:, :3], vals[:, 3:].astype(np.uint8)
    return pos, col
