"""Plain-text readers and writers for poses, points and synthetic datasets.

Pose files are CSV with the header ``frame_id,tx,ty,tz,qw,qx,qy,qz``
(camera-to-world, metres, unit quaternion). Point clouds are ASCII PLY with
an extra per-vertex ``track_length`` property. A dataset directory holds::

    gt_poses.csv  vio_poses.csv  intrinsics.txt  scenario.json
    features/<frame>.txt  matches.txt  doppelganger_pairs.txt
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation as _SciRot

from .geometry import Intrinsics, Pose, Rotation
from .model import Reconstruction, VioSequence
from .verification import MatchSet

POSE_HEADER = "frame_id,tx,ty,tz,qw,qx,qy,qz"
DATASET_FILES = (
    "gt_poses.csv",
    "vio_poses.csv",
    "intrinsics.txt",
    "features",
    "matches.txt",
    "scenario.json",
    "doppelganger_pairs.txt",
)
# pairs with fewer look-alike matches than this are not written to matches.txt
MIN_EXPORTED_MATCHES = 8


class DataFormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# poses


def write_poses(path, poses) -> None:
    """Write ``frame -> Pose`` (or a VioSequence) as pose CSV, sorted by frame."""
    if isinstance(poses, VioSequence):
        poses = poses.poses
    lines = [POSE_HEADER]
    for f in sorted(poses):
        p = poses[f]
        x, y, z, w = _SciRot.from_matrix(p.R).as_quat()
        if w < 0:
            x, y, z, w = -x, -y, -z, -w
        vals = list(p.translation) + [w, x, y, z]
        lines.append(",".join([str(int(f))] + [_fmt(v) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, Pose]:
    path = Path(path)
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.replace(" ", "") == POSE_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 comma-separated fields, got {len(parts)}")
            try:
                f = int(parts[0])
                tx, ty, tz, qw, qx, qy, qz = (float(v) for v in parts[1:])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            q = np.array([qx, qy, qz, qw])
            n = np.linalg.norm(q)
            if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
                raise DataFormatError(f"{path}:{lineno}: quaternion is not unit length (norm {n:.6g})")
            if f in out:
                raise DataFormatError(f"{path}:{lineno}: duplicate frame id {f}")
            R = _SciRot.from_quat(q / n).as_matrix()
            out[f] = Pose(Rotation.from_matrix(R), np.array([tx, ty, tz]))
    return out


# ---------------------------------------------------------------------------
# points


def write_ply(path, model: Reconstruction) -> None:
    """ASCII PLY of the model's points with their track lengths."""
    ids, X = model.points_array()
    lengths = [len(model.tracks[t]) for t in ids]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(ids)}",
        "property double x",
        "property double y",
        "property double z",
        "property int track_length",
        "end_header",
    ]
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {n}" for (x, y, z), n in zip(X, lengths)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Return ``(points (n, 3), track_lengths (n,))`` from a file written by :func:`write_ply`."""
    path = Path(path)
    lines = path.read_text().splitlines()
    try:
        end = lines.index("end_header")
    except ValueError:
        raise DataFormatError(f"{path}: missing end_header") from None
    n = next((int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex")), None)
    if n is None:
        raise DataFormatError(f"{path}: missing vertex count")
    rows = lines[end + 1 : end + 1 + n]
    if len(rows) != n:
        raise DataFormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array([r.split() for r in rows], dtype=float).reshape(-1, 4)
    return data[:, :3], data[:, 3].astype(int)


# ---------------------------------------------------------------------------
# dataset directories


def _load_table(path, cols, dtype=float):
    """Whitespace table with ``#`` comments; errors name file and line."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != cols:
                raise DataFormatError(f"{path}:{lineno}: expected {cols} columns, got {len(parts)}")
            try:
                rows.append([dtype(v) for v in parts])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=dtype).reshape(-1, cols)


def write_dataset(dataset, out_dir, pairs=None) -> list[tuple[int, int]]:
    """Serialize a simulated dataset; returns the pairs written to ``matches.txt``.

    ``pairs`` defaults to every frame pair sharing at least
    ``MIN_EXPORTED_MATCHES`` look-alike points (true or doppelganger).
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    write_poses(out / "gt_poses.csv", dataset.gt_poses)
    write_poses(out / "vio_poses.csv", dataset.vio)
    K = dataset.intrinsics
    (out / "intrinsics.txt").write_text(" ".join(_fmt(v) for v in (K.fx, K.fy, K.cx, K.cy)) + "\n")
    (out / "scenario.json").write_text(json.dumps(dataset.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for f in dataset.frames:
        lines = ["# u v point_id"]
        lines += [f"{_fmt(u)} {_fmt(v)} {int(p)}" for (u, v), p in zip(dataset.features[f], dataset.feature_points[f])]
        (out / "features" / f"{f}.txt").write_text("\n".join(lines) + "\n")
    if pairs is None:
        A = np.triu(dataset.appearance_covisibility(), 1)
        fr = np.array(dataset.frames)
        pairs = [(int(fr[a]), int(fr[b])) for a, b in zip(*np.nonzero(A >= MIN_EXPORTED_MATCHES))]
    lines = ["# frame_a frame_b feature_a feature_b true_match"]
    for a, b in sorted(pairs):
        ms = dataset.matchset(a, b)
        true = dataset.gt_inlier_mask(a, b)
        lines += [f"{a} {b} {i} {j} {int(t)}" for (i, j), t in zip(ms.idx.tolist(), true.tolist())]
    (out / "matches.txt").write_text("\n".join(lines) + "\n")
    dop = ["# frame_a frame_b"] + [f"{a} {b}" for a, b in sorted(dataset.doppelganger_pairs)]
    (out / "doppelganger_pairs.txt").write_text("\n".join(dop) + "\n")
    return sorted(pairs)


class FileDataset:
    """A dataset directory loaded back into memory.

    Provides what :func:`viosfm.reconstruction.reconstruct` needs
    (``frames``, ``features``, ``vio``, ``intrinsics``, ``matchset``) plus
    ground truth for evaluation.
    """

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        for name in DATASET_FILES:
            if not (self.root / name).exists():
                raise FileNotFoundError(f"dataset file {self.root / name} is missing")
        self.gt_poses = read_poses(self.root / "gt_poses.csv")
        self.vio = VioSequence(read_poses(self.root / "vio_poses.csv"))
        k = _load_table(self.root / "intrinsics.txt", 4)
        if len(k) != 1:
            raise DataFormatError(f"{self.root / 'intrinsics.txt'}: expected one line of four numbers")
        try:
            self.intrinsics = Intrinsics(*k[0])
        except ValueError as exc:
            raise DataFormatError(f"{self.root / 'intrinsics.txt'}:1: {exc}") from None
        try:
            self.scenario = json.loads((self.root / "scenario.json").read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{self.root / 'scenario.json'}:{exc.lineno}: {exc.msg}") from None
        self.features, self.feature_points = {}, {}
        for f in self.vio.frame_ids:
            tab = _load_table(self.root / "features" / f"{f}.txt", 3)
            self.features[f] = tab[:, :2]
            self.feature_points[f] = tab[:, 2].astype(np.int64)
        m = _load_table(self.root / "matches.txt", 5, dtype=int)
        self._matches = {}
        if len(m):
            order = np.lexsort((m[:, 1], m[:, 0]))
            m = m[order]
            keys = m[:, :2]
            starts = np.flatnonzero(np.r_[True, (keys[1:] != keys[:-1]).any(axis=1)])
            for s, e in zip(starts, np.r_[starts[1:], len(m)]):
                self._matches[(int(m[s, 0]), int(m[s, 1]))] = m[s:e, 2:]
        d = _load_table(self.root / "doppelganger_pairs.txt", 2, dtype=int)
        self.doppelganger_pairs = {(int(a), int(b)) for a, b in d}

    @property
    def frames(self) -> list[int]:
        return self.vio.frame_ids

    def __len__(self):
        return len(self.vio)

    def match_count(self, a: int, b: int) -> int:
        rows = self._matches.get((min(a, b), max(a, b)))
        return 0 if rows is None else len(rows)

    def matchset(self, a: int, b: int) -> MatchSet:
        rows = self._matches.get((a, b))
        if rows is None:
            return MatchSet.empty(a, b)
        return MatchSet.from_features(a, b, rows[:, :2], self.features[a], self.features[b])

    def gt_inlier_mask(self, a: int, b: int) -> np.ndarray:
        rows = self._matches.get((a, b))
        return np.zeros(0, bool) if rows is None else rows[:, 2].astype(bool)

    def __call__(self, pair) -> MatchSet:
        return self.matchset(*pair)


class MatchCountRetrieval:
    """Retrieval that ranks frames by the number of stored tentative matches.

    This mimics appearance-based image retrieval, so look-alike places are
    retrieved as readily as true revisits.
    """

    def __init__(self, dataset: FileDataset, exclude_window: int = 0, min_shared: int = 1):
        self.exclude = exclude_window
        self.min_shared = min_shared
        self.neighbours = {}
        for (a, b), rows in dataset._matches.items():
            if abs(a - b) <= exclude_window or len(rows) < min_shared:
                continue
            self.neighbours.setdefault(a, []).append((len(rows), b))
            self.neighbours.setdefault(b, []).append((len(rows), a))
        for f in self.neighbours:
            self.neighbours[f].sort(key=lambda t: (-t[0], t[1]))

    def query(self, frame, k):
        return [g for _, g in self.neighbours.get(frame, [])[:k]]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
