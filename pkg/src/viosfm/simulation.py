"""Synthetic worlds, camera trajectories, noisy VIO and trajectory metrics.

Three worlds are available:

``box-cloud``
    random points in a box, cameras on a circle looking inwards.
``corridor-loop``
    a closed rectangular corridor with rounded corners; a forward-looking
    camera walks once around it, so the last frames see the first frames'
    structure again (loop closure material).
``duplicated-corridor``
    a straight corridor, a climbing half-turn, then a second floor that is an
    exact copy of the first one rotated by 180 degrees. The second floor is
    walked in the opposite direction, so its frames see exactly what the
    first-floor frames saw. Matching by appearance then produces
    self-consistent doppelganger pairs across floors.

All randomness derives from ``ScenarioConfig.seed``; per-frame and per-pair
streams are seeded from ``(seed, tag, ids)`` so datasets are reproducible and
match sets can be generated lazily in any order.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import GeometryError, Intrinsics, Pose, Rotation, compose, inverse, relative_pose, umeyama_align
from .model import VioSequence
from .verification import MatchSet

log = logging.getLogger(__name__)

WORLDS = ("box-cloud", "corridor-loop", "duplicated-corridor")
# a candidate pair with at least this many true correspondences counts as covisible
COVISIBLE_MIN_MATCHES = 30


class GenerationError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    world: str = "corridor-loop"
    num_frames: int = 500
    num_points: int = 4000
    width: int = 640
    height: int = 480
    focal: float = 400.0
    max_view_distance: float = 5.0
    sigma_px: float = 1.0
    outlier_fraction: float = 0.05
    vio_sigma_rot_deg: float = 0.2
    vio_sigma_t: float = 0.005
    # (first, last) inclusive frame ranges whose frames keep only gap_max_features features
    texture_gaps: list = field(default_factory=list)
    gap_max_features: int = 5
    # corridor geometry (metres)
    loop_length: float = 24.0
    loop_width: float = 12.0
    corridor_width: float = 2.0
    corridor_height: float = 2.6
    camera_height: float = 1.3
    floor_separation: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.world not in WORLDS:
            raise ValueError(f"unknown world {self.world!r}; expected one of {WORLDS}")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")
        if min(self.sigma_px, self.vio_sigma_rot_deg, self.vio_sigma_t) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.focal <= 0 or self.width <= 0 or self.height <= 0 or self.max_view_distance <= 0:
            raise ValueError("camera settings must be positive")
        gaps = []
        for g in self.texture_gaps:
            a, b = (int(v) for v in g)
            if b < a:
                raise ValueError(f"texture gap {g} is reversed")
            gaps.append((a, b))
        self.texture_gaps = gaps

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["texture_gaps"] = [list(g) for g in self.texture_gaps]
        return d


@dataclass
class Dataset:
    """Ground truth, observations and VIO for one synthetic run.

    ``features[f]`` is an ``(n, 2)`` pixel array whose row index is the
    feature index; ``feature_points[f]`` gives the scene point behind each row.
    Matches are produced on demand by :meth:`matchset`.
    """

    cfg: ScenarioConfig
    intrinsics: Intrinsics
    gt_poses: dict[int, Pose]
    points: np.ndarray
    appearance: np.ndarray
    features: dict[int, np.ndarray]
    feature_points: dict[int, np.ndarray]
    vio: VioSequence
    doppelganger_pairs: set = field(default_factory=set)
    _covis: np.ndarray | None = None
    _appear_covis: np.ndarray | None = None

    @property
    def frames(self) -> list[int]:
        return sorted(self.gt_poses)

    def __len__(self):
        return len(self.gt_poses)

    # -- co-visibility -------------------------------------------------------

    def _incidence(self, ids_of):
        frames = self.frames
        rows = np.concatenate([np.full(len(self.feature_points[f]), i) for i, f in enumerate(frames)])
        cols = np.concatenate([ids_of(self.feature_points[f]) for f in frames])
        n = int(cols.max()) + 1 if len(cols) else 1
        V = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(frames), n))
        V.data[:] = 1.0
        return V

    def covisibility(self) -> np.ndarray:
        """Number of shared scene points for every frame pair."""
        if self._covis is None:
            V = self._incidence(lambda p: p)
            self._covis = (V @ V.T).toarray().astype(np.int64)
        return self._covis

    def appearance_covisibility(self) -> np.ndarray:
        """Number of shared look-alike points (true or twin) for every frame pair."""
        if self._appear_covis is None:
            V = self._incidence(lambda p: self.appearance[p])
            self._appear_covis = (V @ V.T).toarray().astype(np.int64)
        return self._appear_covis

    def true_match_count(self, a: int, b: int) -> int:
        return int(self.covisibility()[a, b])

    def covisible_pairs(self, min_matches: int = COVISIBLE_MIN_MATCHES) -> set:
        C = np.triu(self.covisibility(), 1)
        return {(int(a), int(b)) for a, b in zip(*np.nonzero(C >= min_matches))}

    # -- matches ----------------------------------------------------------------

    def _raw_matches(self, a, b):
        pa, pb = self.feature_points[a], self.feature_points[b]
        app_a, app_b = self.appearance[pa], self.appearance[pb]
        # first occurrence per appearance id keeps matching one-to-one
        ua, ia = np.unique(app_a, return_index=True)
        ub, ib = np.unique(app_b, return_index=True)
        _, ka, kb = np.intersect1d(ua, ub, assume_unique=True, return_indices=True)
        idx = np.c_[ia[ka], ib[kb]]
        true = pa[idx[:, 0]] == pb[idx[:, 1]]
        return idx, true

    def matchset(self, a: int, b: int) -> MatchSet:
        """Tentative matches between frames ``a`` and ``b`` (appearance based, with outliers)."""
        idx, _ = self._corrupted(a, b)
        return MatchSet.from_features(a, b, idx, self.features[a], self.features[b])

    def gt_inlier_mask(self, a: int, b: int) -> np.ndarray:
        """True where a match of :meth:`matchset` links the same scene point."""
        idx, _ = self._corrupted(a, b)
        return self.feature_points[a][idx[:, 0]] == self.feature_points[b][idx[:, 1]]

    def _corrupted(self, a, b):
        idx, true = self._raw_matches(a, b)
        n = len(idx)
        k = int(round(self.cfg.outlier_fraction * n))
        if k >= 2:
            rng = np.random.default_rng([self.cfg.seed, 3, min(a, b), max(a, b)])
            sel = np.sort(rng.choice(n, size=k, replace=False))
            # cyclic shift of a random order is a derangement: every selected
            # feature in a is paired with another selected feature of b
            order = rng.permutation(sel)
            idx = idx.copy()
            idx[order, 1] = idx[np.roll(order, 1), 1]
        return idx, true

    def __call__(self, pair) -> MatchSet:
        return self.matchset(*pair)


# ---------------------------------------------------------------------------
# trajectories and worlds


def _look_pose(center, forward, up=(0.0, 0.0, 1.0)) -> Pose:
    f = np.asarray(forward, float)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return Pose.from_rt(np.stack([right, down, f], axis=1), center)


def _rounded_rect(L, W, r, s):
    """Points and unit tangents at arc lengths ``s`` along a rounded rectangle.

    Counter-clockwise, starting at the middle of the bottom edge, centred on
    the origin with straight edge lengths ``L - 2r`` and ``W - 2r``.
    """
    a, b = L / 2 - r, W / 2 - r
    segs = []  # (kind, length, data)
    segs.append(("line", a, (np.array([0.0, -W / 2]), np.array([1.0, 0.0]))))
    for k, (cx, cy, start, line_from, line_dir, line_len) in enumerate(
        [
            (a, -b, -np.pi / 2, np.array([L / 2, -b]), np.array([0.0, 1.0]), 2 * b),
            (a, b, 0.0, np.array([a, W / 2]), np.array([-1.0, 0.0]), 2 * a),
            (-a, b, np.pi / 2, np.array([-L / 2, b]), np.array([0.0, -1.0]), 2 * b),
            (-a, -b, np.pi, np.array([-a, -W / 2]), np.array([1.0, 0.0]), a),
        ]
    ):
        segs.append(("arc", np.pi / 2 * r, (np.array([cx, cy]), start)))
        segs.append(("line", line_len, (line_from, line_dir)))
    lengths = np.array([sl for _, sl, _ in segs])
    total = lengths.sum()
    s = np.mod(np.asarray(s, float), total)
    bounds = np.r_[0.0, np.cumsum(lengths)]
    which = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(segs) - 1)
    pos = np.zeros((len(s), 2))
    tan = np.zeros((len(s), 2))
    for k, (kind, _, data) in enumerate(segs):
        m = which == k
        u = s[m] - bounds[k]
        if kind == "line":
            p0, d = data
            pos[m] = p0 + u[:, None] * d
            tan[m] = d
        else:
            c, start = data
            th = start + u / r
            pos[m] = c + r * np.c_[np.cos(th), np.sin(th)]
            tan[m] = np.c_[-np.sin(th), np.cos(th)]
    return pos, tan, total


def _corridor_points(rng, centre, tangent, n, cfg):
    """Random points on the walls, floor and ceiling of a corridor around a centreline."""
    w, h = cfg.corridor_width / 2, cfg.corridor_height
    normal = np.c_[-tangent[:, 1], tangent[:, 0]]
    # pick surfaces proportional to their cross-section extent
    ext = np.array([h, h, 2 * w, 2 * w])
    surf = rng.choice(4, size=n, p=ext / ext.sum())
    lateral = np.where(surf == 0, w, np.where(surf == 1, -w, rng.uniform(-w, w, n)))
    height = np.where(surf == 2, 0.0, np.where(surf == 3, h, rng.uniform(0, h, n)))
    xy = centre + lateral[:, None] * normal
    return np.c_[xy, height]


def _corridor_loop(cfg, rng):
    L, W = cfg.loop_length, cfg.loop_width
    r = cfg.corridor_width
    _, _, total = _rounded_rect(L, W, r, np.zeros(1))
    s_frames = np.arange(cfg.num_frames) * total / cfg.num_frames
    pos, tan, _ = _rounded_rect(L, W, r, s_frames)
    poses = {
        i: _look_pose(np.r_[pos[i], cfg.camera_height], np.r_[tan[i], 0.0]) for i in range(cfg.num_frames)
    }
    s_pts = rng.uniform(0, total, cfg.num_points)
    cpos, ctan, _ = _rounded_rect(L, W, r, s_pts)
    points = _corridor_points(rng, cpos, ctan, cfg.num_points, cfg)
    return poses, points, np.arange(cfg.num_points), set()


def _box_cloud(cfg, rng):
    points = rng.uniform([-1.5, -1.5, -0.5], [1.5, 1.5, 0.5], (cfg.num_points, 3))
    radius = 4.0
    th = np.arange(cfg.num_frames) * 2 * np.pi / cfg.num_frames
    poses = {}
    for i, a in enumerate(th):
        c = np.array([radius * np.cos(a), radius * np.sin(a), 0.5])
        poses[i] = _look_pose(c, -c * np.array([1, 1, 0]))
    return poses, points, np.arange(cfg.num_points), set()


def _duplicated_corridor(cfg, rng):
    n1 = max(int(round(cfg.num_frames * 0.4)), 1)
    nt = max(cfg.num_frames - 2 * n1, 0)
    L = cfg.loop_length
    r = cfg.corridor_width * 1.5
    h = cfg.floor_separation
    ch = cfg.camera_height
    xs = np.linspace(0.0, L, n1, endpoint=False)
    poses = {}
    for i, x in enumerate(xs):
        poses[i] = _look_pose([x, 0.0, ch], [1.0, 0.0, 0.0])
    # climbing half turn around (L, r)
    for k in range(nt):
        th = np.pi * (k + 1) / (nt + 1)
        c = [L + r * np.sin(th), r - r * np.cos(th), ch + h * th / np.pi]
        d = [r * np.cos(th), r * np.sin(th), h / np.pi]
        poses[n1 + k] = _look_pose(c, d)

    def twin(X):
        X = np.atleast_2d(X)
        return np.c_[L - X[:, 0], 2 * r - X[:, 1], X[:, 2] + h]

    # the k-th frame of floor 2 is the twin of the k-th frame of floor 1
    for j in range(n1):
        src = poses[j]
        R = np.diag([-1.0, -1.0, 1.0]) @ src.R
        poses[n1 + nt + j] = Pose.from_rt(R, twin(src.translation)[0])
    n_floor = int(cfg.num_points * 0.4)
    n_trans = cfg.num_points - n_floor
    s = rng.uniform(-1.0, L + cfg.max_view_distance, n_floor)
    floor1 = _corridor_points(rng, np.c_[s, np.zeros(n_floor)], np.tile([1.0, 0.0], (n_floor, 1)), n_floor, cfg)
    # transition tube points: random points on a cylinder around the helix
    th = rng.uniform(0, np.pi, n_trans)
    centre = np.c_[L + r * np.sin(th), r - r * np.cos(th), ch + h * th / np.pi]
    radial = np.c_[np.sin(th), -np.cos(th), np.zeros(n_trans)]
    phi = rng.uniform(0, 2 * np.pi, n_trans)
    rad = cfg.corridor_width / 2 + 0.3
    trans = centre + rad * (np.cos(phi)[:, None] * radial + np.sin(phi)[:, None] * np.array([0, 0, 1.0]))
    floor2 = twin(floor1)
    points = np.r_[floor1, trans, floor2]
    appearance = np.r_[np.arange(n_floor), n_floor + np.arange(n_trans), np.arange(n_floor)]
    return poses, points, appearance, {"floor1": set(range(n1)), "floor2": set(range(n1 + nt, 2 * n1 + nt))}


def _visible(pose: Pose, points, cfg):
    Xc = pose.to_camera(points)
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cfg.focal * Xc[:, 0] / z + cfg.width / 2.0
        v = cfg.focal * Xc[:, 1] / z + cfg.height / 2.0
    dist = np.linalg.norm(Xc, axis=1)
    m = (z > 0.2) & (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height) & (dist <= cfg.max_view_distance)
    return np.flatnonzero(m), np.c_[u, v]


def _in_gap(f, gaps):
    return any(a <= f <= b for a, b in gaps)


def generate(cfg: ScenarioConfig) -> Dataset:
    """Build a deterministic synthetic dataset for ``cfg``."""
    rng = np.random.default_rng([cfg.seed, 0])
    builder = {"box-cloud": _box_cloud, "corridor-loop": _corridor_loop, "duplicated-corridor": _duplicated_corridor}
    poses, points, appearance, floors = builder[cfg.world](cfg, rng)

    # express everything relative to the first camera
    T = inverse(poses[0])
    poses = {i: compose(T, p) for i, p in poses.items()}
    points = T.transform(points)

    features, feature_points = {}, {}
    for f in sorted(poses):
        ids, uv = _visible(poses[f], points, cfg)
        frng = np.random.default_rng([cfg.seed, 1, f])
        if _in_gap(f, cfg.texture_gaps) and len(ids) > cfg.gap_max_features:
            ids = np.sort(frng.choice(ids, size=cfg.gap_max_features, replace=False))
        if len(ids) == 0:
            raise GenerationError(f"frame {f} observes no points; adjust the scenario")
        ids = frng.permutation(ids)
        xy = uv[ids] + frng.normal(size=(len(ids), 2)) * cfg.sigma_px
        features[f] = xy
        feature_points[f] = ids

    vio = simulate_vio(poses, cfg.vio_sigma_rot_deg, cfg.vio_sigma_t, seed=[cfg.seed, 2])
    ds = Dataset(cfg, cfg.intrinsics, poses, points, appearance, features, feature_points, vio)
    if floors:
        A = ds.appearance_covisibility()
        for i in floors["floor1"]:
            for j in floors["floor2"]:
                if A[i, j] >= 8:
                    ds.doppelganger_pairs.add((min(i, j), max(i, j)))
    return ds


def simulate_vio(gt_poses, sigma_rot_deg: float, sigma_t: float, seed=0) -> VioSequence:
    """Integrate ground-truth frame-to-frame motion corrupted by Gaussian noise.

    Each relative pose is right-multiplied by ``(Exp(n_r), n_t)`` with
    per-axis standard deviations ``sigma_rot_deg`` (degrees) and ``sigma_t``
    (metres). The first VIO pose equals the first ground-truth pose.
    """
    if isinstance(gt_poses, dict):
        frames = sorted(gt_poses)
        seq = [gt_poses[f] for f in frames]
    else:
        seq = list(gt_poses)
        frames = list(range(len(seq)))
    if not seq:
        raise ValueError("need at least one pose")
    if sigma_rot_deg == 0 and sigma_t == 0:
        # integrating exact relative motion reproduces the input; skip the round-off
        return VioSequence({f: Pose(p.rotation, p.translation, "vio") for f, p in zip(frames, seq)})
    rng = np.random.default_rng(seed)
    n = len(seq) - 1
    nr = rng.normal(size=(n, 3)) * np.deg2rad(sigma_rot_deg)
    nt = rng.normal(size=(n, 3)) * sigma_t
    out = {frames[0]: seq[0]}
    cur = seq[0]
    for k in range(n):
        rel = compose(relative_pose(seq[k], seq[k + 1]), Pose(Rotation.from_rotvec(nr[k]), nt[k]))
        cur = compose(cur, rel)
        out[frames[k + 1]] = Pose(cur.rotation, cur.translation, "vio")
    return VioSequence(out)


# ---------------------------------------------------------------------------
# retrieval providers


class CovisibilityRetrieval:
    """Ground-truth retrieval: frames ranked by shared scene points.

    Frames within ``exclude_window`` of the query are skipped, since temporal
    pairing already covers them.
    """

    def __init__(self, dataset: Dataset, exclude_window: int = 0, min_shared: int = 1):
        self.C = dataset.covisibility()
        self.frames = np.array(dataset.frames)
        self.exclude = exclude_window
        self.min_shared = min_shared

    def query(self, frame, k):
        row = self.C[frame].astype(float).copy()
        row[np.abs(self.frames - frame) <= self.exclude] = -1
        order = np.argsort(-row, kind="stable")
        return [int(self.frames[i]) for i in order[:k] if row[i] >= self.min_shared]


class ConfusingRetrieval(CovisibilityRetrieval):
    """Retrieval fooled by look-alike structure: ranks by appearance overlap."""

    def __init__(self, dataset: Dataset, exclude_window: int = 0, min_shared: int = 1):
        super().__init__(dataset, exclude_window, min_shared)
        self.C = dataset.appearance_covisibility()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class AteResult:
    rmse: float
    median: float
    errors: np.ndarray
    frames: list
    scale: float = 1.0

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "median": self.median, "num_frames": len(self.frames), "scale": self.scale}


def _positions(poses):
    if isinstance(poses, VioSequence):
        poses = poses.poses
    return {f: (p.translation if isinstance(p, Pose) else np.asarray(p, float)) for f, p in poses.items()}


def evaluate_ate(estimated, reference, with_scale: bool = True) -> AteResult:
    """Absolute trajectory error after similarity (or rigid) alignment."""
    est, ref = _positions(estimated), _positions(reference)
    common = sorted(set(est) & set(ref))
    if len(common) < 3:
        raise EvaluationError(f"need at least 3 common frames, got {len(common)}")
    E = np.array([est[f] for f in common])
    G = np.array([ref[f] for f in common])
    try:
        s, R, t = umeyama_align(E, G, with_scale=with_scale)
    except GeometryError as exc:
        raise EvaluationError(str(exc)) from exc
    err = np.linalg.norm(G - (s * E @ R.matrix().T + t), axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), float(np.median(err)), err, common, float(s))
