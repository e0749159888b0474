"""Batched incremental reconstruction driven by VIO chaining.

Frames are processed in consecutive batches of ``k``. Each batch is placed in
the model by chaining VIO relative poses from the last registered frame,
new tracks are triangulated from verified pairs, all poses and points are
refined by bundle adjustment and unstable points are filtered.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import bundle_adjust
from .bundle_adjust import BaConfig
from .geometry import GeometryError, Intrinsics, Pose, compose, triangulate
from .model import Reconstruction, Track, VioSequence
from .verification import PairingConfig, PairStatus, generate_candidates, verify_pairs

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass
class BatchConfig:
    batch_size_k: int = 50
    max_reproj_error: float = 4.0
    min_tri_angle: float = 1.5

    def __post_init__(self):
        if self.batch_size_k < 2:
            raise ValueError("batch_size_k must be >= 2")
        if self.max_reproj_error <= 0 or self.min_tri_angle < 0:
            raise ValueError("filter thresholds must be positive")


def register_batch(model: Reconstruction, batch_frames, vio: VioSequence) -> dict[int, Pose]:
    """Place a batch of consecutive frames in the model by VIO chaining.

    The very first frame of the first batch becomes the world origin and the
    gauge anchor. Later batches hang off the latest registered frame (its
    current, bundle-adjusted pose). Returns the newly assigned poses.
    """
    frames = [int(f) for f in batch_frames]
    if not frames:
        return {}
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise RegistrationError(f"batch frames must be strictly increasing: {frames}")
    missing = [f for f in frames if f not in vio]
    if missing:
        raise RegistrationError(f"no VIO pose for frame(s) {missing}")
    new = {}
    if not model.poses:
        new[frames[0]] = Pose.identity()
        model.gauge_frames = {frames[0]}
        prev, todo = frames[0], frames[1:]
    else:
        prev = max(model.poses)
        if prev >= frames[0]:
            raise RegistrationError(f"frame {frames[0]} is not after the last registered frame {prev}")
        if prev not in vio:
            raise RegistrationError(f"no VIO pose for anchor frame {prev}")
        todo = frames
    anchor_pose = model.poses.get(prev, new.get(prev))
    cur = anchor_pose
    for f in todo:
        cur = compose(cur, vio.relative(prev, f))
        new[f] = cur
        prev = f
    model.poses.update(new)
    model.registered_batches += 1
    return new


# ---------------------------------------------------------------------------
# track building


def _accepted_edges(model, verdicts, matchsets, usable):
    """Node pairs ``(frame, feature)`` from the inliers of newly usable pairs."""
    fa, ia, fb, ib = [], [], [], []
    pairs = sorted(p for p in usable if p not in model.consumed_pairs)
    for p in pairs:
        model.consumed_pairs.add(p)
        ms, v = matchsets[p], verdicts[p]
        if not v.accepted:
            continue
        idx = ms.idx[v.inlier_mask]
        model.pair_counts[p] = len(idx)
        fa.append(np.full(len(idx), p[0]))
        fb.append(np.full(len(idx), p[1]))
        ia.append(idx[:, 0])
        ib.append(idx[:, 1])
    if not fa:
        return np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64)
    return np.c_[np.concatenate(fa), np.concatenate(ia)], np.c_[np.concatenate(fb), np.concatenate(ib)]


def _split_conflicts(edges_a, edges_b, seed_track):
    """Sequential union that refuses merges putting two features of one frame together.

    ``seed_track`` maps nodes to existing track ids; two different existing
    tracks are never merged. Returns components as lists of nodes.
    """
    parent = {}
    frames = {}  # root -> {frame: feature}
    track = {}  # root -> existing track id or None

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def make(x):
        if x not in parent:
            parent[x] = x
            frames[x] = {x[0]: x[1]}
            track[x] = seed_track.get(x)

    for a, b in zip(edges_a, edges_b):
        a, b = (int(a[0]), int(a[1])), (int(b[0]), int(b[1]))
        make(a)
        make(b)
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        fa, fb = frames[ra], frames[rb]
        if len(fa) < len(fb):
            ra, rb, fa, fb = rb, ra, fb, fa
        if any(f in fa and fa[f] != feat for f, feat in fb.items()):
            continue
        ta, tb = track[ra], track[rb]
        if ta is not None and tb is not None and ta != tb:
            continue
        parent[rb] = ra
        fa.update(fb)
        track[ra] = ta if ta is not None else tb
        del frames[rb], track[rb]
    comps = {}
    for x in parent:
        comps.setdefault(find(x), []).append(x)
    return list(comps.values())


def build_tracks(edges_a, edges_b, seed_track=None):
    """Group matched ``(frame, feature)`` nodes into conflict-free tracks.

    Connected components are found on the match graph. Components in which a
    frame contributes two different features are rebuilt by a sequential
    union that drops the conflicting links, which splits them into
    consistent parts. Returns a list of node lists.
    """
    seed_track = seed_track or {}
    edges_a = np.asarray(edges_a, np.int64).reshape(-1, 2)
    edges_b = np.asarray(edges_b, np.int64).reshape(-1, 2)
    if len(edges_a) == 0:
        return []
    nodes, inv = np.unique(np.r_[edges_a, edges_b], axis=0, return_inverse=True)
    inv = inv.ravel()
    m = len(edges_a)
    ea, eb = inv[:m], inv[m:]
    # existing tracks act as extra hub nodes so links through them are seen
    tids = np.array([seed_track.get((int(f), int(i)), -1) for f, i in nodes])
    has = tids >= 0
    n = len(nodes)
    ut, tinv = np.unique(tids[has], return_inverse=True)
    hub_a = np.flatnonzero(has)
    hub_b = n + tinv
    rows = np.r_[ea, hub_a]
    cols = np.r_[eb, hub_b]
    G = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + len(ut), n + len(ut)))
    _, labels = connected_components(G, directed=False)
    lab = labels[:n]
    # conflict: a component holding two nodes of the same frame, or two existing tracks
    order = np.lexsort((nodes[:, 0], lab))
    sl, sf = lab[order], nodes[order, 0]
    dup = (sl[1:] == sl[:-1]) & (sf[1:] == sf[:-1])
    bad = set(sl[1:][dup].tolist())
    if has.any():
        tl = np.c_[lab[has], tids[has]]
        tl = np.unique(tl, axis=0)
        multi = tl[1:, 0][tl[1:, 0] == tl[:-1, 0]]
        bad |= set(multi.tolist())
    comps = []
    good = ~np.isin(lab, list(bad)) if bad else np.ones(n, bool)
    gi = np.flatnonzero(good)
    if len(gi):
        go = gi[np.argsort(lab[gi], kind="stable")]
        splits = np.flatnonzero(np.diff(lab[go])) + 1
        for grp in np.split(go, splits):
            comps.append([(int(nodes[k, 0]), int(nodes[k, 1])) for k in grp])
    if bad:
        emask = np.isin(lab[ea], list(bad))
        comps.extend(_split_conflicts(edges_a[emask], edges_b[emask], seed_track))
    return comps


def triangulate_batch(model: Reconstruction, verdicts, matchsets, features, min_tri_angle: float = 1.5) -> list[int]:
    """Add tracks from accepted pairs whose frames are both registered.

    ``verdicts`` maps pair -> PairVerdict, ``matchsets`` maps pair ->
    MatchSet (the pair's tentative matches; only inliers are used) and
    ``features`` maps frame -> ``(n, 2)`` pixel table. Pairs are
    consumed once. Nodes already in a track extend that track; new components
    with two or more observations are triangulated. Low-parallax and
    behind-camera candidates are skipped. Returns the ids of new tracks.
    """
    registered = model.poses
    usable = [p for p in verdicts if p[0] in registered and p[1] in registered]
    ea, eb = _accepted_edges(model, verdicts, matchsets, usable)
    comps = build_tracks(ea, eb, model.node_track)
    new_ids = []
    K = model.intrinsics
    for comp in comps:
        comp.sort()
        tid = next((model.node_track[x] for x in comp if x in model.node_track), None)
        if tid is not None:
            track = model.tracks[tid]
            for f, i in comp:
                if f not in track.observations and (f, i) not in model.node_track:
                    track.add(f, i, np.asarray(features[f][i], float))
                    model.node_track[(f, i)] = tid
            continue
        if len(comp) < 2:
            continue
        obs = [(model.poses[f], np.asarray(features[f][i], float)) for f, i in comp]
        try:
            X = triangulate(obs, K, min_tri_angle)
        except GeometryError:
            continue
        track = Track(X)
        for (f, i), (_, xy) in zip(comp, obs):
            track.add(f, i, xy)
        new_ids.append(model.add_track(track))
    return new_ids


# ---------------------------------------------------------------------------
# filtering


def _observation_arrays(model: Reconstruction):
    tids, frames, xy = [], [], []
    for tid, tr in model.tracks.items():
        for f, (_, z) in tr.observations.items():
            tids.append(tid)
            frames.append(f)
            xy.append(z)
    return np.array(tids, np.int64), np.array(frames, np.int64), np.array(xy, float).reshape(-1, 2)


def _pose_arrays(model, frames):
    uf, inv = np.unique(frames, return_inverse=True)
    R = np.array([model.poses[f].R for f in uf]).reshape(-1, 3, 3)
    t = np.array([model.poses[f].translation for f in uf]).reshape(-1, 3)
    return R[inv], t[inv]


def filter_points(model: Reconstruction, cfg: BatchConfig | None = None) -> list[int]:
    """Drop bad observations, then tracks that are too short or too flat.

    An observation is removed when its reprojection error exceeds
    ``max_reproj_error`` or the point is not in front of the camera. A track
    is removed when fewer than two observations survive or when the largest
    angle between any two of its viewing rays is below ``min_tri_angle``.
    Returns the removed track ids.
    """
    cfg = cfg or BatchConfig()
    if not model.tracks:
        return []
    tids, frames, z = _observation_arrays(model)
    R, t = _pose_arrays(model, frames)
    X = np.array([model.tracks[i].point for i in tids])
    Xc = np.einsum("nji,nj->ni", R, X - t)
    K = model.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / Xc[:, 2] + K.cx
        v = K.fy * Xc[:, 1] / Xc[:, 2] + K.cy
    err = np.hypot(u - z[:, 0], v - z[:, 1])
    bad = ~(Xc[:, 2] > 0) | ~(err <= cfg.max_reproj_error)
    for tid, f in zip(tids[bad].tolist(), frames[bad].tolist()):
        model.remove_observation(tid, f)

    keep = ~bad
    tids, frames, X, t = tids[keep], frames[keep], X[keep], t[keep]
    rays = X - t
    norms = np.linalg.norm(rays, axis=1)
    u = rays / np.where(norms > 0, norms, 1.0)[:, None]
    removed = []
    min_cos = np.cos(np.radians(cfg.min_tri_angle))
    order = np.argsort(tids, kind="stable")
    tids, u = tids[order], u[order]
    starts = np.flatnonzero(np.r_[True, tids[1:] != tids[:-1]]) if len(tids) else np.zeros(0, int)
    ends = np.r_[starts[1:], len(tids)]
    seen = set()
    for s, e in zip(starts, ends):
        tid = int(tids[s])
        seen.add(tid)
        if e - s < 2:
            removed.append(tid)
            continue
        U = u[s:e]
        # cheap accept: any ray pair already wider than the threshold against the first ray
        c0 = U[1:] @ U[0]
        if c0.min() < min_cos:
            continue
        if (U @ U.T).min() >= min_cos:
            removed.append(tid)
    removed.extend(t for t in model.tracks if t not in seen)
    for tid in removed:
        model.remove_track(tid)
    return sorted(removed)


# ---------------------------------------------------------------------------
# driver


@dataclass
class BatchReport:
    batch: int
    frames: list
    pairs_accepted: int
    pairs_rejected_by_vio: int
    pairs_rejected_by_ransac: int
    new_tracks: int
    removed_tracks: int
    num_tracks: int
    ba_initial_cost: float
    ba_final_cost: float
    ba_relative_cost: float
    ba_iterations: int
    ba_termination: str
    wall_time: float


@dataclass
class RunReport:
    num_frames: int = 0
    num_candidates: int = 0
    verification_time: float = 0.0
    total_time: float = 0.0
    pairs_by_status: dict = field(default_factory=dict)
    batches: list = field(default_factory=list)

    @property
    def num_ba_invocations(self) -> int:
        return len(self.batches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["num_ba_invocations"] = self.num_ba_invocations
        return d


def reconstruct(
    dataset,
    pairing: PairingConfig | None = None,
    batch: BatchConfig | None = None,
    ba: BaConfig | None = None,
    retrieval=None,
    seed: int = 0,
    screening: bool = True,
):
    """Run the full pipeline and return ``(model, report)``.

    ``dataset`` needs ``frames``, ``features`` (frame -> ``(n, 2)`` pixels),
    ``vio`` (VioSequence), ``intrinsics`` and ``matchset(a, b)``.
    Verification runs once over all candidate pairs; then every batch is
    registered, triangulated, bundle adjusted and filtered in turn.
    """
    pairing = pairing or PairingConfig()
    batch = batch or BatchConfig()
    ba = ba or BaConfig()
    t_start = time.perf_counter()
    frames = sorted(int(f) for f in dataset.frames)
    model = Reconstruction(Intrinsics.from_array(dataset.intrinsics.as_array()))
    report = RunReport(num_frames=len(frames))
    if not frames:
        return model, report

    candidates = generate_candidates(frames, retrieval, pairing)
    report.num_candidates = len(candidates)
    matchsets = {p: dataset.matchset(*p) for p in candidates}
    t0 = time.perf_counter()
    verdicts_full = verify_pairs(candidates, matchsets, dataset.vio, model.intrinsics, pairing, seed, screening)
    report.verification_time = time.perf_counter() - t0
    verdicts = {p: v for p, (_, v) in verdicts_full.items()}
    counts = {s.value: 0 for s in PairStatus if s != PairStatus.PENDING}
    for v in verdicts.values():
        counts[v.status.value] += 1
    report.pairs_by_status = counts

    k = batch.batch_size_k
    for bi, start in enumerate(range(0, len(frames), k)):
        tb = time.perf_counter()
        bframes = frames[start : start + k]
        register_batch(model, bframes, dataset.vio)
        in_batch = set(bframes)
        newly = [p for p in verdicts if p[1] in in_batch or p[0] in in_batch]
        newly = [p for p in newly if p[0] in model.poses and p[1] in model.poses and p not in model.consumed_pairs]
        stat = [verdicts[p].status for p in newly]
        new_ids = triangulate_batch(model, verdicts, matchsets, dataset.features, batch.min_tri_angle)
        model, ba_rep = bundle_adjust.solve(model, dataset.vio, ba)
        removed = filter_points(model, batch)
        report.batches.append(
            BatchReport(
                batch=bi,
                frames=[bframes[0], bframes[-1]],
                pairs_accepted=stat.count(PairStatus.ACCEPTED),
                pairs_rejected_by_vio=stat.count(PairStatus.REJECTED_BY_VIO),
                pairs_rejected_by_ransac=stat.count(PairStatus.REJECTED_BY_RANSAC),
                new_tracks=len(new_ids),
                removed_tracks=len(removed),
                num_tracks=len(model.tracks),
                ba_initial_cost=ba_rep.initial_cost,
                ba_final_cost=ba_rep.final_cost,
                ba_relative_cost=ba_rep.final_relative_cost,
                ba_iterations=ba_rep.iterations,
                ba_termination=ba_rep.termination,
                wall_time=time.perf_counter() - tb,
            )
        )
        log.info(
            "batch %d frames %d-%d: %d tracks, BA %.4g -> %.4g (%s, %d it)",
            bi, bframes[0], bframes[-1], len(model.tracks), ba_rep.initial_cost, ba_rep.final_cost,
            ba_rep.termination, ba_rep.iterations,
        )
    report.total_time = time.perf_counter() - t_start
    return model, report
