"""Candidate pair generation and two-step geometric verification.

Each candidate pair is first screened with the fundamental matrix implied by
the VIO relative pose: matches whose epipolar error exceeds ``t_ee`` count as
outliers and the pair is dropped when their share exceeds
``max_outlier_ratio``. Surviving matches then go through a RANSAC
fundamental-matrix fit, and only pairs with enough inliers are accepted.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from ._kernels import ransac_fundamental_kernel
from .geometry import DegenerateMotionError, Intrinsics, Pose, epipolar_error, fundamental_from_prior
from .model import VioSequence

log = logging.getLogger(__name__)

Pair = tuple[int, int]


class PairStatus(str, enum.Enum):
    PENDING = "pending"
    REJECTED_BY_VIO = "rejected_by_vio"
    REJECTED_BY_RANSAC = "rejected_by_ransac"
    ACCEPTED = "accepted"


@dataclass
class PairingConfig:
    n1_temporal: int = 40
    n2_retrieval: int = 30
    t_ee: float = 20.0
    max_outlier_ratio: float = 0.5
    ransac_threshold: float = 2.0
    ransac_max_iters: int = 2000
    min_inliers: int = 15
    ransac_confidence: float = 0.999

    def __post_init__(self):
        if self.n1_temporal < 0 or self.n2_retrieval < 0:
            raise ValueError("neighbour counts must be non-negative")
        if self.t_ee <= 0:
            raise ValueError("t_ee must be positive")
        if not 0.0 <= self.max_outlier_ratio <= 1.0:
            raise ValueError("max_outlier_ratio must lie in [0, 1]")
        if self.ransac_threshold <= 0 or self.ransac_max_iters <= 0 or self.min_inliers <= 0:
            raise ValueError("RANSAC settings must be positive")


@dataclass
class MatchSet:
    """Tentative one-to-one matches between two frames.

    ``idx`` holds ``(feature in a, feature in b)`` rows; ``xa`` and ``xb`` are
    the corresponding pixel coordinates.
    """

    frame_a: int
    frame_b: int
    idx: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    xa: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    xb: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.int64).reshape(-1, 2)
        self.xa = np.asarray(self.xa, dtype=float).reshape(-1, 2)
        self.xb = np.asarray(self.xb, dtype=float).reshape(-1, 2)
        if not (len(self.idx) == len(self.xa) == len(self.xb)):
            raise ValueError("match indices and coordinates differ in length")
        for side in (0, 1):
            if len(np.unique(self.idx[:, side])) != len(self.idx):
                raise ValueError(f"duplicate feature index in frame {(self.frame_a, self.frame_b)[side]}")

    def __len__(self):
        return len(self.idx)

    @property
    def pair(self) -> Pair:
        return (self.frame_a, self.frame_b)

    @classmethod
    def from_features(cls, frame_a, frame_b, idx, feats_a, feats_b) -> MatchSet:
        """Resolve pixel coordinates through per-frame feature tables (row = feature index)."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 2)
        return cls(frame_a, frame_b, idx, np.asarray(feats_a)[idx[:, 0]], np.asarray(feats_b)[idx[:, 1]])

    @classmethod
    def empty(cls, frame_a, frame_b) -> MatchSet:
        return cls(frame_a, frame_b)

    def subset(self, mask) -> MatchSet:
        return MatchSet(self.frame_a, self.frame_b, self.idx[mask], self.xa[mask], self.xb[mask])


@dataclass
class PairVerdict:
    status: PairStatus
    inlier_mask: np.ndarray
    ee_outlier_ratio: float | None = None
    ransac_inlier_count: int = 0
    F: np.ndarray | None = None

    @property
    def accepted(self) -> bool:
        return self.status == PairStatus.ACCEPTED

    @property
    def num_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


class RetrievalProvider(Protocol):
    def query(self, frame: int, k: int) -> list[int]:
        """Up to ``k`` frame ids ranked by visual similarity to ``frame``."""
        ...


class StaticRetrieval:
    """Retrieval backed by a precomputed ranking per frame."""

    def __init__(self, ranking: Mapping[int, list[int]]):
        self.ranking = {k: list(v) for k, v in ranking.items()}

    def query(self, frame, k):
        return self.ranking.get(frame, [])[:k]


def generate_candidates(frames, retrieval: RetrievalProvider | None, cfg: PairingConfig) -> list[Pair]:
    """Temporal neighbours plus retrieval neighbours, each pair once as (earlier, later)."""
    frames = list(frames)
    known = set(frames)
    pairs = set()
    for i, f in enumerate(frames):
        for g in frames[i + 1 : i + 1 + cfg.n1_temporal]:
            pairs.add((f, g))
        if retrieval is not None and cfg.n2_retrieval > 0:
            for g in retrieval.query(f, cfg.n2_retrieval)[: cfg.n2_retrieval]:
                if g != f and g in known:
                    pairs.add((min(f, g), max(f, g)))
    return sorted(pairs)


# ---------------------------------------------------------------------------
# VIO screening


def vio_screen(pair: MatchSet, prior_rel: Pose, K: Intrinsics, cfg: PairingConfig) -> PairVerdict:
    """Screen matches with the epipolar geometry predicted by the VIO prior.

    ``prior_rel`` maps frame-a camera coordinates into frame b, i.e.
    ``relative_pose(vio[b], vio[a])``.
    """
    n = len(pair)
    if n == 0:
        return PairVerdict(PairStatus.REJECTED_BY_VIO, np.zeros(0, dtype=bool), ee_outlier_ratio=1.0)
    try:
        F = fundamental_from_prior(K, prior_rel)
    except DegenerateMotionError:
        return PairVerdict(PairStatus.PENDING, np.ones(n, dtype=bool))
    ee = epipolar_error(F, pair.xa, pair.xb)
    outlier = ~(ee <= cfg.t_ee)
    ratio = float(outlier.mean())
    status = PairStatus.REJECTED_BY_VIO if ratio > cfg.max_outlier_ratio else PairStatus.PENDING
    return PairVerdict(status, ~outlier, ee_outlier_ratio=ratio, F=F)


# ---------------------------------------------------------------------------
# RANSAC


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def symmetric_distances(F, xa, xb):
    """max(d(x_b, F x_a), d(x_a, F^T x_b)) for one or a batch of F."""
    ha = np.c_[xa, np.ones(len(xa))].T
    hb = np.c_[xb, np.ones(len(xb))].T
    lb = F @ ha
    la = np.swapaxes(F, -1, -2) @ hb
    num = np.abs((lb * hb).sum(axis=-2))
    den = np.sqrt(np.minimum(lb[..., 0, :] ** 2 + lb[..., 1, :] ** 2, la[..., 0, :] ** 2 + la[..., 1, :] ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num / den
    return np.where(den > 0, d, np.inf)


def ransac_fundamental(pair: MatchSet, cfg: PairingConfig, rng=None):
    """RANSAC fundamental matrix with the normalized 8-point solver.

    Hypotheses are scored with the truncated quadratic (MSAC) cost on the
    symmetric epipolar distance; each new best model is refit on its inliers
    before the adaptive iteration bound is updated.
    Returns ``(F, verdict)``; ``F`` is ``None`` when no model was found.
    """
    rng = np.random.default_rng(rng)
    n = len(pair)
    rejected = PairVerdict(PairStatus.REJECTED_BY_RANSAC, np.zeros(n, dtype=bool))
    if n < 8:
        return None, rejected
    Ta, Tb = _hartley(pair.xa), _hartley(pair.xb)
    na = pair.xa @ Ta[:2, :2].T + Ta[:2, 2]
    nb = pair.xb @ Tb[:2, :2].T + Tb[:2, 2]
    xa, xb = np.ascontiguousarray(pair.xa, float), np.ascontiguousarray(pair.xb, float)
    thr = cfg.ransac_threshold

    seed = int(rng.integers(0, 2**31 - 1))
    F, mask, found = ransac_fundamental_kernel(
        na, nb, xa, xb, Ta, Tb, float(thr), int(cfg.ransac_max_iters), float(cfg.ransac_confidence), seed
    )
    if not found or mask.sum() < 8:
        return None, rejected
    F = F / np.linalg.norm(F)
    count = int(mask.sum())
    status = PairStatus.ACCEPTED if count >= cfg.min_inliers else PairStatus.REJECTED_BY_RANSAC
    return F, PairVerdict(status, mask, ransac_inlier_count=count, F=F)


# ---------------------------------------------------------------------------
# two-step verification


def verify_pair(ms: MatchSet, vio: VioSequence | None, K: Intrinsics, cfg: PairingConfig, seed=0, screening=True):
    """Verify one pair. With ``screening=False`` only RANSAC runs (ablation)."""
    a, b = ms.frame_a, ms.frame_b
    n = len(ms)
    ratio = None
    keep = np.ones(n, dtype=bool)
    if screening:
        v = vio_screen(ms, vio.relative(b, a), K, cfg)
        if v.status == PairStatus.REJECTED_BY_VIO:
            return v
        ratio, keep = v.ee_outlier_ratio, v.inlier_mask
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(a), int(b)])
    F, rv = ransac_fundamental(ms.subset(keep), cfg, rng)
    mask = np.zeros(n, dtype=bool)
    mask[np.flatnonzero(keep)] = rv.inlier_mask
    return PairVerdict(rv.status, mask, ee_outlier_ratio=ratio, ransac_inlier_count=rv.ransac_inlier_count, F=F)


def verify_pairs(
    candidates,
    matchsets: Mapping[Pair, MatchSet] | Callable[[Pair], MatchSet],
    vio: VioSequence | None,
    K: Intrinsics,
    cfg: PairingConfig,
    seed: int = 0,
    screening: bool = True,
) -> dict[Pair, tuple[MatchSet, PairVerdict]]:
    """Run the two-step verifier over all candidates.

    ``matchsets`` is a mapping or a callable returning the MatchSet of a pair;
    missing pairs count as empty. Returns ``pair -> (matchset, verdict)``.
    """
    if screening and vio is None:
        raise ValueError("VIO screening needs a VioSequence")
    lookup = matchsets if callable(matchsets) else (lambda p: matchsets.get(p))
    out = {}
    for pair in candidates:
        ms = lookup(pair)
        if ms is None:
            ms = MatchSet.empty(*pair)
        out[pair] = (ms, verify_pair(ms, vio, K, cfg, seed, screening))
    if log.isEnabledFor(logging.DEBUG):
        counts = {}
        for _, v in out.values():
            counts[v.status.value] = counts.get(v.status.value, 0) + 1
        log.debug("verified %d pairs: %s", len(out), counts)
    return out
