"""Bundle adjustment with VIO relative-pose constraints.

Minimizes

    sum_obs rho(|z - pi(p_i, X_j, K)|^2) + sum_i w_i |Log(prior_i^-1 * p_i^-1 * p_i+1)|^2

where ``rho`` is the Cauchy loss ``c^2 log(1 + s / c^2)`` and
``w_i = alpha * exp(-beta * c_i)`` shrinks as the number of verified
correspondences between consecutive frames grows. The solver is a
Levenberg-Marquardt loop on sparse normal equations; point blocks are
eliminated with the Schur complement before each linear solve.

Pose updates are right-multiplicative: ``p <- p * Exp(delta)`` with
``delta = [rho, omega]``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import lie
from ._kernels import accumulate_visual, back_substitute, schur_blocks, schur_pattern
from .geometry import Intrinsics, Pose, Rotation, project, relative_pose
from .model import Reconstruction, VioSequence

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
# cost charged to an observation that fell behind its camera
BEHIND_PENALTY_PX = 1e3
MIN_DIAGONAL, MAX_DIAGONAL = 1e-6, 1e32
MAX_LAMBDA = 1e16
DENSE_SCHUR_LIMIT = 1200
# above this many free cameras the dense block index of the compiled Schur path gets too large
COMPILED_SCHUR_MAX_CAMERAS = 4000


class BundleAdjustmentError(RuntimeError):
    pass


@dataclass
class BaConfig:
    alpha: float = 1e3
    beta: float = 0.003
    cauchy_scale: float = 1.0
    max_iterations: int = 100
    function_tolerance: float = 1e-8
    parameter_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-10
    optimize_intrinsics: bool = False
    initial_lambda: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.cauchy_scale <= 0:
            raise ValueError("cauchy_scale must be positive")


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    initial_visual_cost: float = 0.0
    initial_relative_cost: float = 0.0
    final_visual_cost: float = 0.0
    final_relative_cost: float = 0.0
    termination: str = ""
    diverged: bool = False
    num_cameras: int = 0
    num_points: int = 0
    num_visual_residuals: int = 0
    num_relative_residuals: int = 0
    wall_time: float = 0.0
    cost_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def cauchy_loss(s, c: float):
    c2 = c * c
    return c2 * np.log1p(np.asarray(s) / c2)


def adaptive_weight(c, cfg: BaConfig) -> float:
    """Relative-pose weight for ``c`` verified correspondences."""
    if c < 0:
        raise ValueError("correspondence count must be non-negative")
    return cfg.alpha * float(np.exp(-cfg.beta * c))


# ---------------------------------------------------------------------------
# vectorized residual blocks


def _visual_terms(R, t, X, K, z, jacobians=True):
    """Residuals ``z - pi`` (n, 2) and Jacobians wrt pose, point, intrinsics."""
    Xc = np.einsum("nji,nj->ni", R, X - t)
    depth = Xc[:, 2]
    front = depth > MIN_DEPTH
    inv = 1.0 / np.where(front, depth, 1.0)
    xn, yn = Xc[:, 0] * inv, Xc[:, 1] * inv
    fx, fy, cx, cy = K
    r = z - np.stack([fx * xn + cx, fy * yn + cy], axis=1)
    if not jacobians:
        return r, front
    n = len(z)
    dP = np.zeros((n, 2, 3))
    dP[:, 0, 0] = fx * inv
    dP[:, 0, 2] = -fx * xn * inv
    dP[:, 1, 1] = fy * inv
    dP[:, 1, 2] = -fy * yn * inv
    # r = z - pi;  dXc/drho = -I, dXc/domega = [Xc]x, dXc/dX = R^T
    J_pose = np.concatenate([dP, -dP @ lie.hat(Xc)], axis=2)
    J_point = -dP @ np.transpose(R, (0, 2, 1))
    J_K = np.zeros((n, 2, 4))
    J_K[:, 0, 0] = -xn
    J_K[:, 0, 2] = -1.0
    J_K[:, 1, 1] = -yn
    J_K[:, 1, 3] = -1.0
    return r, front, J_pose, J_point, J_K


def _relative_terms(Ra, ta, Rb, tb, Rp, tp, jacobians=True):
    """Residual ``Log(prior^-1 a^-1 b)`` (n, 6), validity mask, Jacobians."""
    RaT = np.transpose(Ra, (0, 2, 1))
    RpT = np.transpose(Rp, (0, 2, 1))
    RE = RpT @ RaT @ Rb
    tE = np.einsum("nij,nj->ni", RpT, np.einsum("nij,nj->ni", RaT, tb - ta) - tp)
    xi, angle = lie.se3_log(RE, tE)
    ok = np.pi - angle >= 1e-6
    if not ok.all():
        # nudge the difference off the pi singularity once, then give up on the block
        bad = ~ok
        RE[bad] = RE[bad] @ lie.so3_exp(np.array([1e-5, 0.0, 0.0]))
        xi[bad], angle[bad] = lie.se3_log(RE[bad], tE[bad])
        ok = np.pi - angle >= 1e-6
        xi[~ok] = 0.0
    if not jacobians:
        return xi, ok
    Jr_inv = lie.se3_right_jacobian_inv(xi)
    RbT = np.transpose(Rb, (0, 2, 1))
    ad = lie.se3_adjoint(RbT @ Ra, np.einsum("nij,nj->ni", RbT, ta - tb))
    J_a = -Jr_inv @ ad
    J_b = Jr_inv
    J_a[~ok] = 0.0
    J_b[~ok] = 0.0
    return xi, ok, J_a, J_b


# ---------------------------------------------------------------------------
# single-block API


def visual_residual(p: Pose, X, K: Intrinsics, z) -> np.ndarray:
    """Raw reprojection residual ``z - pi(p, X, K)`` in pixels."""
    return np.asarray(z, dtype=float) - project(p, X, K)


def visual_jacobians(p: Pose, X, K: Intrinsics, z):
    """Jacobians of :func:`visual_residual` wrt pose tangent, point and (fx, fy, cx, cy)."""
    _, front, Jp, Jx, Jk = _visual_terms(
        p.R[None], p.translation[None], np.asarray(X, float)[None], K.as_array(), np.asarray(z, float)[None]
    )
    if not front[0]:
        from .geometry import BehindCameraError

        raise BehindCameraError("point has non-positive depth in camera frame")
    return Jp[0], Jx[0], Jk[0]


def relative_residual(p_i: Pose, p_j: Pose, prior: Pose) -> np.ndarray:
    from .geometry import log_map

    return log_map(relative_pose(prior, relative_pose(p_i, p_j)))


def relative_jacobians(p_i: Pose, p_j: Pose, prior: Pose):
    _, ok, Ja, Jb = _relative_terms(
        p_i.R[None], p_i.translation[None], p_j.R[None], p_j.translation[None], prior.R[None], prior.translation[None]
    )
    return Ja[0], Jb[0]


# ---------------------------------------------------------------------------
# problem assembly


def _block_coo(row0, col0, blocks):
    n, a, b = blocks.shape
    rows = (row0[:, None, None] + np.arange(a)[None, :, None]) + np.zeros((1, 1, b), dtype=np.int64)
    cols = (col0[:, None, None] + np.arange(b)[None, None, :]) + np.zeros((1, a, 1), dtype=np.int64)
    return rows.ravel(), cols.ravel(), blocks.ravel()


def _block_sum(index, blocks, n):
    """Sum ``blocks[k]`` into slot ``index[k]`` of an ``(n, a, b)`` array."""
    shape = blocks.shape[1:]
    m = int(np.prod(shape))
    flat = (index[:, None] * m + np.arange(m)[None, :]).ravel()
    return np.bincount(flat, weights=blocks.reshape(-1), minlength=n * m).reshape((n,) + shape)


class _State:
    __slots__ = ("R", "t", "X", "K")

    def __init__(self, R, t, X, K):
        self.R, self.t, self.X, self.K = R, t, X, K


class BaProblem:
    """Arrays describing one bundle-adjustment problem built from a model."""

    def __init__(self, model: Reconstruction, vio: VioSequence | None, cfg: BaConfig):
        self.cfg = cfg
        self.frames = model.registered_frames
        if not self.frames:
            raise BundleAdjustmentError("no registered frames")
        fidx = {f: i for i, f in enumerate(self.frames)}
        self.fixed = np.array([f in model.gauge_frames for f in self.frames])
        if not self.fixed.any():
            raise BundleAdjustmentError("gauge anchor set is empty")
        self.free_index = np.full(len(self.frames), -1)
        self.free_index[~self.fixed] = np.arange((~self.fixed).sum())
        self.n_free = int((~self.fixed).sum())

        self.track_ids = []
        cams, pts, zs = [], [], []
        for tid in sorted(model.tracks):
            track = model.tracks[tid]
            obs = [(fidx[f], xy) for f, (_, xy) in track.observations.items() if f in fidx]
            if len(obs) < 2:
                continue
            j = len(self.track_ids)
            self.track_ids.append(tid)
            for ci, xy in obs:
                cams.append(ci)
                pts.append(j)
                zs.append(xy)
        self.cam = np.array(cams, dtype=np.int64)
        self.pt = np.array(pts, dtype=np.int64)
        self.z = np.array(zs, dtype=float).reshape(-1, 2)
        self.obs_free = self.free_index[self.cam] if len(self.cam) else np.zeros(0, dtype=np.int64)
        self.n_points = len(self.track_ids)

        self.rel_a, self.rel_b, priors, weights = [], [], [], []
        if cfg.alpha > 0 and vio is not None:
            for a, b in zip(self.frames[:-1], self.frames[1:]):
                if a not in vio or b not in vio:
                    raise BundleAdjustmentError(f"no VIO prior for frames {a}->{b}")
                w = adaptive_weight(model.correspondences(a, b), cfg)
                if w <= 0:
                    continue
                self.rel_a.append(fidx[a])
                self.rel_b.append(fidx[b])
                priors.append(vio.relative(a, b))
                weights.append(w)
        self.rel_a = np.array(self.rel_a, dtype=np.int64)
        self.rel_b = np.array(self.rel_b, dtype=np.int64)
        self.prior_R = np.array([p.R for p in priors]).reshape(-1, 3, 3)
        self.prior_t = np.array([p.translation for p in priors]).reshape(-1, 3)
        self.rel_sqrt_w = np.sqrt(np.array(weights, dtype=float))
        self.rel_weight = np.array(weights, dtype=float)

        self.n_intr = 4 if cfg.optimize_intrinsics else 0
        self.nc = 6 * self.n_free + self.n_intr

        poses = [model.poses[f] for f in self.frames]
        R = np.array([p.R for p in poses])
        t = np.array([p.translation for p in poses])
        X = np.array([model.tracks[tid].point for tid in self.track_ids], dtype=float).reshape(-1, 3)
        self.state = _State(R, t, X, model.intrinsics.as_array())
        # Without relative-pose terms a single pinned camera leaves the global
        # scale free; LM steps would drift along it, so hold the distance from
        # the anchor to the first free camera at its initial value.
        self.scale_gauge = None
        if len(self.rel_a) == 0 and self.fixed.sum() == 1 and self.n_free:
            a = int(np.flatnonzero(self.fixed)[0])
            f = int(np.flatnonzero(~self.fixed)[0])
            d0 = float(np.linalg.norm(t[f] - t[a]))
            if d0 > 1e-9:
                self.scale_gauge = (a, f, d0)
        self._schur = None
        self._rcm = None
        if self.n_intr == 0 and 0 < self.n_free <= COMPILED_SCHUR_MAX_CAMERAS and len(self.cam):
            self._prepare_schur()

    def _prepare_schur(self):
        """Group free-camera observations by point and fix the reduced-system layout."""
        m = np.flatnonzero(self.obs_free >= 0)
        order = np.argsort(self.pt[m], kind="stable")
        # observation indices of free cameras, sorted by point
        sorted_pos = m[order]
        ptr = np.r_[0, np.cumsum(np.bincount(self.pt[m], minlength=self.n_points))].astype(np.int64)
        cam = self.obs_free[m][order].astype(np.int64)
        fa, fb = self.free_index[self.rel_a], self.free_index[self.rel_b]
        both = (fa >= 0) & (fb >= 0)
        block_of, count = schur_pattern(ptr, cam, self.n_free, fa[both].astype(np.int64), fb[both].astype(np.int64))
        rows, cols = np.nonzero(block_of >= 0)
        indptr = np.r_[0, np.cumsum(np.bincount(rows, minlength=self.n_free))]
        self._schur = (sorted_pos, ptr, cam, block_of, count, cols, indptr)

    # -- cost ---------------------------------------------------------------

    def costs(self, s: _State):
        c = self.cfg.cauchy_scale
        visual = 0.0
        if len(self.cam):
            r, front = _visual_terms(s.R[self.cam], s.t[self.cam], s.X[self.pt], s.K, self.z, jacobians=False)
            sq = np.einsum("ni,ni->n", r, r)
            visual = float(cauchy_loss(sq[front], c).sum())
            visual += float((~front).sum() * cauchy_loss(BEHIND_PENALTY_PX**2, c))
        relative = 0.0
        if len(self.rel_a):
            xi, ok = _relative_terms(
                s.R[self.rel_a], s.t[self.rel_a], s.R[self.rel_b], s.t[self.rel_b], self.prior_R, self.prior_t, False
            )
            relative = float((self.rel_weight * np.einsum("ni,ni->n", xi, xi))[ok].sum())
        return visual + relative, visual, relative

    def check_finite(self):
        s = self.state
        if len(self.cam):
            r, front = _visual_terms(s.R[self.cam], s.t[self.cam], s.X[self.pt], s.K, self.z, jacobians=False)
            bad = ~np.all(np.isfinite(r), axis=1) & front
            bad |= ~np.all(np.isfinite(s.X[self.pt]), axis=1)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise BundleAdjustmentError(
                    f"non-finite visual residual: frame {self.frames[self.cam[k]]}, track {self.track_ids[self.pt[k]]}"
                )
        if len(self.rel_a):
            xi, _ = _relative_terms(
                s.R[self.rel_a], s.t[self.rel_a], s.R[self.rel_b], s.t[self.rel_b], self.prior_R, self.prior_t, False
            )
            bad = ~np.all(np.isfinite(xi), axis=1)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise BundleAdjustmentError(
                    f"non-finite relative residual: frames {self.frames[self.rel_a[k]]}->{self.frames[self.rel_b[k]]}"
                )

    # -- linearization ---------------------------------------------------------

    def linearize(self, s: _State):
        nc, P = self.nc, self.n_points
        c2 = self.cfg.cauchy_scale**2
        U_rows, U_cols, U_data = [], [], []
        gc = np.zeros(nc)
        V = np.zeros((P, 3, 3))
        gp = np.zeros((P, 3))
        W_rows = W_cols = W_data = np.zeros(0)
        wb = np.zeros((0, 6, 3))

        if len(self.cam) and not self.n_intr:
            Ucc, gcc, V, gp, wb = accumulate_visual(
                s.R, s.t, s.X, s.K, self.z, self.cam, self.pt, self.obs_free, self.n_free, c2, MIN_DEPTH
            )
            if self.n_free:
                base = 6 * np.arange(self.n_free)
                rr, cc, dd = _block_coo(base, base, Ucc)
                U_rows.append(rr), U_cols.append(cc), U_data.append(dd)
                gc[: 6 * self.n_free] += gcc.ravel()
            if self._schur is None:
                m = self.obs_free >= 0
                W_rows, W_cols, W_data = _block_coo(6 * self.obs_free[m], 3 * self.pt[m], wb[m])
        elif len(self.cam):
            r, front, Jc, Jp, Jk = _visual_terms(s.R[self.cam], s.t[self.cam], s.X[self.pt], s.K, self.z)
            sq = np.einsum("ni,ni->n", r, r)
            # Cauchy rho' = 1 / (1 + s/c^2); rho'' < 0 so only first-order rescaling
            sw = np.where(front, 1.0 / np.sqrt(1.0 + sq / c2), 0.0)
            r = r * sw[:, None]
            Jc = Jc * sw[:, None, None]
            Jp = Jp * sw[:, None, None]
            Jk = Jk * sw[:, None, None]

            V = _block_sum(self.pt, np.einsum("nki,nkj->nij", Jp, Jp), P)
            gp = _block_sum(self.pt, np.einsum("nki,nk->ni", Jp, r), P)

            m = self.obs_free >= 0
            fi = self.obs_free[m]
            Jcm = Jc[m]
            if len(fi):
                Ucc = _block_sum(fi, np.einsum("nki,nkj->nij", Jcm, Jcm), self.n_free)
                base = 6 * np.arange(self.n_free)
                rr, cc, dd = _block_coo(base, base, Ucc)
                U_rows.append(rr), U_cols.append(cc), U_data.append(dd)
                gc[: 6 * self.n_free] += _block_sum(fi, np.einsum("nki,nk->ni", Jcm, r[m]), self.n_free).ravel()

            wb = np.einsum("nki,nkj->nij", Jcm, Jp[m])
            W_rows, W_cols, W_data = _block_coo(6 * fi, 3 * self.pt[m], wb)
            if self.n_intr:
                k0 = 6 * self.n_free
                Ukk = np.einsum("nki,nkj->ij", Jk, Jk)
                rr, cc, dd = _block_coo(np.array([k0]), np.array([k0]), Ukk[None])
                U_rows.append(rr), U_cols.append(cc), U_data.append(dd)
                gc[k0:] += np.einsum("nki,nk->i", Jk, r)
                if len(fi):
                    Uck = _block_sum(fi, np.einsum("nki,nkj->nij", Jcm, Jk[m]), self.n_free)
                    base = 6 * np.arange(self.n_free)
                    rr, cc, dd = _block_coo(base, np.full(self.n_free, k0), Uck)
                    U_rows += [rr, cc]
                    U_cols += [cc, rr]
                    U_data += [dd, dd]
                wk = np.einsum("nki,nkj->nij", Jk, Jp)
                rr, cc, dd = _block_coo(np.full(len(wk), k0), 3 * self.pt, wk)
                W_rows = np.concatenate([W_rows, rr])
                W_cols = np.concatenate([W_cols, cc])
                W_data = np.concatenate([W_data, dd])

        if len(self.rel_a):
            xi, ok, Ja, Jb = _relative_terms(
                s.R[self.rel_a], s.t[self.rel_a], s.R[self.rel_b], s.t[self.rel_b], self.prior_R, self.prior_t
            )
            w = self.rel_sqrt_w[:, None]
            r6 = xi * w
            Ja = Ja * w[:, :, None]
            Jb = Jb * w[:, :, None]
            fa, fb = self.free_index[self.rel_a], self.free_index[self.rel_b]
            for f, J in ((fa, Ja), (fb, Jb)):
                m = f >= 0
                if m.any():
                    rr, cc, dd = _block_coo(6 * f[m], 6 * f[m], np.einsum("nki,nkj->nij", J[m], J[m]))
                    U_rows.append(rr), U_cols.append(cc), U_data.append(dd)
                    np.add.at(gc, (6 * f[m])[:, None] + np.arange(6), np.einsum("nki,nk->ni", J[m], r6[m]))
            m = (fa >= 0) & (fb >= 0)
            if m.any():
                blk = np.einsum("nki,nkj->nij", Ja[m], Jb[m])
                rr, cc, dd = _block_coo(6 * fa[m], 6 * fb[m], blk)
                U_rows += [rr, cc]
                U_cols += [cc, rr]
                U_data += [dd, dd]

        if U_rows:
            U = sp.csr_matrix(
                (np.concatenate(U_data), (np.concatenate(U_rows), np.concatenate(U_cols))), shape=(nc, nc)
            )
        else:
            U = sp.csr_matrix((nc, nc))
        W = sp.csr_matrix((W_data, (W_rows.astype(np.int64), W_cols.astype(np.int64))), shape=(nc, 3 * P))
        return U, gc, V, gp, W, wb

    # -- linear solve ------------------------------------------------------------

    def solve_step(self, lin, lam):
        U, gc, V, gp, W, wb = lin
        P = self.n_points
        dV = np.clip(np.diagonal(V, axis1=1, axis2=2), MIN_DIAGONAL, MAX_DIAGONAL)
        Vd = V + lam * dV[:, :, None] * np.eye(3)
        Vinv = np.linalg.inv(Vd) if P else np.zeros((0, 3, 3))
        dU = np.clip(U.diagonal(), MIN_DIAGONAL, MAX_DIAGONAL)
        S = U + sp.diags(lam * dU)
        rhs = -gc
        if self._schur is not None:
            sorted_pos, ptr, cam, block_of, count, cols, indptr = self._schur
            Wb = np.ascontiguousarray(wb[sorted_pos])
            blocks, corr = schur_blocks(ptr, cam, Wb, Vinv, gp, block_of, count, self.n_free)
            B = sp.bsr_matrix((blocks, cols, indptr), shape=(6 * self.n_free, 6 * self.n_free))
            S = (S - B).tocsr()
            rhs = rhs + corr.ravel()
        elif P and W.nnz:
            Vinv_sp = sp.bsr_matrix((Vinv, np.arange(P), np.arange(P + 1)), shape=(3 * P, 3 * P))
            Y = (W @ Vinv_sp).tocsr()
            S = S - Y @ W.T
            rhs = rhs + Y @ gp.ravel()
        dc = self._solve_spd(S, rhs) if self.nc else np.zeros(0)
        if self._schur is not None:
            dp = back_substitute(ptr, cam, Wb, Vinv, gp, dc.reshape(-1, 6))
        else:
            dp = np.einsum("nij,nj->ni", Vinv, -gp - (W.T @ dc).reshape(P, 3)) if P else np.zeros((0, 3))
        return dc, dp

    def _solve_spd(self, S, rhs):
        n = S.shape[0]
        if n <= DENSE_SCHUR_LIMIT:
            A = S.toarray()
            try:
                return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True, check_finite=False), rhs)
            except np.linalg.LinAlgError:
                return scipy.linalg.lstsq(A, rhs)[0]
        S = S.tocsr()
        if self._rcm is None:
            # the camera graph is fixed for the whole solve; order it once
            self._rcm = reverse_cuthill_mckee(S, symmetric_mode=True)
        perm = self._rcm
        P = S[perm][:, perm].tocoo()
        low = P.row >= P.col
        offs = (P.row - P.col)[low]
        bw = int(offs.max()) if offs.size else 0
        # banded Cholesky pays off while the profile stays narrow (sequential
        # trajectories with a few loop closures); otherwise use sparse LU
        if bw * bw * n < n**3 / 12:
            ab = np.zeros((bw + 1, n))
            ab[offs, P.col[low]] = P.data[low]
            try:
                c = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
                y = scipy.linalg.cho_solve_banded((c, True), rhs[perm], check_finite=False)
                x = np.empty_like(y)
                x[perm] = y
                return x
            except np.linalg.LinAlgError:
                pass
        return spla.spsolve(S.tocsc(), rhs, permc_spec="MMD_AT_PLUS_A")

    def apply(self, s: _State, dc, dp) -> _State:
        R, t = s.R.copy(), s.t.copy()
        free = np.flatnonzero(~self.fixed)
        if len(free):
            d = dc[: 6 * self.n_free].reshape(-1, 6)
            dR, dt = lie.se3_exp(d)
            t[free] = t[free] + np.einsum("nij,nj->ni", R[free], dt)
            R[free] = R[free] @ dR
        K = s.K + dc[6 * self.n_free :] if self.n_intr else s.K
        X = s.X + dp
        if self.scale_gauge is not None:
            a, f, d0 = self.scale_gauge
            d = np.linalg.norm(t[f] - t[a])
            if d > 0 and np.isfinite(d):
                k = d0 / d
                t = t[a] + k * (t - t[a])
                X = t[a] + k * (X - t[a])
        return _State(R, t, X, K)

    def write_back(self, model: Reconstruction, s: _State) -> None:
        for i, f in enumerate(self.frames):
            if self.fixed[i]:
                continue
            model.poses[f] = Pose(Rotation.from_matrix(s.R[i]), s.t[i], "world")
        for j, tid in enumerate(self.track_ids):
            model.tracks[tid].point = s.X[j].copy()
        if self.n_intr:
            model.intrinsics = Intrinsics.from_array(s.K)


def solve(model: Reconstruction, vio: VioSequence | None, cfg: BaConfig | None = None):
    """Refine all registered poses and track points of ``model`` in place.

    Returns ``(model, report)``. Gauge frames (``model.gauge_frames``) are
    held fixed. With ``cfg.alpha == 0`` no relative-pose terms are built and
    the problem is plain robust bundle adjustment.
    """
    cfg = cfg or BaConfig()
    t0 = time.perf_counter()
    prob = BaProblem(model, vio, cfg)
    prob.check_finite()
    report = SolverReport(
        num_cameras=len(prob.frames),
        num_points=prob.n_points,
        num_visual_residuals=len(prob.cam),
        num_relative_residuals=len(prob.rel_a),
    )
    state = prob.state
    cost, vis, rel = prob.costs(state)
    report.initial_cost, report.initial_visual_cost, report.initial_relative_cost = cost, vis, rel
    report.cost_history.append(cost)
    lam = cfg.initial_lambda
    termination = "max_iterations"

    it = 0
    while it < cfg.max_iterations:
        lin = prob.linearize(state)
        g = np.concatenate([lin[1], lin[3].ravel()])
        if g.size == 0 or np.abs(g).max() <= cfg.gradient_tolerance:
            termination = "gradient_tolerance"
            break
        x_norm = np.sqrt((state.t**2).sum() + (state.X**2).sum() + (state.K**2).sum())
        it += 1
        while True:
            dc, dp = prob.solve_step(lin, lam)
            step_norm = np.sqrt((dc**2).sum() + (dp**2).sum())
            if not np.isfinite(step_norm):
                new_cost = np.inf
            else:
                if step_norm <= cfg.parameter_tolerance * (x_norm + cfg.parameter_tolerance):
                    termination = "parameter_tolerance"
                    break
                candidate = prob.apply(state, dc, dp)
                new_cost, new_vis, new_rel = prob.costs(candidate)
            if new_cost < cost:
                break
            lam *= 10.0
            if lam > MAX_LAMBDA:
                termination = "diverged"
                report.diverged = True
                break
        if termination in ("parameter_tolerance", "diverged"):
            break
        decrease = (cost - new_cost) / cost if cost > 0 else 0.0
        state, cost, vis, rel = candidate, new_cost, new_vis, new_rel
        report.cost_history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if decrease < cfg.function_tolerance:
            termination = "function_tolerance"
            break

    prob.write_back(model, state)
    report.iterations = it
    report.final_cost, report.final_visual_cost, report.final_relative_cost = cost, vis, rel
    report.termination = termination
    report.wall_time = time.perf_counter() - t0
    log.debug(
        "BA: %d cams, %d pts, %d iters, cost %.4g -> %.4g (%s)",
        report.num_cameras,
        report.num_points,
        it,
        report.initial_cost,
        cost,
        termination,
    )
    return model, report
