"""Compiled inner loops for RANSAC scoring and the bundle-adjustment Schur complement."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _sym_dist(F, xa, xb, k):
    ax, ay = xa[k, 0], xa[k, 1]
    bx, by = xb[k, 0], xb[k, 1]
    # line in b: F x_a ; line in a: F^T x_b
    l0 = F[0, 0] * ax + F[0, 1] * ay + F[0, 2]
    l1 = F[1, 0] * ax + F[1, 1] * ay + F[1, 2]
    l2 = F[2, 0] * ax + F[2, 1] * ay + F[2, 2]
    m0 = F[0, 0] * bx + F[1, 0] * by + F[2, 0]
    m1 = F[0, 1] * bx + F[1, 1] * by + F[2, 1]
    num = abs(l0 * bx + l1 * by + l2)
    den = min(l0 * l0 + l1 * l1, m0 * m0 + m1 * m1)
    if den <= 0.0:
        return np.inf
    return num / np.sqrt(den)


@njit(cache=True)
def _null_vector_8x9(A, out):
    """Null vector of an 8x9 system by elimination with complete pivoting.

    Returns False when the system is rank deficient (no unique null direction).
    """
    M = A.copy()
    perm = np.arange(9)
    for r in range(8):
        best, br, bc = 0.0, r, r
        for i in range(r, 8):
            for j in range(r, 9):
                v = abs(M[i, j])
                if v > best:
                    best, br, bc = v, i, j
        if best < 1e-12:
            return False
        if br != r:
            for j in range(9):
                M[r, j], M[br, j] = M[br, j], M[r, j]
        if bc != r:
            for i in range(8):
                M[i, r], M[i, bc] = M[i, bc], M[i, r]
            perm[r], perm[bc] = perm[bc], perm[r]
        piv = M[r, r]
        for i in range(r + 1, 8):
            f = M[i, r] / piv
            if f != 0.0:
                for j in range(r, 9):
                    M[i, j] -= f * M[r, j]
    # back substitution with the last (free) unknown set to one
    y = np.zeros(9)
    y[8] = 1.0
    for r in range(7, -1, -1):
        acc = M[r, 8]
        for j in range(r + 1, 8):
            acc += M[r, j] * y[j]
        y[r] = -acc / M[r, r]
    nrm = 0.0
    for j in range(9):
        out[perm[j]] = y[j]
        nrm += y[j] * y[j]
    nrm = np.sqrt(nrm)
    for j in range(9):
        out[j] /= nrm
    return True


@njit(cache=True)
def eight_point_hypotheses(na, nb, xa, xb, Ta, Tb, samples, thr):
    """Fit one rank-2 fundamental matrix per 8-sample row and score it (MSAC).

    ``na``/``nb`` are Hartley-normalized points, ``xa``/``xb`` the pixels,
    ``Ta``/``Tb`` the normalizing transforms. Returns ``(F, cost)`` with
    ``F`` in pixel coordinates.
    """
    h = samples.shape[0]
    n = xa.shape[0]
    Fs = np.empty((h, 3, 3))
    cost = np.empty(h)
    A = np.empty((8, 9))
    f9 = np.empty(9)
    thr2 = thr * thr
    for k in range(h):
        for r in range(8):
            i = samples[k, r]
            ax, ay = na[i, 0], na[i, 1]
            bx, by = nb[i, 0], nb[i, 1]
            A[r, 0] = bx * ax
            A[r, 1] = bx * ay
            A[r, 2] = bx
            A[r, 3] = by * ax
            A[r, 4] = by * ay
            A[r, 5] = by
            A[r, 6] = ax
            A[r, 7] = ay
            A[r, 8] = 1.0
        if not _null_vector_8x9(A, f9):
            Fs[k] = np.nan
            cost[k] = np.inf
            continue
        Fn = f9.reshape(3, 3)
        U, s, V2 = np.linalg.svd(Fn)
        Fr = Fn - s[2] * np.outer(U[:, 2], V2[2])
        F = Tb.T @ Fr @ Ta
        Fs[k] = F
        c = 0.0
        ok = True
        for q in range(3):
            for p in range(3):
                if not np.isfinite(F[q, p]):
                    ok = False
        if not ok:
            cost[k] = np.inf
            continue
        for i in range(n):
            d = _sym_dist(F, xa, xb, i)
            c += min(d * d, thr2)
        cost[k] = c
    return Fs, cost


@njit(cache=True)
def schur_blocks(ptr, cam, Wb, Vinv, gp, block_of, nblocks, n_free):
    """Point-eliminated contributions to the reduced camera system.

    Observations are grouped per point (``ptr`` offsets into ``cam``/``Wb``).
    For every ordered pair of observations of one point the 6x6 block
    ``W_a V^-1 W_b^T`` is accumulated into slot ``block_of[cam_a, cam_b]``.
    Returns the accumulated blocks and the right-hand-side correction
    ``sum W_a V^-1 g_p`` per camera.
    """
    S = np.zeros((nblocks, 6, 6))
    rhs = np.zeros((n_free, 6))
    P = ptr.shape[0] - 1
    Y = np.empty((6, 3))
    for j in range(P):
        Vj = Vinv[j]
        for a in range(ptr[j], ptr[j + 1]):
            ca = cam[a]
            Wa = Wb[a]
            for r in range(6):
                for c in range(3):
                    Y[r, c] = Wa[r, 0] * Vj[0, c] + Wa[r, 1] * Vj[1, c] + Wa[r, 2] * Vj[2, c]
                rhs[ca, r] += Y[r, 0] * gp[j, 0] + Y[r, 1] * gp[j, 1] + Y[r, 2] * gp[j, 2]
            for b in range(ptr[j], ptr[j + 1]):
                blk = block_of[ca, cam[b]]
                Wbb = Wb[b]
                for r in range(6):
                    for c in range(6):
                        S[blk, r, c] += Y[r, 0] * Wbb[c, 0] + Y[r, 1] * Wbb[c, 1] + Y[r, 2] * Wbb[c, 2]
    return S, rhs


@njit(cache=True)
def _fit_rank2(A, f9):
    """Rank-2 F from the smallest eigenvector of A^T A (normalized coordinates)."""
    w, V = np.linalg.eigh(A.T @ A)
    for j in range(9):
        f9[j] = V[j, 0]
    Fn = f9.reshape(3, 3).copy()
    U, s, V2 = np.linalg.svd(Fn)
    return Fn - s[2] * np.outer(U[:, 2], V2[2])


@njit(cache=True)
def _msac(F, xa, xb, thr, mask):
    n = xa.shape[0]
    c = 0.0
    cnt = 0
    for i in range(n):
        d = _sym_dist(F, xa, xb, i)
        inl = d <= thr
        mask[i] = inl
        if inl:
            cnt += 1
            c += d * d
        else:
            c += thr * thr
    return c, cnt


@njit(cache=True)
def ransac_fundamental_kernel(na, nb, xa, xb, Ta, Tb, thr, max_iters, confidence, seed):
    """Adaptive MSAC over 8-point hypotheses with local least-squares refits.

    Every time a hypothesis beats the best score it is refit on its inliers
    (up to three times, while the score does not get worse) before the
    adaptive iteration bound is updated. Returns ``(F, mask, found)``.
    """
    np.random.seed(seed)
    n = xa.shape[0]
    idx = np.arange(n)
    samples = np.empty((1, 8), dtype=np.int64)
    best_F = np.zeros((3, 3))
    best_mask = np.zeros(n, dtype=np.bool_)
    best_cost = np.inf
    found = False
    mask = np.zeros(n, dtype=np.bool_)
    needed = max_iters
    done = 0
    log_conf = np.log(1.0 - confidence)
    f9 = np.empty(9)
    while done < needed and done < max_iters:
        for r in range(8):
            j = r + np.random.randint(0, n - r)
            idx[r], idx[j] = idx[j], idx[r]
            samples[0, r] = idx[r]
        F1, c1 = eight_point_hypotheses(na, nb, xa, xb, Ta, Tb, samples, thr)
        done += 1
        if not c1[0] < best_cost:
            continue
        F = F1[0]
        cost, cnt = _msac(F, xa, xb, thr, mask)
        # local optimization on the consensus set
        for _ in range(3):
            if cnt < 8:
                break
            A = np.empty((cnt, 9))
            r = 0
            for i in range(n):
                if mask[i]:
                    ax, ay = na[i, 0], na[i, 1]
                    bx, by = nb[i, 0], nb[i, 1]
                    A[r, 0] = bx * ax
                    A[r, 1] = bx * ay
                    A[r, 2] = bx
                    A[r, 3] = by * ax
                    A[r, 4] = by * ay
                    A[r, 5] = by
                    A[r, 6] = ax
                    A[r, 7] = ay
                    A[r, 8] = 1.0
                    r += 1
            Fr = Tb.T @ _fit_rank2(A, f9) @ Ta
            mr = np.zeros(n, dtype=np.bool_)
            cr, cntr = _msac(Fr, xa, xb, thr, mr)
            if not np.isfinite(cr) or cr > cost:
                break
            same = True
            for i in range(n):
                if mr[i] != mask[i]:
                    same = False
                    break
            F, cost, cnt = Fr, cr, cntr
            mask[:] = mr
            if same:
                break
        if cost < best_cost:
            best_cost = cost
            best_F[:, :] = F
            best_mask[:] = mask
            found = True
            w = cnt / n
            if w >= 1.0:
                needed = 0
            else:
                denom = np.log1p(-(w**8))
                if denom < 0:
                    needed = int(np.ceil(log_conf / denom))
                else:
                    needed = max_iters
    return best_F, best_mask, found


@njit(cache=True)
def schur_pattern(ptr, cam, n_free, extra_a, extra_b):
    """Block sparsity of the reduced camera system.

    Marks every camera pair that shares a point, the diagonal, and the
    ``(extra_a, extra_b)`` pairs (both orders). Blocks are numbered in
    row-major order, so the numbering doubles as a BSR layout. Returns
    ``(block_of, count)`` with ``block_of = -1`` for structural zeros.
    """
    block_of = -np.ones((n_free, n_free), dtype=np.int32)
    for i in range(n_free):
        block_of[i, i] = 0
    for k in range(extra_a.shape[0]):
        block_of[extra_a[k], extra_b[k]] = 0
        block_of[extra_b[k], extra_a[k]] = 0
    P = ptr.shape[0] - 1
    for j in range(P):
        for a in range(ptr[j], ptr[j + 1]):
            for b in range(ptr[j], ptr[j + 1]):
                block_of[cam[a], cam[b]] = 0
    count = 0
    for i in range(n_free):
        for k in range(n_free):
            if block_of[i, k] == 0:
                block_of[i, k] = count
                count += 1
    return block_of, count


@njit(cache=True)
def accumulate_visual(R, t, X, K, z, cam, pt, obs_free, n_free, c2, min_depth):
    """Cauchy-rescaled normal-equation blocks of all reprojection residuals.

    Residual ``r = z - pi``; pose tangent ``[rho, omega]`` with a right
    perturbation. Returns per-free-camera ``U`` (n_free, 6, 6) and ``g_c``,
    per-point ``V`` (P, 3, 3) and ``g_p``, and the per-observation coupling
    blocks ``W`` (n, 6, 3) (zero for fixed cameras).
    """
    n = z.shape[0]
    P = X.shape[0]
    fx, fy, cx, cy = K[0], K[1], K[2], K[3]
    U = np.zeros((n_free, 6, 6))
    gc = np.zeros((n_free, 6))
    V = np.zeros((P, 3, 3))
    gp = np.zeros((P, 3))
    W = np.zeros((n, 6, 3))
    Jc = np.empty((2, 6))
    Jp = np.empty((2, 3))
    for o in range(n):
        c = cam[o]
        j = pt[o]
        Rc = R[c]
        d0 = X[j, 0] - t[c, 0]
        d1 = X[j, 1] - t[c, 1]
        d2 = X[j, 2] - t[c, 2]
        x = Rc[0, 0] * d0 + Rc[1, 0] * d1 + Rc[2, 0] * d2
        y = Rc[0, 1] * d0 + Rc[1, 1] * d1 + Rc[2, 1] * d2
        zc = Rc[0, 2] * d0 + Rc[1, 2] * d1 + Rc[2, 2] * d2
        if not zc > min_depth:
            continue
        inv = 1.0 / zc
        xn = x * inv
        yn = y * inv
        r0 = z[o, 0] - (fx * xn + cx)
        r1 = z[o, 1] - (fy * yn + cy)
        sw = 1.0 / np.sqrt(1.0 + (r0 * r0 + r1 * r1) / c2)
        r0 *= sw
        r1 *= sw
        # nonzero entries of dpi/dXc, scaled by the robust weight
        a00 = fx * inv * sw
        a02 = -fx * xn * inv * sw
        a11 = fy * inv * sw
        a12 = -fy * yn * inv * sw
        # pose: [dP, -dP [Xc]x]
        Jc[0, 0] = a00
        Jc[0, 1] = 0.0
        Jc[0, 2] = a02
        Jc[1, 0] = 0.0
        Jc[1, 1] = a11
        Jc[1, 2] = a12
        # -dP @ hat(Xc): hat = [[0,-z,y],[z,0,-x],[-y,x,0]]
        Jc[0, 3] = -(a02 * -y)
        Jc[0, 4] = -(a00 * -zc + a02 * x)
        Jc[0, 5] = -(a00 * y)
        Jc[1, 3] = -(a11 * zc - a12 * y)
        Jc[1, 4] = -(a12 * x)
        Jc[1, 5] = a11 * x
        # point: -dP @ R^T
        for k in range(3):
            Jp[0, k] = -(a00 * Rc[k, 0] + a02 * Rc[k, 2])
            Jp[1, k] = -(a11 * Rc[k, 1] + a12 * Rc[k, 2])
        for a in range(3):
            gp[j, a] += Jp[0, a] * r0 + Jp[1, a] * r1
            for b in range(3):
                V[j, a, b] += Jp[0, a] * Jp[0, b] + Jp[1, a] * Jp[1, b]
        f = obs_free[o]
        if f < 0:
            continue
        for a in range(6):
            gc[f, a] += Jc[0, a] * r0 + Jc[1, a] * r1
            for b in range(6):
                U[f, a, b] += Jc[0, a] * Jc[0, b] + Jc[1, a] * Jc[1, b]
            for b in range(3):
                W[o, a, b] = Jc[0, a] * Jp[0, b] + Jc[1, a] * Jp[1, b]
    return U, gc, V, gp, W


@njit(cache=True)
def back_substitute(ptr, cam, Wb, Vinv, gp, dc):
    """Point updates ``V^-1 (-g_p - W^T dc)`` given the camera step ``dc`` (n_free, 6)."""
    P = ptr.shape[0] - 1
    dp = np.zeros((P, 3))
    acc = np.empty(3)
    for j in range(P):
        for k in range(3):
            acc[k] = -gp[j, k]
        for a in range(ptr[j], ptr[j + 1]):
            c = cam[a]
            for k in range(3):
                s = 0.0
                for r in range(6):
                    s += Wb[a, r, k] * dc[c, r]
                acc[k] -= s
        for k in range(3):
            dp[j, k] = Vinv[j, k, 0] * acc[0] + Vinv[j, k, 1] * acc[1] + Vinv[j, k, 2] * acc[2]
    return dp
