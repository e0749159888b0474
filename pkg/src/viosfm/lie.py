"""Vectorized SO(3) / SE(3) helpers.

Everything here works on stacked arrays (leading batch dimensions) so the
bundle adjuster can linearize thousands of blocks at once. Tangent vectors
of SE(3) are ordered ``[rho, omega]`` (translation part first); the group
element is ``(R, t)`` with ``t = J_l(omega) @ rho``.
"""

import numpy as np

# below this angle the closed forms lose precision and Taylor series take over
_SMALL = 1e-2


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(S):
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _theta(w):
    return np.linalg.norm(w, axis=-1)


def _coeffs_exp(theta):
    """sin(t)/t and (1-cos(t))/t^2 with small-angle series."""
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    return a, b


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    a, b = _coeffs_exp(_theta(w))
    W = hat(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def quat_to_matrix(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Rotation matrix to canonical unit quaternion (w >= 0), Shepperd's method."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.diagonal(R, axis1=1, axis2=2)
    # pick the numerically largest of 4 candidate denominators
    cand = np.concatenate([tr[:, None], diag], axis=1)
    k = np.argmax(cand, axis=1)
    q = np.empty((R.shape[0], 4))

    m = k == 0
    s = np.sqrt(1.0 + tr[m]) * 2
    q[m, 0] = 0.25 * s
    q[m, 1] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 2] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 3] = (R[m, 1, 0] - R[m, 0, 1]) / s

    m = k == 1
    s = np.sqrt(1.0 + R[m, 0, 0] - R[m, 1, 1] - R[m, 2, 2]) * 2
    q[m, 0] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 1] = 0.25 * s
    q[m, 2] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 3] = (R[m, 0, 2] + R[m, 2, 0]) / s

    m = k == 2
    s = np.sqrt(1.0 + R[m, 1, 1] - R[m, 0, 0] - R[m, 2, 2]) * 2
    q[m, 0] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 1] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 2] = 0.25 * s
    q[m, 3] = (R[m, 1, 2] + R[m, 2, 1]) / s

    m = k == 3
    s = np.sqrt(1.0 + R[m, 2, 2] - R[m, 0, 0] - R[m, 1, 1]) * 2
    q[m, 0] = (R[m, 1, 0] - R[m, 0, 1]) / s
    q[m, 1] = (R[m, 0, 2] + R[m, 2, 0]) / s
    q[m, 2] = (R[m, 1, 2] + R[m, 2, 1]) / s
    q[m, 3] = 0.25 * s

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def quat_to_rotvec(q):
    """Canonical quaternion to rotation vector; also returns the angle."""
    q = np.asarray(q, dtype=float)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    small = s < 1e-12
    # 2*atan2(s, w)/s -> 2/w as s -> 0
    scale = np.where(small, 2.0 / np.where(small, q[..., 0], 1.0), angle / np.where(small, 1.0, s))
    return v * scale[..., None], angle


def so3_log(R):
    """Rotation matrix to rotation vector, plus the rotation angle."""
    return quat_to_rotvec(matrix_to_quat(R))


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=float)
    theta = _theta(w)
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    W = hat(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def so3_left_jacobian_inv(w):
    w = np.asarray(w, dtype=float)
    theta = _theta(w)
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    W = hat(w)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


def se3_exp(xi):
    """Tangent ``[rho, omega]`` to ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[..., :3], xi[..., 3:]
    R = so3_exp(w)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(w), rho)
    return R, t


def se3_log(R, t):
    """``(R, t)`` to tangent ``[rho, omega]``, plus the rotation angle."""
    w, angle = so3_log(R)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), np.asarray(t, dtype=float))
    return np.concatenate([rho, w], axis=-1), angle


def _q_matrix(rho, w):
    """Off-diagonal block of the SE(3) left Jacobian."""
    theta = _theta(w)
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    P = hat(rho)
    W = hat(w)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    WW = W @ W
    return (
        0.5 * P
        + c1[..., None, None] * (WP + PW + WPW)
        + c2[..., None, None] * (WW @ P + PW @ W - 3.0 * WPW)
        + c3[..., None, None] * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(w)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _q_matrix(rho, w)
    return out


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(w)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ _q_matrix(rho, w) @ Ji
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(R, t):
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = hat(t) @ R
    return out


def se3_ad(xi):
    """Small adjoint ``ad_xi`` (6x6), the Lie bracket operator."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    W = hat(xi[..., 3:])
    out[..., :3, :3] = W
    out[..., 3:, 3:] = W
    out[..., :3, 3:] = hat(xi[..., :3])
    return out
