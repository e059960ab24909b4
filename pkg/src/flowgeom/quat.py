"""Unit-quaternion and rotation-algebra helpers, batched over leading axes.

Quaternions are ``(..., 4)`` arrays ``(w, x, y, z)``; rotation vectors are
``(..., 3)`` arrays (angle = norm, axis = direction).  Small-angle branches
switch to series below ``eps = 1e-4`` to keep everything smooth.

Conventions used by the group chart: a point near center ``q0`` has
coordinates ``u`` with ``point(u) = q0 * qexp(u)``, and right-multiplication
flows pull back through the inverse right Jacobian::

    d/dt qexp(u(t)) = qexp(u) * hat(Jr(u) du/dt)
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "hat", "qmul", "qconj", "qexp", "qlog", "qrotmat",
    "right_jacobian", "right_jacobian_inv",
]

_EPS = 1e-4


def hat(u: np.ndarray) -> np.ndarray:
    """Cross-product matrix: hat(u) v = u x v."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape[:-1] + (3, 3))
    out[..., 0, 1] = -u[..., 2]
    out[..., 0, 2] = u[..., 1]
    out[..., 1, 0] = u[..., 2]
    out[..., 1, 2] = -u[..., 0]
    out[..., 2, 0] = -u[..., 1]
    out[..., 2, 1] = u[..., 0]
    return out


def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = (a[..., i] for i in range(4))
    w2, x2, y2, z2 = (b[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def qconj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qexp(u: np.ndarray) -> np.ndarray:
    """Rotation vector to unit quaternion."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=-1)
    half = 0.5 * theta
    # sin(theta/2)/theta, series at 0: 1/2 - theta^2/48
    small = theta < _EPS
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w[..., None], s[..., None] * u], axis=-1)


def qlog(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to rotation vector (principal branch, |result| <= pi)."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)  # w >= 0 branch
    vec = q[..., 1:]
    vn = np.linalg.norm(vec, axis=-1)
    theta = 2.0 * np.arctan2(vn, q[..., 0])
    small = vn < _EPS
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 2.0 / np.maximum(q[..., 0], 0.5), theta / np.where(small, 1.0, vn))
    return scale[..., None] * vec


def qrotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = (q[..., i] for i in range(4))
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def _coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(1-cos)/t^2, (t-sin)/t^3, and 1/t^2 - (1+cos)/(2 t sin) with series."""
    small = theta < _EPS
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
        c2 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
        d = np.where(
            small,
            1.0 / 12.0 + t2 / 720.0,
            1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
        )
    return c1, c2, d


def right_jacobian(u: np.ndarray) -> np.ndarray:
    """Jr(u) with qexp(u + d) ~ qexp(u) * qexp(Jr(u) d)."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=-1)
    c1, c2, _ = _coeffs(theta)
    h = hat(u)
    eye = np.broadcast_to(np.eye(3), h.shape)
    return eye - c1[..., None, None] * h + c2[..., None, None] * (h @ h)


def right_jacobian_inv(u: np.ndarray) -> np.ndarray:
    """Closed-form inverse of ``right_jacobian``."""
    u = np.asarray(u, dtype=float)
    theta = np.linalg.norm(u, axis=-1)
    _, _, d = _coeffs(theta)
    h = hat(u)
    eye = np.broadcast_to(np.eye(3), h.shape)
    return eye + 0.5 * h + d[..., None, None] * (h @ h)
