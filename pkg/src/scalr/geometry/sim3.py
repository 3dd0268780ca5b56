"""Similarity transforms and their exponential / logarithm maps.

Tangent vectors are ordered ``(rho_x, rho_y, rho_z, omega_x, omega_y,
omega_z, sigma)``: translation part, rotation vector, log-scale.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from ..errors import GeometryError, ShapeError

__all__ = ["Sim3", "hat", "so3_exp", "so3_log", "sim3_exp", "sim3_log"]

_ROT_TOL = 1e-9


def hat(w):
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = hat(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r):
    """Rotation vector of ``r``; the angle must be strictly below pi."""
    r = np.asarray(r, dtype=np.float64)
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = np.linalg.norm(vee)
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta >= np.pi - 1e-9 or (sin_t < 1e-12 and cos_t < 0):
        raise GeometryError(f"rotation angle {theta:.6f} rad is outside the log domain (< pi)")
    if sin_t < 1e-12:
        return vee
    return vee * (theta / sin_t)


def _left_jacobian(sigma, omega):
    """``W = int_0^1 exp(u (sigma I + hat(omega))) du`` via a block exponential."""
    if sigma == 0.0 and not np.any(omega):
        return np.eye(3)
    block = np.zeros((6, 6))
    block[:3, :3] = sigma * np.eye(3) + hat(omega)
    block[:3, 3:] = np.eye(3)
    return expm(block)[:3, 3:]


@dataclass(frozen=True)
class Sim3:
    """``x -> s * r @ x + t``."""

    s: float
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError(f"bad Sim3 shapes r={r.shape} t={t.shape}")
        if not (np.isfinite(self.s) and self.s > 0):
            raise GeometryError(f"Sim3 scale must be positive, got {self.s}")
        if np.abs(r.T @ r - np.eye(3)).max() > _ROT_TOL or abs(np.linalg.det(r) - 1.0) > _ROT_TOL:
            raise GeometryError("Sim3 rotation is not orthonormal with det +1")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        sr = m[:3, :3]
        s = np.cbrt(np.linalg.det(sr))
        return cls(s, sr / s, m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.s * self.r
        m[:3, 3] = self.t
        return m

    def __matmul__(self, other):
        if not isinstance(other, Sim3):
            return NotImplemented
        return Sim3(self.s * other.s, self.r @ other.r, self.s * (self.r @ other.t) + self.t)

    def inverse(self):
        inv_s = 1.0 / self.s
        rt = self.r.T
        return Sim3(inv_s, rt, -inv_s * (rt @ self.t))

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64)
        return self.s * (p @ self.r.T) + self.t

    def apply_pose(self, rotation, translation):
        """Map a camera-to-frame pose into the target frame (rotation keeps unit scale)."""
        return self.r @ rotation, self.s * (self.r @ translation) + self.t

    def allclose(self, other, atol=1e-9):
        return (
            abs(self.s - other.s) <= atol
            and np.allclose(self.r, other.r, atol=atol, rtol=0)
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
        )

    def to_list(self):
        return [self.s] + self.r.ravel().tolist() + self.t.tolist()

    @classmethod
    def from_list(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(v[0], v[1:10].reshape(3, 3), v[10:13])


def sim3_exp(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (7,) or not np.all(np.isfinite(v)):
        raise ShapeError(f"sim3 tangent must be a finite length-7 vector, got {v}")
    rho, omega, sigma = v[:3], v[3:6], float(v[6])
    return Sim3(np.exp(sigma), so3_exp(omega), _left_jacobian(sigma, omega) @ rho)


def sim3_log(transform):
    omega = so3_log(transform.r)
    sigma = float(np.log(transform.s))
    jac = _left_jacobian(sigma, omega)
    rho = np.linalg.solve(jac, transform.t)
    return np.concatenate([rho, omega, [sigma]])
