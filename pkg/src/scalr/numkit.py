"""Small dense linear-algebra and rotation helpers.

Matrices are plain ``float64`` numpy arrays. ``matmul`` accumulates in a
fixed order (ascending inner index) so that results are reproducible
bit-for-bit regardless of BLAS threading; everything that has to be
bit-identical across simulated workers goes through it.

Quaternions are length-4 arrays in ``(w, x, y, z)`` order.
"""
import numpy as np
from scipy.special import expit

from .errors import GeometryError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "sigmoid",
    "silu",
    "silu_prime",
    "softplus",
    "svd3",
    "quat_to_rot",
    "rot_to_quat",
    "normalize_quat",
]


def as_matrix(x, name="matrix"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


_BLOCK_ELEMS = 1 << 15


def matmul(a, b):
    """Matrix product with deterministic row-major, ascending-k accumulation.

    Equivalent to the textbook triple loop ``c[i, j] = sum_k a[i, k] * b[k, j]``
    evaluated left to right, vectorised over ``(i, j)``. Leading batch axes
    broadcast as in ``np.matmul``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    inner = a.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=np.float64)
    cols = np.ascontiguousarray(np.swapaxes(a, -1, -2))
    rows = out.shape[-2]
    # row blocks keep the running sums cache-resident; the order over k is unchanged
    step = max(1, _BLOCK_ELEMS // max(1, out.size // max(rows, 1)))
    for r0 in range(0, rows, step):
        blk = out[..., r0:r0 + step, :]
        term = np.empty_like(blk)
        for k in range(inner):
            np.multiply(cols[..., k, r0:r0 + step, None], b[..., None, k, :], out=term)
            blk += term
    return out


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def _complete_basis(u, rank):
    """Fill the trailing ``3 - rank`` columns of ``u`` with an orthonormal completion."""
    if rank == 0:
        return np.eye(3)
    if rank == 1:
        a = u[:, 0]
        trial = np.eye(3)[np.argmin(np.abs(a))]
        b = trial - a * (a @ trial)
        b /= np.linalg.norm(b)
        u[:, 1] = b
    u[:, 2] = np.cross(u[:, 0], u[:, 1])
    return u


def svd3(m, tol=1e-15, max_sweeps=60):
    """SVD of a 3x3 matrix by cyclic one-sided Jacobi rotations.

    Returns ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``, ``S`` sorted
    descending and non-negative, ``U`` and ``V`` orthonormal.
    """
    a = np.array(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ShapeError(f"svd3 expects a 3x3 matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("svd3 input has non-finite entries")
    v = np.eye(3)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap, aq = a[:, p], a[:, q]
            alpha = ap @ ap
            beta = aq @ aq
            gamma = ap @ aq
            if abs(gamma) <= max(tol * np.sqrt(alpha) * np.sqrt(beta), 1e-300):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            az = abs(zeta)
            # hypot avoids overflow of zeta**2 for nearly decoupled columns
            t = np.copysign(1.0, zeta) / (az + np.hypot(1.0, az))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            new_p = c * ap - s * aq
            new_q = s * ap + c * aq
            a[:, p], a[:, q] = new_p, new_q
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break

    sing = np.linalg.norm(a, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros((3, 3))
    floor = max(sing[0], 1e-300) * 1e-13
    rank = 0
    for i in range(3):
        if sing[i] > floor:
            u[:, i] = a[:, i] / sing[i]
            rank += 1
        else:
            sing[i] = 0.0
    if rank < 3:
        u = _complete_basis(u, rank)
    return u, sing, v


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ShapeError(f"quaternion must have 4 components, got {q.shape}")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError("cannot normalise a zero or non-finite quaternion")
    return q / n


def quat_to_rot(q):
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def check_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ShapeError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
        raise GeometryError("matrix is not a proper rotation")
    return r


def rot_to_quat(r):
    """Rotation matrix to unit quaternion (Shepperd's method), ``w >= 0``."""
    r = check_rotation(r)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)
