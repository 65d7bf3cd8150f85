"""Shape and rotation primitives.

Shapes are ``(3, n_p)`` arrays with one point per column.  Batches of shapes
are ``(n_f, 3, n_p)`` arrays.
"""

import numpy as np

from .errors import DegenerateShape

# second/first singular value ratio under which an alignment is not unique
DEGENERACY_RATIO = 1e-8


def center(shape):
    """Subtract the per-coordinate mean over points (right-multiply by T).

    Works on a single ``(3, n_p)`` shape or on a ``(..., 3, n_p)`` stack.
    """
    shape = np.asarray(shape, dtype=float)
    return shape - shape.mean(axis=-1, keepdims=True)


def is_rotation(r, atol=1e-9):
    r = np.asarray(r)
    if r.shape != (3, 3):
        return False
    return bool(
        np.allclose(r.T @ r, np.eye(3), rtol=0, atol=atol)
        and abs(np.linalg.det(r) - 1.0) <= atol
    )


def skew(v):
    """Cross-product matrix ``[v]_x`` such that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _check_nondegenerate(s):
    if s[0] <= 0.0 or s[1] < DEGENERACY_RATIO * s[0]:
        raise DegenerateShape(
            f"cross-covariance singular values {s} leave the rotation undetermined"
        )


def check_shape_nondegenerate(shape):
    """Raise DegenerateShape if a shape's points are (numerically) co-linear."""
    x = center(shape)
    if x.shape[1] < 3:
        raise DegenerateShape(f"need at least 3 points, got {x.shape[1]}")
    _check_nondegenerate(np.linalg.svd(x @ x.T, compute_uv=False))


def kabsch_rotation(shape, reference):
    """Proper rotation ``R`` minimising ``||R @ shape - reference||_F``.

    Both inputs are expected to be centered ``(3, n_p)`` arrays.  Raises
    DegenerateShape when the cross-covariance has rank <= 1.
    """
    shape = np.asarray(shape, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if shape.shape != reference.shape or shape.shape[0] != 3:
        raise ValueError(f"shape mismatch: {shape.shape} vs {reference.shape}")
    if shape.shape[1] < 3:
        raise DegenerateShape(f"need at least 3 points, got {shape.shape[1]}")
    h = reference @ shape.T
    u, s, vt = np.linalg.svd(h)
    _check_nondegenerate(s)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def kabsch_rotations(shapes, reference):
    """Vectorised :func:`kabsch_rotation` of a ``(n, 3, n_p)`` stack onto one reference."""
    shapes = np.asarray(shapes, dtype=float)
    if shapes.shape[1] != 3 or shapes.shape[2] < 3:
        raise DegenerateShape(f"need (n, 3, n_p >= 3) shapes, got {shapes.shape}")
    h = np.einsum("ip,fjp->fij", reference, shapes)
    u, s, vt = np.linalg.svd(h)
    bad = (s[:, 0] <= 0.0) | (s[:, 1] < DEGENERACY_RATIO * s[:, 0])
    if np.any(bad):
        raise DegenerateShape(
            f"cross-covariance singular values {s[np.argmax(bad)]} leave the rotation undetermined"
        )
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    u[:, :, 2] *= d[:, None]
    return u @ vt


def random_rotation(seed):
    """Haar-uniform proper rotation from a unit quaternion, deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def quaternion_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle(axis, angle):
    """Rodrigues rotation about ``axis`` (normalised internally) by ``angle`` radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
