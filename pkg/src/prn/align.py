"""Generalized Procrustes alignment of a batch of shapes to its own mean."""

from dataclasses import dataclass
import warnings

import numpy as np

from .errors import DegenerateShape, NoConvergence
from .geometry import center, check_shape_nondegenerate, kabsch_rotation, kabsch_rotations


@dataclass
class AlignmentState:
    """Result of :func:`gpa_align`.

    ``aligned[i] == rotations[i] @ center(shapes[i])`` and ``mean_shape`` is
    the arithmetic mean of ``aligned``.
    """

    rotations: np.ndarray  # (n_f, 3, 3)
    aligned: np.ndarray  # (n_f, 3, n_p)
    mean_shape: np.ndarray  # (3, n_p)
    residual: float
    iterations: int
    converged: bool = True
    history: tuple = ()

    @property
    def n_frames(self):
        return self.aligned.shape[0]


def alignment_objective(aligned):
    """Sum of squared distances of aligned shapes to their mean."""
    mean = aligned.mean(axis=0)
    return float(np.sum((aligned - mean) ** 2))


# so(3) generators; _GEN[a] @ v == cross(e_a, v)
_GEN = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=float,
)


def _expm_so3(w):
    """Rodrigues exponential of a ``(n, 3)`` stack of rotation vectors."""
    theta = np.linalg.norm(w, axis=1)
    safe = np.where(theta > 0, theta, 1.0)
    k = np.einsum("na,aij->nij", w / safe[:, None], _GEN)
    return (np.eye(3) + np.sin(theta)[:, None, None] * k
            + (1.0 - np.cos(theta))[:, None, None] * (k @ k))


NEWTON_BACKTRACK = 7  # full step plus up to six halvings


def _newton_rotations(aligned, max_angle=0.5):
    """Newton increments ``w_i`` (left-multiplied as ``expm([w_i]_x)``) for the alignment.

    Maximises ``||sum_i aligned_i||^2``, which is equivalent to minimising the
    distance to the mean.  Curvature is taken in absolute value so that the
    step ascends near saddles, and each ``|w_i|`` is capped at ``max_angle``.
    """
    n_f = aligned.shape[0]
    total = aligned.sum(axis=0)
    gx = np.einsum("aij,fjp->faip", _GEN, aligned)  # G_a X_i
    grad = 2.0 * np.einsum("faip,ip->fa", gx, total).reshape(-1)
    hess = 2.0 * np.einsum("faip,gbip->fagb", gx, gx).reshape(3 * n_f, 3 * n_f)
    gg = np.einsum("aij,bjk->abik", _GEN, _GEN)
    gg = gg + gg.transpose(1, 0, 2, 3)
    diag = np.einsum("abik,fkp,ip->fab", gg, aligned, total)
    for i in range(n_f):
        hess[3 * i:3 * i + 3, 3 * i:3 * i + 3] += diag[i]
    # restrict to the complement of the global-rotation gauge: the objective is
    # flat along it, but away from stationarity it couples to other directions
    gauge = np.tile(np.eye(3), (n_f, 1)) / np.sqrt(n_f)
    proj = np.eye(3 * n_f) - gauge @ gauge.T
    hess = proj @ (0.5 * (hess + hess.T)) @ proj
    grad = proj @ grad
    evals, evecs = np.linalg.eigh(hess)
    mag = np.abs(evals)
    keep = mag > 1e-10 * max(mag.max(), np.finfo(float).tiny)
    step = evecs[:, keep] @ ((evecs[:, keep].T @ grad) / mag[keep])
    step = step.reshape(n_f, 3)
    biggest = np.max(np.linalg.norm(step, axis=1))
    if biggest > max_angle:
        step *= max_angle / biggest
    return step


def _as_batch(batch):
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 3 or batch.shape[1] != 3:
        raise ValueError(f"expected a (n_f, 3, n_p) batch, got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("batch contains non-finite entries")
    return batch


def gpa_align(batch, tol=1e-10, max_iter=100, init_rotations=None,
              step_tol=1e-12, strict=False, warn=True, newton=True):
    """Align every shape of ``batch`` to the batch mean by rotation only.

    Alternates between computing the mean of the aligned shapes and re-solving
    each rotation with Kabsch against that mean.  With ``newton`` each sweep is
    followed by a Newton step on the rotations, halved until it lowers the
    objective (or dropped), so the objective never increases.  Iteration stops once the
    relative decrease of the objective is below ``tol`` and no rotation moved
    by more than ``step_tol`` (Frobenius) in the last sweep.

    Parameters
    ----------
    batch : array_like, shape (n_f, 3, n_p)
    tol : float
        Relative objective decrease threshold.
    max_iter : int
        Maximum number of sweeps.
    init_rotations : array_like, shape (n_f, 3, 3), optional
        Warm start; identity when omitted.
    step_tol : float
        Rotation-update threshold; the objective alone cannot resolve the
        rotations below ~sqrt(machine eps).
    strict : bool
        Raise NoConvergence when ``max_iter`` is hit.
    warn : bool
        Otherwise emit a RuntimeWarning; the returned state is flagged either way.

    Returns
    -------
    AlignmentState
    """
    batch = _as_batch(batch)
    n_f = batch.shape[0]
    if n_f < 2:
        raise ValueError("alignment needs at least two frames")
    for x in batch:
        check_shape_nondegenerate(x)

    xc = center(batch)
    if init_rotations is None:
        rot = np.tile(np.eye(3), (n_f, 1, 1))
    else:
        rot = np.array(init_rotations, dtype=float).reshape(n_f, 3, 3)
    aligned = rot @ xc
    obj = alignment_objective(aligned)
    history = [obj]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        mean = aligned.mean(axis=0)
        new_rot = kabsch_rotations(xc, mean)
        new_aligned = new_rot @ xc
        new_obj = alignment_objective(new_aligned)
        if newton:
            w = _newton_rotations(new_aligned)
            # backtrack: in flat valleys the full step can overshoot
            for _ in range(NEWTON_BACKTRACK if np.all(np.isfinite(w)) else 0):
                trial_rot = _expm_so3(w) @ new_rot
                trial_aligned = trial_rot @ xc
                trial_obj = alignment_objective(trial_aligned)
                if trial_obj <= new_obj:
                    new_rot, new_aligned, new_obj = trial_rot, trial_aligned, trial_obj
                    break
                w = 0.5 * w
        step = np.max(np.linalg.norm(new_rot - rot, axis=(1, 2)))
        rot = new_rot
        aligned = new_aligned
        history.append(new_obj)
        decrease = obj - new_obj
        obj = new_obj
        if decrease <= tol * max(history[-2], np.finfo(float).tiny) and step <= step_tol:
            converged = True
            break

    state = AlignmentState(
        rotations=rot,
        aligned=aligned,
        mean_shape=aligned.mean(axis=0),
        residual=obj,
        iterations=it,
        converged=converged,
        history=tuple(history),
    )
    if not converged:
        msg = f"GPA did not converge in {max_iter} sweeps (last step {step:.3e})"
        if strict:
            raise NoConvergence(msg)
        if warn:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return state


def stationarity_error(state):
    """Largest deviation from identity of a re-solved per-frame Kabsch rotation."""
    err = 0.0
    for x in state.aligned:
        r = kabsch_rotation(x, state.mean_shape)
        err = max(err, float(np.max(np.abs(r - np.eye(3)))))
    return err


def to_aligned_matrix(state):
    """``(3 n_p, n_f)`` matrix whose column j is the column-major vec of aligned shape j."""
    aligned = state.aligned if isinstance(state, AlignmentState) else np.asarray(state)
    n_f = aligned.shape[0]
    # column-major vec of a (3, n_p) matrix == row-major flatten of its transpose
    return aligned.transpose(0, 2, 1).reshape(n_f, -1).T.copy()


def from_aligned_matrix(matrix, n_p=None):
    matrix = np.asarray(matrix)
    if n_p is None:
        n_p = matrix.shape[0] // 3
    n_f = matrix.shape[1]
    return matrix.T.reshape(n_f, n_p, 3).transpose(0, 2, 1).copy()


def check_transversality(state, trial_rotations=20, tol=1e-6, seed=0):
    """Empirical check that re-aligning rotated copies recovers the aligned shapes.

    For each aligned shape and each random proper rotation ``S``, the Kabsch
    alignment of ``S @ aligned_i`` to ``mean_shape`` must give back
    ``aligned_i`` to within ``tol`` (max abs entry, relative to the shape's
    largest entry).
    """
    from .geometry import random_rotation

    rng = np.random.default_rng(seed)
    for x in state.aligned:
        scale = max(float(np.max(np.abs(x))), 1e-300)
        for _ in range(trial_rotations):
            s = random_rotation(rng)
            y = s @ x
            try:
                r = kabsch_rotation(y, state.mean_shape)
            except DegenerateShape:
                return False
            if np.max(np.abs(r @ y - x)) > tol * scale:
                return False
    return True
