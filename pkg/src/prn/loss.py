"""Reprojection plus aligned low-rank loss, with its gradient through the alignment.

The cost for one group of ``n_f`` shapes ``X_i`` is

    J = sum_i 1/2 ||(U_i - P_o X_i) * W_i||_F^2  +  lam * ||Xa||_*

where ``Xa`` stacks the vectorised shapes after rotating each one onto the
group mean.  The rotations depend on ``X``; their derivative is obtained by
differentiating the stationarity conditions of the alignment, which leaves a
small ``3 n_f x 3 n_f`` linear system (``B``) per group.  All Kronecker
operators are applied through ``(P kron Q) vec(M) = vec(Q M P^T)``; nothing
of size ``3 n_p n_f`` squared is ever formed.

``vec`` is column-major throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentState, gpa_align, to_aligned_matrix, from_aligned_matrix
from .errors import DimensionMismatch, NotConverged, SingularSystem


def vec(m):
    return np.asarray(m).T.reshape(-1)


def unvec(v, rows):
    v = np.asarray(v)
    return v.reshape(-1, rows).T


# ---------------------------------------------------------------------------
# data term
# ---------------------------------------------------------------------------


@dataclass
class ObservationBatch:
    u: np.ndarray  # (n_f, 2, n_p)
    w: np.ndarray  # (n_f, 2, n_p), entries in [0, 1]

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.u.shape != self.w.shape or self.u.ndim != 3 or self.u.shape[1] != 2:
            raise DimensionMismatch(
                f"observations {self.u.shape} and weights {self.w.shape} must both be (n_f, 2, n_p)"
            )
        if np.any(self.w < 0) or np.any(self.w > 1):
            raise ValueError("weights must lie in [0, 1]")


def _check_obs(batch, obs):
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 3 or batch.shape[1] != 3:
        raise DimensionMismatch(f"expected (n_f, 3, n_p) shapes, got {batch.shape}")
    if obs.u.shape != (batch.shape[0], 2, batch.shape[2]):
        raise DimensionMismatch(
            f"observations {obs.u.shape} do not match shapes {batch.shape}"
        )
    return batch


def data_term(batch, obs):
    """Weighted orthographic reprojection error, summed over frames."""
    batch = _check_obs(batch, obs)
    r = (obs.u - batch[:, :2, :]) * obs.w
    return 0.5 * float(np.sum(r * r))


def data_term_grad(batch, obs):
    batch = _check_obs(batch, obs)
    g = np.zeros_like(batch)
    g[:, :2, :] = (batch[:, :2, :] - obs.u) * obs.w * obs.w
    return g


# ---------------------------------------------------------------------------
# regulariser
# ---------------------------------------------------------------------------


def nuclear_norm(m):
    return float(np.sum(np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)))


def nuclear_norm_subgrad(m, rank_tol=1e-8):
    """``U sign(S) V^T``; singular values below ``rank_tol * s_max`` count as zero."""
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=float), full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(m, dtype=float)
    keep = s > rank_tol * s[0]
    return (u[:, keep]) @ vt[keep]


# ---------------------------------------------------------------------------
# Jacobian blocks
# ---------------------------------------------------------------------------


def build_L():
    """9x3 map from a rotation generator ``q`` to ``vec`` of its skew matrix.

    ``unvec(L @ q, 3) == [[0, qz, -qy], [-qz, 0, qx], [qy, -qx, 0]]``.
    """
    return np.array(
        [
            [0, 0, 0, 0, 0, -1, 0, 1, 0],
            [0, 0, 1, 0, 0, 0, -1, 0, 0],
            [0, -1, 0, 1, 0, 0, 0, 0, 0],
        ],
        dtype=float,
    ).T


def build_E(rows, cols):
    """Permutation with ``E @ vec(H) == vec(H.T)`` for ``H`` of shape (rows, cols)."""
    n = rows * cols
    e = np.zeros((n, n))
    for i in range(rows):
        for j in range(cols):
            # H[i, j] sits at i + rows*j in vec(H), at j + cols*i in vec(H.T)
            e[j + cols * i, i + rows * j] = 1.0
    return e


_L = build_L()
_E9 = build_E(3, 3)


def _generator(q):
    """Skew 3x3 matrix ``unvec(L q)``."""
    return unvec(_L @ q, 3)


@dataclass
class JacobianBlocks:
    """Operators of ``dXa/dX = (A B^+ C + I) D`` for one aligned group.

    Only ``B`` is stored densely.  ``A``, ``C`` and ``D`` are applied through
    ``xprime`` (the aligned shapes at evaluation) and ``rotations``.
    """

    xprime: np.ndarray  # (n_f, 3, n_p)
    rotations: np.ndarray  # (n_f, 3, 3)
    B: np.ndarray  # (3 n_f, 3 n_f)
    L: np.ndarray = field(default_factory=build_L)
    E: np.ndarray = field(default_factory=lambda: _E9.copy())

    @property
    def n_frames(self):
        return self.xprime.shape[0]

    def a_block(self, i):
        """Dense ``(X'_i^T kron I3) L`` (3 n_p x 3)."""
        return np.kron(self.xprime[i].T, np.eye(3)) @ self.L

    def a_apply(self, dq):
        """``A @ dq`` as per-frame ``(3, n_p)`` arrays."""
        dq = np.asarray(dq).reshape(self.n_frames, 3)
        return np.stack([_generator(q) @ x for q, x in zip(dq, self.xprime)])

    def a_transpose(self, g):
        """``A^T vec(g)`` as a length ``3 n_f`` vector."""
        return np.concatenate(
            [self.L.T @ vec(gi @ xi.T) for gi, xi in zip(g, self.xprime)]
        )

    def c_apply(self, dxp):
        """``C vec(dX')`` as a length ``3 n_f`` vector."""
        total = self.xprime.sum(axis=0)
        dtotal = dxp.sum(axis=0)
        out = []
        for i, (xi, di) in enumerate(zip(self.xprime, dxp)):
            others = total - xi
            d_others = dtotal - di
            # diagonal: -L^T vec(dX'_i S_i^T); off-diagonal: -L^T vec(X'_i dX'_j^T)
            out.append(-self.L.T @ vec(di @ others.T + xi @ d_others.T))
        return np.concatenate(out)

    def c_transpose(self, y):
        """``C^T y`` as per-frame ``(3, n_p)`` arrays."""
        ys = np.stack([_generator(q) for q in np.asarray(y).reshape(self.n_frames, 3)])
        total = self.xprime.sum(axis=0)
        yx = ys @ self.xprime  # Y_i X'_i
        yx_total = yx.sum(axis=0)
        out = np.empty_like(self.xprime)
        for j in range(self.n_frames):
            others = total - self.xprime[j]
            out[j] = -ys[j] @ others + (yx_total - yx[j])
        return out

    def d_apply(self, dx):
        """``D vec(dX)``: rotate and center each frame's perturbation."""
        r = self.rotations @ dx
        return r - r.mean(axis=-1, keepdims=True)

    def d_transpose(self, g):
        r = np.transpose(self.rotations, (0, 2, 1)) @ g
        return r - r.mean(axis=-1, keepdims=True)

    def c_block(self, i, j):
        """Dense ``c_ij`` (3 x 3 n_p), for verification."""
        n_p = self.xprime.shape[2]
        if i == j:
            others = self.xprime.sum(axis=0) - self.xprime[i]
            return -self.L.T @ np.kron(others, np.eye(3))
        return -self.L.T @ np.kron(np.eye(3), self.xprime[i]) @ build_E(3, n_p)


def stationarity_residual(xprime):
    """Relative asymmetry of ``X'_k (sum_{j != k} X'_j)^T``; zero at a GPA stationary point."""
    total = xprime.sum(axis=0)
    scale = max(float(np.sum(xprime ** 2)), np.finfo(float).tiny)
    worst = 0.0
    for x in xprime:
        m = x @ (total - x).T
        worst = max(worst, float(np.max(np.abs(m - m.T))))
    return worst / scale


def _block_tensors():
    """Linear maps ``M -> L^T (M kron I3) L`` and ``M -> L^T (I3 kron M) E L`` as (3,3,3,3) tensors."""
    eye3 = np.eye(3)
    k1 = np.empty((3, 3, 3, 3))
    k2 = np.empty((3, 3, 3, 3))
    for a in range(3):
        for b in range(3):
            m = np.zeros((3, 3))
            m[a, b] = 1.0
            k1[a, b] = _L.T @ np.kron(m, eye3) @ _L
            k2[a, b] = _L.T @ np.kron(eye3, m) @ _E9 @ _L
    return k1, k2


_K_DIAG, _K_OFF = _block_tensors()


def assemble_B(xprime):
    """Dense ``3 n_f x 3 n_f`` matrix of the rotation-derivative system.

    Diagonal blocks ``L^T (sum_{k != i} X'_k X'_i^T kron I3) L``; off-diagonal
    blocks ``L^T (I3 kron X'_i X'_j^T) E L``.
    """
    n_f = xprime.shape[0]
    m = np.einsum("iap,jbp->ijab", xprime, xprime)  # X'_i X'_j^T
    blocks = np.einsum("ijab,abcd->ijcd", m, _K_OFF)
    m_diag = m.sum(axis=0) - m[np.arange(n_f), np.arange(n_f)]  # sum_{k != i} X'_k X'_i^T
    blocks[np.arange(n_f), np.arange(n_f)] = np.einsum("iab,abcd->icd", m_diag, _K_DIAG)
    return blocks.transpose(0, 2, 1, 3).reshape(3 * n_f, 3 * n_f)


def assemble_B_dense(xprime):
    """Block-by-block assembly with explicit Kronecker products (reference implementation)."""
    n_f = xprime.shape[0]
    eye3 = np.eye(3)
    total = xprime.sum(axis=0)
    b = np.zeros((3 * n_f, 3 * n_f))
    for i in range(n_f):
        xi = xprime[i]
        m = (total - xi) @ xi.T
        b[3 * i:3 * i + 3, 3 * i:3 * i + 3] = _L.T @ np.kron(m, eye3) @ _L
        for j in range(n_f):
            if j != i:
                b[3 * i:3 * i + 3, 3 * j:3 * j + 3] = (
                    _L.T @ np.kron(eye3, xi @ xprime[j].T) @ _E9 @ _L
                )
    return b


def assemble_jacobian_blocks(state, batch=None, stationarity_tol=1e-6):
    """Build the blocks for the alignment in ``state``.

    ``batch`` is accepted for symmetry with the loss call; the rotations and
    aligned shapes in ``state`` are all that is needed.  Raises NotConverged
    if ``state`` is not a stationary point of the alignment objective.
    """
    xprime = np.asarray(state.aligned, dtype=float)
    if batch is not None and np.shape(batch) != xprime.shape:
        raise DimensionMismatch(f"batch {np.shape(batch)} vs state {xprime.shape}")
    res = stationarity_residual(xprime)
    if res > stationarity_tol:
        raise NotConverged(f"alignment is not stationary (residual {res:.3e})")
    return JacobianBlocks(
        xprime=xprime, rotations=np.asarray(state.rotations), B=assemble_B(xprime)
    )


def gauge_vectors(n_f):
    """Orthonormal basis of the global-rotation direction (all ``dq_i`` equal)."""
    return np.tile(np.eye(3), (n_f, 1)) / np.sqrt(n_f)


def _pinv_solve(b, rhs, gauge_tol):
    u, s, vt = np.linalg.svd(b)
    if s[0] == 0.0:
        raise SingularSystem("B is identically zero")
    small = s < gauge_tol * s[0]
    if np.count_nonzero(small) > 3:
        raise SingularSystem(
            f"B has {np.count_nonzero(small)} near-zero singular values; only the "
            "3-dimensional global-rotation gauge is expected"
        )
    inv = np.where(small, 0.0, 1.0 / np.where(small, 1.0, s))
    return vt.T @ (inv * (u.T @ rhs))


def alignment_backward(blocks, grad_aligned, gauge_tol=1e-8):
    """Pull a gradient w.r.t. the aligned shapes back to the raw shapes.

    Computes ``g^T (A B^+ C + I) D`` with ``B^+`` the least-squares
    pseudo-inverse.  The gauge component that ``B^+`` discards is a global
    rotation of all aligned shapes.
    """
    g = np.asarray(grad_aligned, dtype=float)
    if g.shape != blocks.xprime.shape:
        raise DimensionMismatch(f"gradient {g.shape} vs aligned {blocks.xprime.shape}")
    a = blocks.a_transpose(g)
    y = _pinv_solve(blocks.B.T, a, gauge_tol)
    h = g + blocks.c_transpose(y)
    return blocks.d_transpose(h)


def alignment_jvp(blocks, dx, gauge_tol=1e-8):
    """Forward-mode counterpart of :func:`alignment_backward` (used in tests)."""
    dxp = blocks.d_apply(np.asarray(dx, dtype=float))
    dq = _pinv_solve(blocks.B, blocks.c_apply(dxp), gauge_tol)
    return blocks.a_apply(dq) + dxp


# ---------------------------------------------------------------------------
# full loss
# ---------------------------------------------------------------------------


@dataclass
class LossConfig:
    lam: float = 0.05
    svd_rank_tol: float = 1e-8
    solve_mode: str = "pseudo_inverse"
    gauge_tol: float = 1e-8
    gpa_tol: float = 1e-10
    gpa_max_iter: int = 300

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.solve_mode != "pseudo_inverse":
            raise ValueError(f"unsupported solve_mode {self.solve_mode!r}")


@dataclass
class LossGradient:
    value: float
    grad: np.ndarray  # (n_f, 3, n_p)
    data: float
    reg: float
    state: AlignmentState = None


def regularizer(batch, cfg=None, init_rotations=None):
    """Nuclear norm of the aligned matrix, with the alignment state."""
    cfg = cfg or LossConfig()
    state = gpa_align(batch, tol=cfg.gpa_tol, max_iter=cfg.gpa_max_iter,
                      init_rotations=init_rotations, warn=False)
    return nuclear_norm(to_aligned_matrix(state)), state


def pr_loss_and_grad(batch, obs, cfg=None, init_rotations=None):
    """Value and gradient of the combined cost for one group.

    ``init_rotations`` warm-starts the alignment (e.g. with the rotations of
    the previous call); the alignment itself is always re-solved.
    """
    cfg = cfg or LossConfig()
    batch = _check_obs(batch, obs)
    if batch.shape[0] < 2:
        raise ValueError("the loss needs at least two frames per group")
    f = data_term(batch, obs)
    grad = data_term_grad(batch, obs)
    if cfg.lam == 0.0:
        return LossGradient(value=f, grad=grad, data=f, reg=0.0)

    reg, state = regularizer(batch, cfg, init_rotations)
    blocks = assemble_jacobian_blocks(state)
    sub = nuclear_norm_subgrad(to_aligned_matrix(state), cfg.svd_rank_tol)
    g_aligned = from_aligned_matrix(sub, batch.shape[2])
    grad = grad + cfg.lam * alignment_backward(blocks, g_aligned, cfg.gauge_tol)
    return LossGradient(value=f + cfg.lam * reg, grad=grad, data=f, reg=reg, state=state)
