import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prn.align import gpa_align, to_aligned_matrix
from prn.errors import DimensionMismatch
from prn.geometry import center, random_rotation, skew
from prn.gradcheck import central_difference, loss_value, random_problem, relative_error
from prn.loss import (
    LossConfig,
    ObservationBatch,
    alignment_backward,
    alignment_jvp,
    assemble_B,
    assemble_B_dense,
    assemble_jacobian_blocks,
    build_E,
    build_L,
    data_term,
    data_term_grad,
    gauge_vectors,
    nuclear_norm,
    nuclear_norm_subgrad,
    pr_loss_and_grad,
    unvec,
    vec,
)

from conftest import make_batch


# --- data term --------------------------------------------------------------


def test_data_term_single_point():
    x = np.array([[[1.0], [2.0], [3.0]]])
    obs = ObservationBatch(np.array([[[2.0], [2.0]]]), np.ones((1, 2, 1)))
    assert data_term(x, obs) == pytest.approx(0.5)
    np.testing.assert_array_equal(data_term_grad(x, obs)[0, :, 0], [-1.0, 0.0, 0.0])


def test_data_term_gradient_matches_fd(rng):
    x = rng.standard_normal((3, 3, 5))
    obs = ObservationBatch(rng.standard_normal((3, 2, 5)), rng.uniform(size=(3, 2, 5)))
    fd = central_difference(lambda y: data_term(y, obs), x, 1e-6)
    np.testing.assert_allclose(data_term_grad(x, obs), fd, atol=1e-8)
    assert np.all(data_term_grad(x, obs)[:, 2, :] == 0.0)


def test_observation_validation():
    with pytest.raises(DimensionMismatch):
        ObservationBatch(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))
    with pytest.raises(ValueError):
        ObservationBatch(np.zeros((1, 2, 3)), np.full((1, 2, 3), 1.5))
    obs = ObservationBatch(np.zeros((2, 2, 3)), np.ones((2, 2, 3)))
    with pytest.raises(DimensionMismatch):
        data_term(np.zeros((2, 3, 4)), obs)


# --- nuclear norm ---------------------------------------------------------


def test_nuclear_norm_examples(rng):
    assert nuclear_norm(np.eye(3)) == pytest.approx(3.0)
    assert nuclear_norm(np.diag([3.0, 4.0])) == pytest.approx(7.0)
    m = rng.standard_normal((9, 6))
    # oracle: square roots of the eigenvalues of M^T M
    ev = np.linalg.eigvalsh(m.T @ m)
    assert nuclear_norm(m) == pytest.approx(np.sum(np.sqrt(np.clip(ev, 0, None))), rel=1e-12)


def test_nuclear_subgrad_examples(rng):
    np.testing.assert_allclose(nuclear_norm_subgrad(np.eye(3)), np.eye(3), atol=1e-15)
    u = rng.standard_normal(9)
    v = rng.standard_normal(4)
    expected = np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    np.testing.assert_allclose(nuclear_norm_subgrad(np.outer(u, v)), expected, atol=1e-12)
    np.testing.assert_array_equal(nuclear_norm_subgrad(np.zeros((3, 2))), np.zeros((3, 2)))


def test_nuclear_subgrad_is_gradient_for_distinct_singular_values(rng):
    m = rng.standard_normal((9, 5))
    fd = central_difference(nuclear_norm, m, 1e-6)
    np.testing.assert_allclose(nuclear_norm_subgrad(m), fd, atol=1e-7)


# --- vec, L, E ------------------------------------------------------------


def test_vec_is_column_major():
    m = np.array([[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(vec(m), [1, 3, 5, 2, 4, 6])
    np.testing.assert_array_equal(unvec(vec(m), 3), m)


def test_L_entries():
    l = build_L()
    assert l.shape == (9, 3)
    expected = np.zeros((9, 3))
    expected[[5, 6, 1], [0, 1, 2]] = -1
    expected[[7, 2, 3], [0, 1, 2]] = 1
    np.testing.assert_array_equal(l, expected)


def test_L_builds_skew_generator():
    q = np.array([0.3, -1.2, 2.0])
    g = unvec(build_L() @ q, 3)
    np.testing.assert_array_equal(g, -skew(q))
    np.testing.assert_array_equal(g, -g.T)


def test_E_transposes(rng):
    h = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(build_E(3, 5) @ vec(h), vec(h.T))
    l = build_L()
    np.testing.assert_array_equal(build_E(3, 3) @ l, -l)


def test_kron_L_is_cross_product(rng):
    s = rng.standard_normal((3, 4))
    q = rng.standard_normal(3)
    lhs = np.kron(s.T, np.eye(3)) @ build_L() @ q
    # oracle: each column of (-[q]x) S is the cross product s_j x q
    rhs = np.concatenate([np.cross(s[:, j], q) for j in range(4)])
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


# --- B --------------------------------------------------------------------


def test_B_two_identical_frames(rng):
    x = center(rng.standard_normal((3, 7)))
    b = assemble_B(np.stack([x, x]))
    m = x @ x.T
    k = np.trace(m) * np.eye(3) - m  # inertia tensor
    expected = np.block([[k, -k], [-k, k]])
    np.testing.assert_allclose(b, expected, atol=1e-12)


def test_B_symmetric_with_gauge_null_space(rng):
    state = gpa_align(make_batch(rng, n_f=5, n_p=7))
    b = assemble_B(state.aligned)
    np.testing.assert_allclose(b, b.T, atol=1e-10)
    np.testing.assert_allclose(b @ gauge_vectors(5), 0.0, atol=1e-9 * np.abs(b).max())
    s = np.linalg.svd(b, compute_uv=False)
    assert s[-4] > 1e-6 * s[0]
    np.testing.assert_allclose(assemble_B_dense(state.aligned), b, atol=1e-11)


# --- Jacobian operators ---------------------------------------------------


def _gram_objective(weights):
    """Gauge-invariant test function of the aligned shapes."""

    def value(aligned):
        m = to_aligned_matrix(aligned)
        return float(np.sum(weights * (m.T @ m)))

    def grad(aligned):
        from prn.align import from_aligned_matrix

        m = to_aligned_matrix(aligned)
        return from_aligned_matrix(m @ (weights + weights.T), aligned.shape[2])

    return value, grad


def _aligned(x, rot0):
    return gpa_align(x, tol=0.0, step_tol=1e-14, max_iter=500, init_rotations=rot0,
                     warn=False).aligned


def test_backward_zero_gradient(rng):
    blocks = assemble_jacobian_blocks(gpa_align(make_batch(rng)))
    out = alignment_backward(blocks, np.zeros_like(blocks.xprime))
    np.testing.assert_array_equal(out, 0.0)


def test_backward_matches_fd_of_composition(rng):
    n_f, n_p = 4, 6
    x = make_batch(rng, n_f=n_f, n_p=n_p)
    state = gpa_align(x)
    weights = rng.standard_normal((n_f, n_f))
    val, grad = _gram_objective(weights)
    analytic = alignment_backward(assemble_jacobian_blocks(state), grad(state.aligned))
    fd = central_difference(lambda y: val(_aligned(y, state.rotations)), x, 1e-6)
    assert relative_error(analytic, fd) < 1e-6


def test_jvp_matches_fd(rng):
    n_f, n_p = 4, 6
    x = make_batch(rng, n_f=n_f, n_p=n_p)
    state = gpa_align(x)
    blocks = assemble_jacobian_blocks(state)
    dx = rng.standard_normal(x.shape)
    dxa = alignment_jvp(blocks, dx)
    m = to_aligned_matrix(state)
    dm = to_aligned_matrix(dxa)
    analytic = dm.T @ m + m.T @ dm
    h = 1e-6

    def gram(y):
        a = to_aligned_matrix(_aligned(y, state.rotations))
        return a.T @ a

    fd = (gram(x + h * dx) - gram(x - h * dx)) / (2 * h)
    assert relative_error(analytic, fd) < 1e-6


def test_jvp_per_frame_rotation_is_pure_gauge(rng):
    x = make_batch(rng, n_f=5, n_p=6)
    state = gpa_align(x)
    blocks = assemble_jacobian_blocks(state)
    omegas = rng.standard_normal((5, 3))
    xc = center(x)
    dx = np.stack([skew(w) @ xi for w, xi in zip(omegas, xc)])
    out = alignment_jvp(blocks, dx)
    # the response must be one common infinitesimal rotation of the aligned set
    a = np.concatenate([-np.stack([skew(e) @ xi for e in np.eye(3)], axis=-1).reshape(-1, 3)
                        for xi in state.aligned])
    coef, *_ = np.linalg.lstsq(a, out.reshape(-1), rcond=None)
    assert np.abs(a @ coef - out.reshape(-1)).max() < 1e-8 * max(1.0, np.abs(out).max())


def test_C_operators_adjoint_and_dense(rng):
    blocks = assemble_jacobian_blocks(gpa_align(make_batch(rng, n_f=3, n_p=5)))
    dxp = rng.standard_normal(blocks.xprime.shape)
    y = rng.standard_normal(9)
    lhs = y @ blocks.c_apply(dxp)
    rhs = np.sum(blocks.c_transpose(y) * dxp)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    dense = np.block([[blocks.c_block(i, j) for j in range(3)] for i in range(3)])
    flat = np.concatenate([vec(d) for d in dxp])
    np.testing.assert_allclose(dense @ flat, blocks.c_apply(dxp), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_orthogonal_to_frame_rotations(seed):
    rng = np.random.default_rng(seed)
    x = make_batch(rng, n_f=4, n_p=6)
    state = gpa_align(x)
    g = rng.standard_normal(state.aligned.shape)
    out = alignment_backward(assemble_jacobian_blocks(state), g)
    xc = center(x)
    # an invariant function of the aligned set cannot see per-frame rotations
    # of the input; only the gauge part of g leaks through, which is shared
    val, grad = _gram_objective(rng.standard_normal((4, 4)))
    inv = alignment_backward(assemble_jacobian_blocks(state), grad(state.aligned))
    for i in range(4):
        for e in np.eye(3):
            d = skew(e) @ xc[i]
            assert abs(np.sum(inv[i] * d)) < 1e-8 * np.abs(inv).max() * np.abs(d).max() * 10
    assert np.all(np.isfinite(out))


# --- full loss ------------------------------------------------------------


def test_lambda_zero_is_data_term(rng):
    x, obs = random_problem(5, 6, rng)
    lg = pr_loss_and_grad(x, obs, LossConfig(lam=0.0))
    assert lg.value == data_term(x, obs)
    np.testing.assert_array_equal(lg.grad, data_term_grad(x, obs))


def test_zero_weights_leave_regulariser(rng):
    x, obs = random_problem(5, 6, rng)
    obs = ObservationBatch(obs.u, np.zeros_like(obs.w))
    cfg = LossConfig(lam=0.3)
    lg = pr_loss_and_grad(x, obs, cfg)
    assert lg.data == 0.0
    assert lg.value == pytest.approx(0.3 * nuclear_norm(to_aligned_matrix(lg.state)))


def test_full_gradient_fd(rng):
    x, obs = random_problem(6, 8, rng)
    cfg = LossConfig(lam=0.05)
    lg = pr_loss_and_grad(x, obs, cfg)
    fd = central_difference(lambda y: loss_value(y, obs, cfg, lg.state.rotations), x, 1e-5)
    assert relative_error(lg.grad, fd) < 1e-6


def test_loss_invariant_to_per_frame_rotation_of_regulariser(rng):
    x, obs = random_problem(5, 6, rng)
    obs0 = ObservationBatch(obs.u, np.zeros_like(obs.w))
    cfg = LossConfig(lam=1.0)
    rotated = np.stack([random_rotation(rng) @ xi for xi in x])
    assert pr_loss_and_grad(x, obs0, cfg).value == pytest.approx(
        pr_loss_and_grad(rotated, obs0, cfg).value, rel=1e-9
    )


def test_gradient_step_reduces_rank(rng):
    x, obs = random_problem(6, 8, rng)
    obs0 = ObservationBatch(obs.u, np.zeros_like(obs.w))
    cfg = LossConfig(lam=1.0)
    lg = pr_loss_and_grad(x, obs0, cfg)
    after = pr_loss_and_grad(x - 1e-3 * lg.grad, obs0, cfg)
    assert after.value < lg.value
