"""Finite-difference verification of the loss gradient."""

import time

import numpy as np

from .align import gpa_align, to_aligned_matrix
from .loss import LossConfig, ObservationBatch, data_term, nuclear_norm, pr_loss_and_grad


def random_problem(n_f, n_p, rng, deform=0.5):
    """Random non-degenerate shapes with partially weighted 2D observations."""
    base = rng.standard_normal((3, n_p))
    from .geometry import random_rotation

    shapes = np.stack(
        [random_rotation(rng) @ (base + deform * rng.standard_normal((3, n_p))) + rng.standard_normal((3, 1))
         for _ in range(n_f)]
    )
    u = shapes[:, :2, :] + 0.3 * rng.standard_normal((n_f, 2, n_p))
    w = rng.uniform(0.0, 1.0, size=(n_f, 2, n_p))
    w[rng.random((n_f, 2, n_p)) < 0.1] = 0.0
    return shapes, ObservationBatch(u, w)


def central_difference(fun, x, h):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


def relative_error(analytic, reference):
    """Largest absolute deviation, relative to the largest reference entry."""
    scale = max(float(np.max(np.abs(reference))), np.finfo(float).tiny)
    return float(np.max(np.abs(analytic - reference))) / scale


def param_relative_errors(grads, reference):
    """Per-parameter max deviation, scaled by the largest reference gradient overall.

    A shared scale keeps parameters whose exact gradient vanishes (e.g. a bias
    feeding straight into batch norm) from reporting pure finite-difference noise.
    """
    scale = max(max(float(np.max(np.abs(r))) for r in reference.values()),
                np.finfo(float).tiny)
    return {k: float(np.max(np.abs(grads[k] - reference[k]))) / scale for k in reference}


def min_spectral_gap(matrix):
    s = np.linalg.svd(matrix, compute_uv=False)
    if s.size < 2:
        return np.inf
    return float(np.min(-np.diff(s)) / s[0])


def loss_value(batch, obs, cfg, init_rotations=None):
    """Independent evaluation of the cost: fresh alignment, then data + nuclear norm."""
    state = gpa_align(batch, tol=0.0, step_tol=1e-14, max_iter=500,
                      init_rotations=init_rotations, warn=False)
    return data_term(batch, obs) + cfg.lam * nuclear_norm(to_aligned_matrix(state))


def check_batch(batch, obs, cfg, h=1e-5, gap_tol=1e-3):
    """Compare the analytic gradient with central differences for one batch."""
    lg = pr_loss_and_grad(batch, obs, cfg)
    gap = min_spectral_gap(to_aligned_matrix(lg.state))
    if gap < gap_tol:
        return {"skipped": True, "spectral_gap": gap}
    rot0 = lg.state.rotations
    fd = central_difference(lambda x: loss_value(x, obs, cfg, rot0), batch, h)
    return {"skipped": False, "spectral_gap": gap, "rel_err": relative_error(lg.grad, fd),
            "value": lg.value}


def run_gradcheck(n_batches=20, n_f=6, n_p=8, lam=0.05, seed=0, tol=1e-4, h=1e-5,
                  on_result=None, max_draws=None):
    """Check ``n_batches`` non-skipped random batches; returns a summary dict."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(lam=lam)
    results = []
    draws = 0
    max_draws = max_draws or 10 * n_batches
    t0 = time.perf_counter()
    while sum(not r["skipped"] for r in results) < n_batches and draws < max_draws:
        draws += 1
        batch, obs = random_problem(n_f, n_p, rng)
        res = check_batch(batch, obs, cfg, h=h)
        res["batch"] = draws - 1
        if not res["skipped"]:
            res["passed"] = res["rel_err"] <= tol
        results.append(res)
        if on_result is not None:
            on_result(res)
    checked = [r for r in results if not r["skipped"]]
    return {
        "checked": len(checked),
        "skipped": len(results) - len(checked),
        "max_rel_err": max((r["rel_err"] for r in checked), default=float("nan")),
        "passed": len(checked) >= n_batches and all(r["passed"] for r in checked),
        "seconds": time.perf_counter() - t0,
        "results": results,
    }
