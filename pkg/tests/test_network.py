import numpy as np
import pytest

from prn.errors import BatchTooSmall, DimensionMismatch, SchemaError, TraceMismatch
from prn.gradcheck import param_relative_errors
from prn.network import (
    NetworkConfig,
    backward,
    commit_running_stats,
    forward,
    freeze_batch_norm,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def tiny(n_p=4, hidden=8, **kw):
    cfg = NetworkConfig(n_p=n_p, hidden=hidden, **kw)
    return cfg, init_params(cfg, seed=3)


def fd_param_grads(params, fun, h=1e-6, names=None):
    out = {}
    for name in names or params.weights:
        w = params.weights[name]
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            fp = fun()
            w[idx] = old - h
            fm = fun()
            w[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def test_shape_contract(rng):
    cfg, params = tiny()
    shapes, trace = forward(params, cfg, rng.standard_normal((5, 8)))
    assert shapes.shape == (5, 3, 4)
    assert trace.batch_size == 5


def test_input_width_checked(rng):
    cfg, params = tiny()
    with pytest.raises(DimensionMismatch):
        forward(params, cfg, rng.standard_normal((5, 7)))


def test_batch_of_one_needs_running_stats(rng):
    cfg, params = tiny()
    with pytest.raises(BatchTooSmall):
        forward(params, cfg, rng.standard_normal((1, 8)), mode="train")
    forward(params, cfg, rng.standard_normal((1, 8)), mode="eval")
    freeze_batch_norm(params)
    forward(params, cfg, rng.standard_normal((1, 8)), mode="train")


def test_residual_block_with_zero_inner_weights_is_identity(rng):
    cfg, params = tiny(num_res_blocks=1, use_batch_norm=False)
    x = rng.standard_normal((6, 8))
    for k in ("res0_fc1.W", "res0_fc1.b", "res0_fc2.W", "res0_fc2.b"):
        params.weights[k][...] = 0.0
    _, trace = forward(params, cfg, x)
    # the block input is the post-ReLU trunk activation; its output feeds the heads
    block_in = np.maximum(trace.cache["in_pre"], 0.0)
    np.testing.assert_array_equal(trace.cache["head_xy"], block_in)


def test_residual_identity_with_batch_norm(rng):
    cfg, params = tiny(num_res_blocks=1)
    for k in ("res0_bn2.gamma", "res0_bn2.beta"):
        params.weights[k][...] = 0.0
    _, trace = forward(params, cfg, rng.standard_normal((6, 8)))
    np.testing.assert_array_equal(trace.cache["head_z"], np.maximum(trace.cache["in_pre"], 0.0))


def test_eval_deterministic_and_pure(rng):
    cfg, params = tiny()
    x = rng.standard_normal((5, 8))
    before = params.copy()
    a, _ = forward(params, cfg, x, mode="eval")
    b, _ = forward(params, cfg, x, mode="eval")
    np.testing.assert_array_equal(a, b)
    for name in params.running:
        for s in ("mean", "var"):
            np.testing.assert_array_equal(params.running[name][s], before.running[name][s])


def test_train_forward_does_not_mutate_until_commit(rng):
    cfg, params = tiny()
    before = params.copy()
    _, trace = forward(params, cfg, rng.standard_normal((5, 8)), mode="train")
    np.testing.assert_array_equal(params.running["in_bn"]["mean"], before.running["in_bn"]["mean"])
    commit_running_stats(params, trace)
    assert not np.array_equal(params.running["in_bn"]["mean"], before.running["in_bn"]["mean"])
    assert all(np.all(v["var"] >= 0) for v in params.running.values())


def test_zero_grad_output_gives_zero_grads(rng):
    cfg, params = tiny()
    _, trace = forward(params, cfg, rng.standard_normal((5, 8)))
    grads = backward(params, cfg, trace, np.zeros((5, 3, 4)))
    assert set(grads) == set(params.weights)
    for g in grads.values():
        assert np.all(g == 0.0)


def test_backward_rejects_mismatched_trace(rng):
    cfg, params = tiny()
    _, trace = forward(params, cfg, rng.standard_normal((5, 8)))
    with pytest.raises(TraceMismatch):
        backward(params, cfg, trace, np.zeros((4, 3, 4)))


@pytest.mark.parametrize("mode,frozen", [("train", False), ("train", True), ("eval", False)])
def test_parameter_grads_match_fd(rng, mode, frozen):
    cfg, params = tiny()
    if frozen:
        params.running["in_bn"]["mean"] = rng.standard_normal(8)
        freeze_batch_norm(params)
    x = rng.standard_normal((6, 8))
    ell = rng.standard_normal((6, 3, 4))

    def loss():
        return float(np.sum(ell * forward(params, cfg, x, mode=mode)[0]))

    _, trace = forward(params, cfg, x, mode=mode)
    grads = backward(params, cfg, trace, ell)
    fd = fd_param_grads(params, loss)
    errors = param_relative_errors(grads, fd)
    assert set(errors) == set(params.weights)
    assert max(errors.values()) <= 1e-5, errors


def test_freeze_semantics(rng):
    cfg, params = tiny()
    for _ in range(3):
        _, tr = forward(params, cfg, rng.standard_normal((6, 8)))
        commit_running_stats(params, tr)
    freeze_batch_norm(params)
    snapshot = params.copy()
    _, t1 = forward(params, cfg, rng.standard_normal((6, 8)))
    _, t2 = forward(params, cfg, 5 + rng.standard_normal((6, 8)))
    assert t1.running_updates == {} and t2.running_updates == {}
    commit_running_stats(params, t1)
    for name in params.running:
        np.testing.assert_array_equal(params.running[name]["mean"], snapshot.running[name]["mean"])
    freeze_batch_norm(params)
    assert params.bn_frozen


def test_frozen_and_unfrozen_outputs_differ(rng):
    cfg, params = tiny()
    x = 3.0 + 2.0 * rng.standard_normal((6, 8))
    a, _ = forward(params, cfg, x, mode="train")
    b, _ = forward(freeze_batch_norm(params.copy()), cfg, x, mode="train")
    assert np.abs(a - b).max() > 1e-3


def test_z_head_does_not_touch_xy(rng):
    cfg, params = tiny()
    x = rng.standard_normal((5, 8))
    a, _ = forward(params, cfg, x, mode="eval")
    params.weights["head_z.W"] += rng.standard_normal(params.weights["head_z.W"].shape)
    params.weights["head_z.b"] += 1.0
    b, _ = forward(params, cfg, x, mode="eval")
    np.testing.assert_array_equal(a[:, :2], b[:, :2])
    assert not np.array_equal(a[:, 2], b[:, 2])


def test_checkpoint_round_trip(tmp_path, rng):
    cfg, params = tiny()
    _, tr = forward(params, cfg, rng.standard_normal((6, 8)))
    commit_running_stats(params, tr)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg, extra={"iter": 7})
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    for k, v in params.weights.items():
        np.testing.assert_array_equal(loaded.weights[k], v)
    for k, v in params.running.items():
        np.testing.assert_array_equal(loaded.running[k]["var"], v["var"])


def test_checkpoint_bad_format(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text('{"format": "other"}')
    with pytest.raises(SchemaError):
        load_checkpoint(path)


def test_invalid_config():
    with pytest.raises(ValueError):
        NetworkConfig(n_p=4, hidden=0)
    with pytest.raises(ValueError):
        NetworkConfig(n_p=4, bn_momentum=1.5)
