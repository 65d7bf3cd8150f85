"""Residual fully-connected regressor from 2D points to 3D shapes.

Layout::

    in:    dense(2 n_p -> hidden) -> BN -> ReLU
    res_k: dense -> BN -> ReLU -> dense -> BN, + skip, ReLU     (k < num_res_blocks)
    heads: dense(hidden -> 2 n_p) for x, y   |   dense(hidden -> n_p) for z

Dense layers compute ``x @ W + b`` with ``W`` of shape ``(fan_in, fan_out)``.
Forward passes are pure: batch-norm running statistics computed in train mode
are returned in the trace and only written back by :func:`commit_running_stats`.
"""

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .errors import BatchTooSmall, DimensionMismatch, SchemaError, TraceMismatch

CKPT_FORMAT = "prn-ckpt-v1"
BN_EPS = 1e-5


@dataclass
class NetworkConfig:
    n_p: int
    hidden: int = 1024
    num_res_blocks: int = 2
    use_batch_norm: bool = True
    bn_momentum: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        if self.n_p < 1 or self.hidden < 1 or self.num_res_blocks < 1:
            raise ValueError("n_p, hidden and num_res_blocks must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in (0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class NetworkParams:
    weights: dict  # name -> array; trainable
    running: dict = field(default_factory=dict)  # bn name -> {"mean", "var"}
    bn_frozen: bool = False

    def copy(self):
        return NetworkParams(
            weights={k: v.copy() for k, v in self.weights.items()},
            running={k: {s: a.copy() for s, a in v.items()} for k, v in self.running.items()},
            bn_frozen=self.bn_frozen,
        )


@dataclass
class ForwardTrace:
    mode: str
    batch_size: int
    frozen: bool
    cache: dict
    running_updates: dict


def _dense_names(cfg):
    names = [("in", 2 * cfg.n_p, cfg.hidden)]
    for k in range(cfg.num_res_blocks):
        names.append((f"res{k}_fc1", cfg.hidden, cfg.hidden))
        names.append((f"res{k}_fc2", cfg.hidden, cfg.hidden))
    names.append(("head_xy", cfg.hidden, 2 * cfg.n_p))
    names.append(("head_z", cfg.hidden, cfg.n_p))
    return names


def _bn_names(cfg):
    if not cfg.use_batch_norm:
        return []
    names = ["in_bn"]
    for k in range(cfg.num_res_blocks):
        names += [f"res{k}_bn1", f"res{k}_bn2"]
    return names


def init_params(cfg, seed=0):
    """Kaiming-uniform (fan-in) weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, fan_in, fan_out in _dense_names(cfg):
        bound = np.sqrt(6.0 / fan_in)
        weights[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights[f"{name}.b"] = np.zeros(fan_out)
    running = {}
    for name in _bn_names(cfg):
        weights[f"{name}.gamma"] = np.ones(cfg.hidden)
        weights[f"{name}.beta"] = np.zeros(cfg.hidden)
        running[name] = {"mean": np.zeros(cfg.hidden), "var": np.ones(cfg.hidden)}
    return NetworkParams(weights=weights, running=running)


def flatten_observations(u):
    """``(b, 2, n_p)`` observations -> ``(b, 2 n_p)`` inputs (all x, then all y)."""
    u = np.asarray(u, dtype=float)
    return u.reshape(u.shape[0], -1)


# --- layers ----------------------------------------------------------------


def _bn_forward(params, name, x, use_batch_stats, momentum, cache, updates):
    gamma = params.weights[f"{name}.gamma"]
    beta = params.weights[f"{name}.beta"]
    if use_batch_stats:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        rs = params.running[name]
        updates[name] = {
            "mean": (1 - momentum) * rs["mean"] + momentum * mu,
            "var": (1 - momentum) * rs["var"] + momentum * var * n / (n - 1),
        }
    else:
        mu = params.running[name]["mean"]
        var = params.running[name]["var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    cache[name] = (xhat, inv_std, use_batch_stats)
    return gamma * xhat + beta


def _bn_backward(params, name, dy, cache, grads):
    xhat, inv_std, batch_stats = cache[name]
    gamma = params.weights[f"{name}.gamma"]
    grads[f"{name}.gamma"] = np.sum(dy * xhat, axis=0)
    grads[f"{name}.beta"] = np.sum(dy, axis=0)
    dxhat = dy * gamma
    if not batch_stats:
        return dxhat * inv_std
    n = dy.shape[0]
    return (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
    )


def _dense(params, name, x, cache):
    cache[name] = x
    return x @ params.weights[f"{name}.W"] + params.weights[f"{name}.b"]


def _dense_backward(params, name, dy, cache, grads):
    x = cache[name]
    grads[f"{name}.W"] = x.T @ dy
    grads[f"{name}.b"] = dy.sum(axis=0)
    return dy @ params.weights[f"{name}.W"].T


# --- network ---------------------------------------------------------------


def forward(params, cfg, inputs, mode="train"):
    """Map ``(b, 2 n_p)`` inputs to ``(b, 3, n_p)`` shapes.

    In ``train`` mode unfrozen batch norm normalises with batch statistics;
    ``eval`` mode and frozen batch norm use the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2 * cfg.n_p:
        raise DimensionMismatch(f"expected inputs of width {2 * cfg.n_p}, got {x.shape}")
    use_batch_stats = cfg.use_batch_norm and mode == "train" and not params.bn_frozen
    if use_batch_stats and x.shape[0] < 2:
        raise BatchTooSmall("batch norm with batch statistics needs at least 2 samples")

    cache, updates = {}, {}
    m = cfg.bn_momentum

    def bn(name, h):
        if not cfg.use_batch_norm:
            return h
        return _bn_forward(params, name, h, use_batch_stats, m, cache, updates)

    h = bn("in_bn", _dense(params, "in", x, cache))
    cache["in_pre"] = h
    h = np.maximum(h, 0.0)
    for k in range(cfg.num_res_blocks):
        skip = h
        t = bn(f"res{k}_bn1", _dense(params, f"res{k}_fc1", h, cache))
        cache[f"res{k}_pre1"] = t
        t = np.maximum(t, 0.0)
        t = bn(f"res{k}_bn2", _dense(params, f"res{k}_fc2", t, cache))
        s = t + skip
        cache[f"res{k}_pre2"] = s
        h = np.maximum(s, 0.0)
    xy = _dense(params, "head_xy", h, cache)
    z = _dense(params, "head_z", h, cache)
    b = x.shape[0]
    shapes = np.concatenate([xy.reshape(b, 2, cfg.n_p), z.reshape(b, 1, cfg.n_p)], axis=1)
    trace = ForwardTrace(mode=mode, batch_size=b, frozen=params.bn_frozen,
                         cache=cache, running_updates=updates)
    return shapes, trace


def backward(params, cfg, trace, grad_output):
    """Reverse-mode gradients of all trainable weights given ``dJ/d shapes``."""
    g = np.asarray(grad_output, dtype=float)
    if g.shape != (trace.batch_size, 3, cfg.n_p):
        raise TraceMismatch(
            f"grad_output {g.shape} does not match trace batch ({trace.batch_size}, 3, {cfg.n_p})"
        )
    if "head_z" not in trace.cache:
        raise TraceMismatch("trace is incomplete")
    cache = trace.cache
    grads = {}
    b = trace.batch_size
    dh = _dense_backward(params, "head_xy", g[:, :2, :].reshape(b, -1), cache, grads)
    dh = dh + _dense_backward(params, "head_z", g[:, 2, :], cache, grads)

    def bn_back(name, d):
        if not cfg.use_batch_norm:
            return d
        return _bn_backward(params, name, d, cache, grads)

    for k in reversed(range(cfg.num_res_blocks)):
        ds = dh * (cache[f"res{k}_pre2"] > 0)
        dt = bn_back(f"res{k}_bn2", ds)
        dt = _dense_backward(params, f"res{k}_fc2", dt, cache, grads)
        dt = dt * (cache[f"res{k}_pre1"] > 0)
        dt = bn_back(f"res{k}_bn1", dt)
        dt = _dense_backward(params, f"res{k}_fc1", dt, cache, grads)
        dh = ds + dt
    dh = dh * (cache["in_pre"] > 0)
    dh = bn_back("in_bn", dh)
    _dense_backward(params, "in", dh, cache, grads)
    return grads


def commit_running_stats(params, trace):
    """Write the running statistics computed by a train-mode forward into ``params``."""
    if params.bn_frozen:
        return params
    for name, stats in trace.running_updates.items():
        params.running[name] = {k: v.copy() for k, v in stats.items()}
    return params


def freeze_batch_norm(params):
    params.bn_frozen = True
    return params


# --- checkpoints -----------------------------------------------------------


def _array_to_json(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _array_from_json(d):
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, params, cfg, extra=None):
    doc = {
        "format": CKPT_FORMAT,
        "config": asdict(cfg),
        "bn_frozen": params.bn_frozen,
        "weights": {k: _array_to_json(v) for k, v in params.weights.items()},
        "running": {
            k: {s: _array_to_json(a) for s, a in v.items()} for k, v in params.running.items()
        },
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Return ``(params, cfg)`` from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CKPT_FORMAT:
        raise SchemaError(f"not a {CKPT_FORMAT} checkpoint: {doc.get('format')!r}")
    cfg = NetworkConfig(**doc["config"])
    params = NetworkParams(
        weights={k: _array_from_json(v) for k, v in doc["weights"].items()},
        running={
            k: {s: _array_from_json(a) for s, a in v.items()} for k, v in doc["running"].items()
        },
        bn_frozen=bool(doc["bn_frozen"]),
    )
    expected = init_params(cfg)
    for k, v in expected.weights.items():
        if k not in params.weights or params.weights[k].shape != v.shape:
            raise SchemaError(f"checkpoint weight {k} missing or mis-shaped")
    return params, cfg
