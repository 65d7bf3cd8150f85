"""Training loop and evaluation."""

from dataclasses import dataclass, field, asdict
import json
import logging
import os

import numpy as np

from .data import SamplerConfig, sample_batch
from .errors import MissingGroundTruth, NonFiniteLoss
from .loss import LossConfig, ObservationBatch, pr_loss_and_grad
from .metrics import eval_with_reflection, mpjpe, normalized_error
from .network import (
    NetworkConfig,
    backward,
    commit_running_stats,
    flatten_observations,
    forward,
    freeze_batch_norm,
    init_params,
    save_checkpoint,
)
from .optim import AdamState, adam_step, lr_at

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    network: NetworkConfig
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    total_iters: int = 20000
    lr0: float = 1e-4
    lr_decay: float = 0.8
    decay_every: int = 5000
    lam: float = 0.05
    bn_freeze_fraction: float = 0.7
    seed: int = 0
    checkpoint_every: int = 1000
    sum_groups: bool = True  # False averages group losses

    def __post_init__(self):
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 0.0 <= self.bn_freeze_fraction <= 1.0:
            raise ValueError("bn_freeze_fraction must be in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @classmethod
    def from_dict(cls, d, n_p=None):
        d = dict(d)
        net = dict(d.pop("network", {}))
        if n_p is not None:
            net.setdefault("n_p", n_p)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        sampler = SamplerConfig(**d.pop("sampler", {}))
        return cls(network=NetworkConfig(**net), sampler=sampler, **d)

    def to_dict(self):
        return asdict(self)

    def lr(self, iteration):
        return lr_at(iteration, self.lr0, self.lr_decay, self.decay_every)


def train_step(params, cfg, adam, groups, iteration):
    """One optimisation step over a list of groups; returns the log record."""
    net = cfg.network
    sizes = [g.u.shape[0] for g in groups]
    u = np.concatenate([g.u for g in groups])
    shapes, trace = forward(params, net, flatten_observations(u), "train")

    loss_cfg = LossConfig(lam=cfg.lam)
    weight = 1.0 if cfg.sum_groups else 1.0 / len(groups)
    grad_out = np.zeros_like(shapes)
    total = data = reg = 0.0
    start = 0
    for g, n in zip(groups, sizes):
        sl = slice(start, start + n)
        start += n
        lg = pr_loss_and_grad(shapes[sl], ObservationBatch(g.u, g.w), loss_cfg)
        grad_out[sl] = weight * lg.grad
        total += weight * lg.value
        data += weight * lg.data
        reg += weight * lg.reg

    if not (np.isfinite(total) and np.all(np.isfinite(grad_out))):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {iteration}: J={total}, data={data}, reg={reg}, "
            f"max|shape|={np.nanmax(np.abs(shapes))}"
        )
    grads = backward(params, net, trace, grad_out)
    commit_running_stats(params, trace)
    lr = cfg.lr(iteration)
    adam_step(params.weights, grads, adam, lr)
    return {"iter": iteration, "lr": lr, "loss": total, "data": data, "reg": reg}


def train(cfg, data, checkpoint_dir=None, on_record=None):
    """Train a regressor on ``data`` (a SequenceDataset or a list of them).

    Returns ``(params, records)`` where ``records`` holds one dict per
    iteration.  ``on_record`` is called with each record as it is produced.
    """
    params = init_params(cfg.network, seed=cfg.seed)
    adam = AdamState()
    freeze_at = int(round(cfg.bn_freeze_fraction * cfg.total_iters))
    records = []
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    for it in range(cfg.total_iters):
        if it >= freeze_at and not params.bn_frozen:
            freeze_batch_norm(params)
        groups = sample_batch(data, cfg.sampler, it)
        rec = train_step(params, cfg, adam, groups, it)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        done = it + 1
        if checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"model_{done:06d}.ckpt"),
                            params, cfg.network, extra={"iter": done})
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "model.ckpt"), params, cfg.network,
                        extra={"iter": cfg.total_iters, "train_config": cfg.to_dict()})
        with open(os.path.join(checkpoint_dir, "log.jsonl"), "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return params, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def reconstruct(params, net_cfg, dataset, batch_size=512):
    """Eval-mode predictions for every frame, centered, ``(N, 3, n_p)``.

    Depth offsets are unobservable under orthographic projection, so each
    predicted shape is translated to have zero mean.
    """
    u = np.stack([fr.u for fr in dataset.frames])
    out = []
    for s in range(0, len(u), batch_size):
        shapes, _ = forward(params, net_cfg, flatten_observations(u[s:s + batch_size]), "eval")
        out.append(shapes)
    shapes = np.concatenate(out) if out else np.zeros((0, 3, net_cfg.n_p))
    return shapes - shapes.mean(axis=-1, keepdims=True)


@dataclass
class EvalReport:
    mpjpe: float
    ne: float
    per_frame_mpjpe: np.ndarray
    per_frame_ne: np.ndarray
    reflection_used: np.ndarray

    def to_dict(self):
        return {
            "mpjpe": self.mpjpe,
            "ne": self.ne,
            "per_frame_mpjpe": self.per_frame_mpjpe.tolist(),
            "per_frame_ne": self.per_frame_ne.tolist(),
            "reflection_used": self.reflection_used.tolist(),
        }


def evaluate_shapes(pred, gt):
    errs_m, errs_n, refl = [], [], []
    for p, g in zip(pred, gt):
        m, _ = eval_with_reflection(p, g, mpjpe)
        n, r = eval_with_reflection(p, g, normalized_error)
        errs_m.append(m)
        errs_n.append(n)
        refl.append(r)
    errs_m, errs_n = np.array(errs_m), np.array(errs_n)
    return EvalReport(mpjpe=float(errs_m.mean()), ne=float(errs_n.mean()),
                      per_frame_mpjpe=errs_m, per_frame_ne=errs_n,
                      reflection_used=np.array(refl, dtype=bool))


def evaluate(params, net_cfg, dataset):
    """Reflection-disambiguated MPJPE and NE over a dataset with ground truth.

    ``reflection_used`` reports the choice made for NE; MPJPE picks its own.
    """
    if not dataset.has_ground_truth():
        raise MissingGroundTruth("evaluation needs x3d_gt on every frame")
    pred = reconstruct(params, net_cfg, dataset)
    gt = np.stack([fr.x3d_gt for fr in dataset.frames])
    return evaluate_shapes(pred, gt)
