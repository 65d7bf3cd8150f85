"""Synthetic non-rigid sequences, sequence files, and mini-batch samplers."""

from dataclasses import dataclass, field
import json
import math
from typing import Optional

import numpy as np

from .errors import InsufficientData, InvalidSpec, SchemaError
from .geometry import axis_angle, center, random_rotation

DATASET_FORMAT = "prn-seq-v1"


@dataclass
class SyntheticSpec:
    n_p: int = 15
    n_frames: int = 500
    rank: int = 3
    coeff_smoothness: float = 10.0  # moving-average window, in frames
    rotation_speed: float = 0.02  # radians per frame
    num_cameras: int = 4
    noise_std: float = 0.0
    missing_rate: float = 0.0
    seed: int = 0
    fps: float = 10.0
    deformation_scale: float = 0.3  # std of non-mean basis coefficients

    def validate(self):
        if self.n_p < 3 or self.n_frames < 1 or self.num_cameras < 1:
            raise InvalidSpec("need n_p >= 3, n_frames >= 1, num_cameras >= 1")
        if not 1 <= self.rank <= 3 * self.n_p:
            raise InvalidSpec(f"rank must be in [1, 3 n_p], got {self.rank}")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise InvalidSpec("missing_rate must be in [0, 1]")
        if self.noise_std < 0 or self.coeff_smoothness < 0 or self.fps <= 0:
            raise InvalidSpec("noise_std and coeff_smoothness must be >= 0, fps > 0")


@dataclass
class Frame:
    u: np.ndarray  # (2, n_p)
    w: np.ndarray  # (2, n_p)
    x3d_gt: Optional[np.ndarray] = None  # (3, n_p), camera coordinates
    camera_id: int = 0
    time: float = 0.0


@dataclass
class SequenceDataset:
    frames: list
    n_p: int
    name: str = "sequence"
    fps: float = 10.0
    units: str = "unit"
    _camera_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __len__(self):
        return len(self.frames)

    def camera_index(self):
        """camera id -> frame indices ordered by time."""
        if self._camera_index is None:
            idx = {}
            for i, fr in enumerate(self.frames):
                idx.setdefault(fr.camera_id, []).append(i)
            for cam, lst in idx.items():
                lst.sort(key=lambda i: self.frames[i].time)
            self._camera_index = idx
        return self._camera_index

    def has_ground_truth(self):
        return all(fr.x3d_gt is not None for fr in self.frames)

    def subset(self, indices, name=None):
        return SequenceDataset(
            frames=[self.frames[i] for i in indices], n_p=self.n_p,
            name=name or self.name, fps=self.fps, units=self.units,
        )


def _smooth(noise, width):
    width = max(int(round(width)), 1)
    if width == 1:
        return noise
    kernel = np.ones(width) / width
    out = np.stack(
        [np.convolve(noise[:, k], kernel, mode="valid") for k in range(noise.shape[1])],
        axis=1,
    )
    # moving average shrinks the variance by 1/width
    return out * math.sqrt(width)


def generate_world_shapes(spec, rng):
    """Rank-``spec.rank`` sequence of centered world shapes, ``(n_frames, 3, n_p)``."""
    bases = center(rng.standard_normal((spec.rank, 3, spec.n_p)))
    width = max(int(round(spec.coeff_smoothness)), 1)
    noise = rng.standard_normal((spec.n_frames + width - 1, spec.rank))
    coeffs = spec.deformation_scale * _smooth(noise, width)
    coeffs[:, 0] += 1.0
    return np.einsum("tk,kij->tij", coeffs, bases)


def generate(spec):
    """Orthographic multi-camera observations of a synthetic low-rank deforming shape.

    Every camera sees all ``n_frames`` time steps; frames are stored camera by
    camera in time order.  Masked points have ``u = w = 0``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shapes = generate_world_shapes(spec, rng)
    frames = []
    for cam in range(spec.num_cameras):
        base = random_rotation(rng)
        axis = rng.standard_normal(3)
        for t in range(spec.n_frames):
            r = axis_angle(axis, spec.rotation_speed * t) @ base
            x = r @ shapes[t]
            u = x[:2].copy()
            if spec.noise_std > 0:
                u = u + spec.noise_std * rng.standard_normal(u.shape)
            w = np.ones_like(u)
            if spec.missing_rate > 0:
                missing = rng.random(spec.n_p) < spec.missing_rate
                u[:, missing] = 0.0
                w[:, missing] = 0.0
            frames.append(Frame(u=u, w=w, x3d_gt=x, camera_id=cam, time=t / spec.fps))
    return SequenceDataset(frames=frames, n_p=spec.n_p, name=f"synthetic-{spec.seed}",
                           fps=spec.fps)


def split_by_time(ds, train_fraction=0.8):
    """Per-camera temporal split into (train, test) datasets."""
    train, test = [], []
    for cam, idx in sorted(ds.camera_index().items()):
        cut = int(round(len(idx) * train_fraction))
        train += idx[:cut]
        test += idx[cut:]
    return ds.subset(train, ds.name + "-train"), ds.subset(test, ds.name + "-test")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def dataset_to_dict(ds):
    return {
        "format": DATASET_FORMAT,
        "name": ds.name,
        "n_p": ds.n_p,
        "fps": ds.fps,
        "units": ds.units,
        "frames": [
            {
                "camera_id": fr.camera_id,
                "time": fr.time,
                "u": np.asarray(fr.u).tolist(),
                "w": np.asarray(fr.w).tolist(),
                "x3d_gt": None if fr.x3d_gt is None else np.asarray(fr.x3d_gt).tolist(),
            }
            for fr in ds.frames
        ],
    }


def _matrix(value, rows, n_p, what, i):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"frame {i}: {what} is not numeric") from exc
    if a.shape != (rows, n_p):
        raise SchemaError(f"frame {i}: {what} has shape {a.shape}, expected {(rows, n_p)}")
    if not np.all(np.isfinite(a)):
        raise SchemaError(f"frame {i}: {what} has non-finite entries")
    return a


def dataset_from_dict(doc):
    if doc.get("format") != DATASET_FORMAT:
        raise SchemaError(f"unknown dataset format {doc.get('format')!r}")
    for key in ("n_p", "fps", "units", "frames"):
        if key not in doc:
            raise SchemaError(f"missing field {key!r}")
    n_p = doc["n_p"]
    if not isinstance(n_p, int) or n_p < 1:
        raise SchemaError(f"n_p must be a positive integer, got {n_p!r}")
    frames = []
    last_time = {}
    for i, f in enumerate(doc["frames"]):
        for key in ("camera_id", "time", "u", "w"):
            if key not in f:
                raise SchemaError(f"frame {i}: missing field {key!r}")
        u = _matrix(f["u"], 2, n_p, "u", i)
        w = _matrix(f["w"], 2, n_p, "w", i)
        if np.any(w < 0) or np.any(w > 1):
            raise SchemaError(f"frame {i}: weights must lie in [0, 1]")
        gt = f.get("x3d_gt")
        gt = None if gt is None else _matrix(gt, 3, n_p, "x3d_gt", i)
        cam = int(f["camera_id"])
        t = float(f["time"])
        if t < last_time.get(cam, -math.inf):
            raise SchemaError(f"frame {i}: time decreases within camera {cam}")
        last_time[cam] = t
        frames.append(Frame(u=u, w=w, x3d_gt=gt, camera_id=cam, time=t))
    return SequenceDataset(frames=frames, n_p=n_p, name=doc.get("name", "sequence"),
                           fps=float(doc["fps"]), units=str(doc["units"]))


def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_dict(ds), fh)


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return dataset_from_dict(doc)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

STRATEGIES = ("sequential_stride", "camera_alternating", "random_cross_sequence")


@dataclass
class SamplerConfig:
    strategy: str = "camera_alternating"
    batch_frames: int = 32
    num_groups: int = 4
    camera_interval_s: float = 0.5
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.num_groups < 1 or self.batch_frames % self.num_groups:
            raise ValueError("batch_frames must be divisible by num_groups")
        if self.batch_frames // self.num_groups < 2:
            raise ValueError("each group needs at least two frames")


@dataclass
class Group:
    """One alignment group: frames, stacked observations and (optional) ground truth."""

    refs: list  # (dataset index, frame index)
    u: np.ndarray
    w: np.ndarray
    x3d_gt: Optional[np.ndarray]

    @property
    def inputs(self):
        return self.u.reshape(self.u.shape[0], -1)


def _make_group(datasets, refs):
    frames = [datasets[d].frames[i] for d, i in refs]
    gt = None
    if all(fr.x3d_gt is not None for fr in frames):
        gt = np.stack([fr.x3d_gt for fr in frames])
    return Group(refs=list(refs), u=np.stack([fr.u for fr in frames]),
                 w=np.stack([fr.w for fr in frames]), x3d_gt=gt)


def _camera_alternating_refs(ds_index, ds, n, interval_frames, rng):
    cams = sorted(ds.camera_index())
    index = ds.camera_index()
    length = min(len(index[c]) for c in cams)
    span = (n - 1) * interval_frames + 1
    if length < span:
        raise InsufficientData(
            f"camera sequences of {length} frames cannot hold {n} samples "
            f"{interval_frames} frames apart"
        )
    start = int(rng.integers(0, length - span + 1))
    return [
        (ds_index, index[cams[j % len(cams)]][start + j * interval_frames])
        for j in range(n)
    ]


def sample_batch(data, cfg, step):
    """Return ``cfg.num_groups`` groups of ``batch_frames / num_groups`` frames.

    ``data`` is one SequenceDataset or a list of them.  Sampling is a pure
    function of ``(cfg.seed, step)``.
    """
    datasets = data if isinstance(data, (list, tuple)) else [data]
    n_f = cfg.batch_frames
    per_group = n_f // cfg.num_groups
    rng = np.random.default_rng([cfg.seed, step])

    if cfg.strategy == "sequential_stride":
        order = [(d, i) for d, ds in enumerate(datasets) for i in _stride_order(len(ds), cfg.stride)]
        if len(order) < n_f:
            raise InsufficientData(f"{len(order)} frames cannot fill a batch of {n_f}")
        refs = [order[(step * n_f + j) % len(order)] for j in range(n_f)]
    elif cfg.strategy == "random_cross_sequence":
        total = sum(len(ds) for ds in datasets)
        if total < n_f:
            raise InsufficientData(f"{total} frames cannot fill a batch of {n_f}")
        refs = []
        for _ in range(n_f):
            d = int(rng.integers(0, len(datasets)))
            refs.append((d, int(rng.integers(0, len(datasets[d])))))
    else:
        refs = []
        for _ in range(cfg.num_groups):
            d = int(rng.integers(0, len(datasets)))
            ds = datasets[d]
            interval = max(int(round(cfg.camera_interval_s * ds.fps)), 1)
            refs += _camera_alternating_refs(d, ds, per_group, interval, rng)

    return [
        _make_group(datasets, refs[g * per_group:(g + 1) * per_group])
        for g in range(cfg.num_groups)
    ]


def _stride_order(n, stride):
    stride = max(int(stride), 1)
    return [i for offset in range(stride) for i in range(offset, n, stride)]
