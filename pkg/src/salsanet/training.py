"""
Class-balanced loss, Adam with step decay, augmentation and the training loop.
"""

from __future__ import annotations

import dataclasses
import decimal
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .nn import tnsr
from .nn.functional import ShapeError, log_softmax_channels, softmax_channels
from .nn.layers import Mode
from .nn.model import ArchSpec, SalsaNet, build_salsanet
from .pointcloud import PointCloud, RoiSpec, flip_y, jitter, rotate_z
from .projection import NUM_CLASSES, BevSpec, GridSpec, SfvSpec, project, rasterize_labels

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay_rate: float = 0.1
    decay_steps: int = 20000
    dropout: float = 0.5
    batch_size: int = 32
    epochs: int = 500
    max_iterations: int = 0          # 0 means no cap
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weighted_loss: bool = True
    augment_flip: bool = True
    augment_noise: bool = True
    augment_rotate: bool = True
    flip_prob: float = 0.5
    noise_prob: float = 0.5
    noise_sigma: float = 0.01
    rotate_deg: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0
    # data and grid
    view: str = "bev"
    data_dir: str = ""
    out_dir: str = ""
    roi_x_min: float = 0.0
    roi_x_max: float = 50.0
    roi_y_min: float = -6.0
    roi_y_max: float = 12.0
    bev_height: int = 256
    bev_width: int = 64
    cell_x: float = 0.2
    cell_y: float = 0.3
    sfv_rows: int = 64
    sfv_cols: int = 512
    azimuth_fov: float = 90.0
    zenith_min: float = -24.9
    zenith_max: float = 2.0
    bn_momentum: float = 0.99
    slope: float = 0.1

    def __post_init__(self):
        if self.view not in ("bev", "sfv"):
            raise ConfigError(f"view: expected 'bev' or 'sfv', got {self.view!r}")
        if self.lr0 < 0 or self.decay_rate <= 0 or self.decay_steps <= 0:
            raise ConfigError("lr0, decay_rate and decay_steps must be non-negative/positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout: must be in [0, 1), got {self.dropout}")

    @property
    def augmenting(self) -> bool:
        return self.augment_flip or self.augment_noise or self.augment_rotate

    def grid_spec(self) -> GridSpec:
        if self.view == "bev":
            roi = RoiSpec(self.roi_x_min, self.roi_x_max, self.roi_y_min, self.roi_y_max)
            return BevSpec(roi, self.cell_x, self.cell_y, self.bev_height, self.bev_width)
        return SfvSpec(self.azimuth_fov, self.zenith_min, self.zenith_max, self.sfv_rows, self.sfv_cols)

    def arch(self) -> ArchSpec:
        spec = self.grid_spec()
        h, w, c = spec.shape
        return ArchSpec(in_channels=c, input_hw=(h, w), dropout=self.dropout,
                        slope=self.slope, bn_momentum=self.bn_momentum)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, typ, raw: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    pytypes = {"float": float, "int": int, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, pytypes[types[key]], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassStats:
    f: np.ndarray      # per-class cell counts, clamped to >= 1
    alpha: np.ndarray  # 1 / sqrt(f)


def class_weights(f) -> np.ndarray:
    return 1.0 / np.sqrt(np.asarray(f, dtype=np.float64))


def class_frequencies(labels: Sequence[np.ndarray]) -> ClassStats:
    if len(labels) == 0:
        raise ValueError("class frequencies need at least one label grid")
    f = np.zeros(NUM_CLASSES, dtype=np.int64)
    for grid in labels:
        f += np.bincount(np.asarray(grid, dtype=np.int64).ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    f = np.maximum(f, 1)
    return ClassStats(f, class_weights(f))


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray, alpha) -> Tuple[float, np.ndarray]:
    """Mean over pixels of ``-alpha[y] * log softmax(logits)[y]`` and its gradient."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    alpha = np.asarray(alpha, dtype=logits.dtype)
    if alpha.shape != (logits.shape[1],):
        raise ShapeError(f"alpha {alpha.shape} does not match {logits.shape[1]} classes")
    lab = labels.astype(np.intp)[:, None]
    logp = log_softmax_channels(logits)
    picked = np.take_along_axis(logp, lab, axis=1)[:, 0]
    w = alpha[labels.astype(np.intp)]
    m = labels.size
    loss = float(-(w.astype(np.float64) * picked).sum() / m)
    grad = softmax_channels(logits)
    onehot_sub = np.take_along_axis(grad, lab, axis=1) - 1
    np.put_along_axis(grad, lab, onehot_sub, axis=1)
    grad *= (w / m)[:, None]
    return loss, grad


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

def lr_at(iteration: int, config: TrainConfig = TrainConfig()) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    # decimal powers keep 0.01 * 0.1**2 equal to the literal 0.0001
    k = iteration // config.decay_steps
    return float(decimal.Decimal(repr(config.lr0)) * decimal.Decimal(repr(config.decay_rate)) ** k)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.t += 1
    t = state.t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

def augment(cloud: PointCloud, rng, config: TrainConfig = TrainConfig()) -> PointCloud:
    """Flip y, jitter coordinates, rotate about z, in that order.

    Draw order is fixed: flip coin, noise coin, rotation angle, then noise
    samples if the noise branch was taken.
    """
    u_flip = rng.random()
    u_noise = rng.random()
    angle = rng.uniform(-config.rotate_deg, config.rotate_deg)
    if config.augment_flip and u_flip < config.flip_prob:
        cloud = flip_y(cloud)
    if config.augment_noise and u_noise < config.noise_prob:
        cloud = jitter(cloud, config.noise_sigma, rng)
    if config.augment_rotate:
        cloud = rotate_z(cloud, math.radians(angle))
    return cloud


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def spec_to_dict(spec: GridSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["kind"] = "bev" if isinstance(spec, BevSpec) else "sfv"
    return d


def spec_from_dict(d: dict) -> GridSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "bev":
        d["roi"] = RoiSpec(**d["roi"])
        return BevSpec(**d)
    return SfvSpec(**d)


def checkpoint_bytes(net: SalsaNet, spec: GridSpec, iteration: int) -> bytes:
    header = {"version": CHECKPOINT_VERSION, "arch": net.arch.to_dict(),
              "grid": spec_to_dict(spec), "iteration": int(iteration)}
    return tnsr.encode_checkpoint(header, net.state_dict())


def load_checkpoint(data: bytes) -> Tuple[SalsaNet, GridSpec, dict]:
    header, tensors = tnsr.decode_checkpoint(data)
    try:
        arch = ArchSpec.from_dict(header["arch"])
        spec = spec_from_dict(header["grid"])
    except (KeyError, TypeError) as e:
        raise tnsr.FormatError(f"checkpoint header incomplete: {e}") from None
    net = SalsaNet(arch, np.random.default_rng(0))
    try:
        net.load_state_dict(tensors)
    except KeyError as e:
        raise tnsr.FormatError(str(e)) from None
    return net, spec, header


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

Sample = Union[PointCloud, Tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainResult:
    net: SalsaNet
    spec: GridSpec
    losses: List[float]
    lrs: List[float]
    iterations: int
    class_stats: ClassStats

    def log_csv(self) -> str:
        rows = ["iteration,lr,loss"]
        rows += [f"{i},{lr!r},{loss!r}" for i, (lr, loss) in enumerate(zip(self.lrs, self.losses))]
        return "\n".join(rows) + "\n"

    def checkpoint(self) -> bytes:
        return checkpoint_bytes(self.net, self.spec, self.iterations)


def _as_pair(sample: Sample, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(sample, PointCloud):
        return project(sample, spec).to_chw(), rasterize_labels(sample, spec)
    grid, labels = sample
    return np.asarray(grid, dtype=np.float32), np.asarray(labels, dtype=np.uint8)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def train(dataset: Sequence[Sample], config: TrainConfig, net: Optional[SalsaNet] = None,
          out_dir: Optional[Union[str, Path]] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Mini-batch training with shuffled epochs; deterministic given ``config.seed``.

    Samples are either labelled point clouds (augmented and projected per
    batch when augmentation is on) or ready ``(CHW grid, HW labels)`` pairs.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    spec = config.grid_spec()
    net = net if net is not None else build_salsanet(config.seed, config.arch())
    fixed = [_as_pair(s, spec) for s in dataset]
    for g, _ in fixed:
        if g.shape != (net.arch.in_channels, *net.arch.input_hw):
            raise ShapeError(f"sample grid {g.shape} does not fit network input "
                             f"{(net.arch.in_channels, *net.arch.input_hw)}")
    stats = class_frequencies([lab for _, lab in fixed])
    alpha = stats.alpha if config.weighted_loss else np.ones(NUM_CLASSES)
    log.info("class counts %s, alpha %s", stats.f.tolist(), np.round(alpha, 6).tolist())

    def build_batch(epoch: int, b: int, idx: np.ndarray):
        grids, labels = [], []
        rng = _rng(config.seed, 1, epoch, b)
        for i in idx:
            s = dataset[i]
            if config.augmenting and isinstance(s, PointCloud):
                g, lab = _as_pair(augment(s, rng, config), spec)
            else:
                g, lab = fixed[i]
            grids.append(g)
            labels.append(lab)
        return np.stack(grids), np.stack(labels)

    n = len(dataset)
    plan = []
    for epoch in range(config.epochs):
        perm = _rng(config.seed, 0, epoch).permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            plan.append((epoch, b, perm[start:start + config.batch_size]))
    if config.max_iterations:
        plan = plan[:config.max_iterations]

    params = dict(net.named_parameters())
    state = AdamState()
    losses, lrs = [], []
    out = Path(out_dir) if out_dir else None
    # the next batch is assembled on a worker thread while the current step runs
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(build_batch, *plan[0]) if plan else None
        for it, (epoch, b, idx) in enumerate(plan):
            x, y = pending.result()
            if it + 1 < len(plan):
                pending = pool.submit(build_batch, *plan[it + 1])
            lr = lr_at(it, config)
            logits = net.forward(x, Mode.TRAIN, _rng(config.seed, 2, it))
            loss, grad = weighted_ce_loss(logits, y, alpha)
            if not math.isfinite(loss):
                if out is not None:
                    np.savez(out / f"nonfinite_batch_{it}.npz", x=x, y=y, indices=idx)
                raise TrainingError(f"non-finite loss at iteration {it} "
                                    f"(epoch {epoch}, batch {b}, samples {idx.tolist()})")
            net.zero_grads()
            net.backward(grad)
            adam_step(params, dict(net.named_grads()), state, lr,
                      config.beta1, config.beta2, config.adam_eps)
            losses.append(loss)
            lrs.append(lr)
            if on_step is not None:
                on_step(it, lr, loss)
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                (out / f"checkpoint_{it + 1:06d}.snck").write_bytes(checkpoint_bytes(net, spec, it + 1))
    return TrainResult(net, spec, losses, lrs, len(losses), stats)


def predict(net: SalsaNet, grids: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Arg-max class per cell for a stack of CHW grids."""
    out = []
    for s in range(0, len(grids), batch_size):
        logits = net.forward(np.asarray(grids[s:s + batch_size], dtype=np.float32), Mode.INFER)
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0, *net.arch.input_hw), dtype=np.uint8)
