"""L1 objective, Adam, bicubic degradation and the two-stage training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import ScaleSpec, bicubic_resample, make_target_grid
from .network import GeoDsrNetwork
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# -- objective -----------------------------------------------------------------

def l1_loss(pred: Tensor, truth) -> Tensor:
    """Mean absolute difference over all sampled points."""
    truth = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=pred.dtype))
    if pred.shape != truth.shape:
        raise ValueError(f"l1_loss: prediction {pred.shape} and truth {truth.shape} differ")
    return T.mean(T.abs_(pred - truth))


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0, tuple(betas), eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"parameter {i} has no gradient")
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, betas, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


# -- data ------------------------------------------------------------------------

def normalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def denormalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


@dataclass
class DepthSample:
    lr_depth: np.ndarray
    hr_guide: np.ndarray
    hr_depth: np.ndarray
    spec: ScaleSpec
    denorm: tuple[float, float] = (0.0, 1.0)


def lr_extent(n: int, s: float) -> int:
    # tiny epsilon so 256 / (256 / 17) still floors to 17
    return max(1, int(math.floor(n / s + 1e-9)))


def degrade_sample(hr_depth, hr_guide, s: float, denorm: tuple[float, float] = (0.0, 1.0)) -> DepthSample:
    """Bicubic-downsample the HR depth by ``s`` and record the exact per-axis scale."""
    if not s >= 1:
        raise ValueError(f"degradation scale must be >= 1, got {s}")
    hr_depth = np.asarray(hr_depth, dtype=np.float32)
    hr_guide = np.asarray(hr_guide, dtype=np.float32)
    _, H, W = hr_depth.shape
    if hr_guide.shape[1:] != (H, W):
        raise ValueError(f"guide {hr_guide.shape} and depth {hr_depth.shape} extents differ")
    h, w = lr_extent(H, s), lr_extent(W, s)
    lr = bicubic_resample(hr_depth, h, w)
    if (h, w) != (H, W):
        lr = np.clip(lr, 0.0, 1.0)
    return DepthSample(lr.astype(np.float32), hr_guide, hr_depth, ScaleSpec(H / h, W / w), denorm)


# -- configuration ---------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: int = 1
    fixed_scale: float = 8.0
    scale_range: tuple[float, float] = (1.0, 16.0)
    crop: int = 256
    lr: float = 1e-4
    lr_decay: float = 0.2
    decay_every: int = 60
    epochs: int = 200
    batch: int = 1
    betas: tuple[float, float] = (0.9, 0.99)
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.scale_range[0] < 1 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError(f"invalid scale range {self.scale_range}")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("crop", 64)
        kw.setdefault("lr", 1e-3)
        kw.setdefault("max_steps", 300)
        return cls(**kw)

    def lr_at(self, epoch: int) -> float:
        """Learning rate during 1-based ``epoch``."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)

    def draw_scale(self, rng: np.random.Generator) -> float:
        if self.stage == 1:
            return float(self.fixed_scale)
        return float(rng.uniform(*self.scale_range))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        out: dict = {}
        for key, value in d.items():
            if key in ("stage", "crop", "decay_every", "epochs", "batch", "seed", "checkpoint_every"):
                out[key] = int(value)
            elif key in ("fixed_scale", "lr", "lr_decay"):
                out[key] = float(value)
            elif key == "max_steps":
                out[key] = None if value in (None, "", "None", "none") else int(value)
            elif key in ("scale_range", "betas"):
                if isinstance(value, str):
                    value = [float(v) for v in value.strip("()[] ").split(",")]
                out[key] = tuple(float(v) for v in value)
        return cls(**out)


# -- training loop ---------------------------------------------------------------

LOG_FIELDS = ("step", "epoch", "scale", "loss", "lr")


@dataclass
class StageResult:
    params: dict[str, np.ndarray]
    losses: list[dict] = field(default_factory=list)

    def loss_values(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.losses])


def random_crop(depth: np.ndarray, guide: np.ndarray, crop: int, rng: np.random.Generator):
    _, H, W = depth.shape
    ch, cw = min(crop, H), min(crop, W)
    y = int(rng.integers(0, H - ch + 1))
    x = int(rng.integers(0, W - cw + 1))
    return depth[:, y : y + ch, x : x + cw], guide[:, y : y + ch, x : x + cw]


def write_loss_log(rows: list[dict], path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r["step"], r["epoch"], repr(r["scale"]), repr(r["loss"]), repr(r["lr"])])
    os.replace(tmp, path)


def run_stage(
    net: GeoDsrNetwork,
    data: Sequence[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    log_path: str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    dump_dir: str | os.PathLike | None = None,
) -> StageResult:
    """Train ``net`` in place for one stage and return its parameters and loss log.

    ``data`` holds (hr_depth (1, H, W), hr_guide (3, H, W)) pairs with depth
    already normalized to [0, 1].
    """
    from .io import Checkpoint, save_checkpoint

    if not data:
        raise ValueError("training data is empty")
    params = net.parameters()
    opt = Adam(params, config.lr, config.betas)
    rows: list[dict] = []
    step = 0
    n = len(data)
    total = config.max_steps if config.max_steps is not None else config.epochs * n
    epoch = 0
    while step < total:
        epoch += 1
        lr = config.lr_at(epoch)
        opt.lr = lr
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for index in order:
            if step >= total:
                break
            rng = np.random.default_rng([config.seed, epoch, int(index)])
            hr_depth, hr_guide = data[index]
            depth, guide = random_crop(np.asarray(hr_depth), np.asarray(hr_guide), config.crop, rng)
            s = config.draw_scale(rng)
            sample = degrade_sample(depth, guide, s)
            _, H, W = sample.hr_depth.shape
            _, h, w = sample.lr_depth.shape
            grid = make_target_grid(h, w, H, W)
            opt.zero_grad()
            pred = net(sample.lr_depth, sample.hr_guide, grid, sample.spec)
            loss = l1_loss(pred, sample.hr_depth.reshape(1, -1))
            value = float(loss.data)
            if not math.isfinite(value):
                _dump_batch(dump_dir, step, sample, pred)
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch}, sample {index}, scale {s:.4f})")
            T.backward(loss)
            opt.step()
            step += 1
            rows.append({"step": step, "epoch": epoch, "scale": s, "loss": value, "lr": lr})
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, Checkpoint(net.config, config, net.state_dict()))
    if log_path:
        write_loss_log(rows, log_path)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, Checkpoint(net.config, config, net.state_dict()))
    log.info("stage %d finished after %d steps, last loss %.5f", config.stage, step, rows[-1]["loss"])
    return StageResult(net.state_dict(), rows)


def _dump_batch(dump_dir, step: int, sample: DepthSample, pred: Tensor) -> None:
    target = Path(dump_dir) if dump_dir else Path.cwd()
    target.mkdir(parents=True, exist_ok=True)
    path = target / f"nan_step{step}.npz"
    np.savez(
        path,
        lr_depth=sample.lr_depth,
        hr_guide=sample.hr_guide,
        hr_depth=sample.hr_depth,
        scale=np.array([sample.spec.s_y, sample.spec.s_x]),
        prediction=pred.data,
    )
    log.error("wrote diagnostic dump to %s", path)


def train_two_stage(
    net: GeoDsrNetwork,
    data,
    stage1: TrainConfig,
    stage2: TrainConfig,
) -> tuple[StageResult, StageResult]:
    """Fixed-scale pretraining followed by random-scale fine-tuning."""
    first = run_stage(net, data, stage1)
    second = run_stage(net, data, stage2)
    return first, second
