"""RMSE metrics and the per-scale benchmark harness."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .geometry import bicubic_resample, make_target_grid
from .network import GeoDsrNetwork
from .training import degrade_sample, denormalize

UNITS = ("cm", "levels255")


def rmse(pred, truth, unit: str = "cm") -> float:
    """Root mean squared error; ``levels255`` first maps [0, 1] to [0, 255]."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"rmse: prediction {p.shape} and truth {t.shape} differ")
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r}")
    if unit == "levels255":
        p, t = p * 255.0, t * 255.0
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class EvalItem:
    hr_depth: np.ndarray  # (1, H, W), normalized to [0, 1]
    hr_guide: np.ndarray  # (3, H, W) in [0, 1]
    denorm: tuple[float, float] = (0.0, 1.0)


Upsampler = Callable[[np.ndarray, np.ndarray, tuple[int, int]], np.ndarray]


def bicubic_method(lr_depth: np.ndarray, guide: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    return bicubic_resample(lr_depth, *target)[0]


def network_method(net: GeoDsrNetwork) -> Upsampler:
    def run(lr_depth, guide, target):
        grid = make_target_grid(lr_depth.shape[1], lr_depth.shape[2], *target)
        with T.no_grad():
            out = net(lr_depth, guide, grid)
        return out.data.reshape(target)

    return run


@dataclass
class EvalReport:
    method: str
    unit: str
    scales: list[float]
    rmse: dict[float, float]
    per_sample: dict[float, list[float]]
    seconds_per_image: float = 0.0
    parameters: int = 0

    def to_csv(self, timing: bool = False) -> str:
        buf = io.StringIO()
        head = "method,unit,scale,rmse,parameters"
        buf.write(head + (",seconds_per_image\n" if timing else "\n"))
        for s in self.scales:
            row = f"{self.method},{self.unit},{s!r},{self.rmse[s]!r},{self.parameters}"
            buf.write(row + (f",{self.seconds_per_image:.6f}\n" if timing else "\n"))
        return buf.getvalue()


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: one row per method, one column per scale."""
    if not reports:
        return ""
    scales = reports[0].scales
    unit = reports[0].unit
    head = ["method", "params"] + [f"x{s:g}" for s in scales]
    rows = [head]
    for r in reports:
        rows.append([r.method, str(r.parameters)] + [f"{r.rmse[s]:.3f}" for s in scales])
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = [f"RMSE ({unit})"]
    for row in rows:
        lines.append("  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def eval_crop(depth: np.ndarray, guide: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Crop to a multiple of ``s`` for integer scales; real scales use the floor rule."""
    if float(s) != round(s):
        return depth, guide
    k = int(round(s))
    H, W = depth.shape[1:]
    h, w = max(k, H - H % k), max(k, W - W % k)
    return depth[:, :h, :w], guide[:, :h, :w]


def benchmark(
    method: Union[str, GeoDsrNetwork, Upsampler],
    dataset: Sequence[EvalItem],
    scales: Sequence[float],
    unit: str = "levels255",
    name: str | None = None,
) -> EvalReport:
    """Degrade each HR depth by every scale, upsample back, and average RMSE."""
    if len(dataset) == 0:
        raise ValueError("benchmark dataset is empty")
    if any(s < 1 for s in scales):
        raise ValueError(f"scales must be >= 1, got {list(scales)}")
    params = 0
    if isinstance(method, GeoDsrNetwork):
        params = method.num_parameters()
        name = name or "geodsr"
        fn = network_method(method)
    elif method == "bicubic":
        name = name or "bicubic"
        fn = bicubic_method
    else:
        name = name or getattr(method, "__name__", "method")
        fn = method
    per_sample: dict[float, list[float]] = {}
    elapsed = 0.0
    runs = 0
    for s in scales:
        s = float(s)
        errs = []
        for item in dataset:
            depth, guide = eval_crop(item.hr_depth, item.hr_guide, s)
            sample = degrade_sample(depth, guide, s)
            target = sample.hr_depth.shape[1:]
            t0 = time.perf_counter()
            pred = fn(sample.lr_depth, sample.hr_guide, target)
            elapsed += time.perf_counter() - t0
            runs += 1
            lo, hi = item.denorm
            errs.append(rmse(denormalize(pred, lo, hi), denormalize(depth[0], lo, hi), unit))
        per_sample[s] = errs
    table = {s: float(np.mean(v)) for s, v in per_sample.items()}
    return EvalReport(name, unit, [float(s) for s in scales], table, per_sample, elapsed / max(runs, 1), params)
