"""Coordinate frames, query grids, warp maps and bicubic resampling.

All positions use the cell-center convention: pixel ``i`` of an axis with
``n`` samples covers ``[i - 0.5, i + 0.5]``. Query coordinates are always
expressed in the low-resolution depth frame as ``(y, x)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

D_FLOOR = 0.5


@dataclass(frozen=True)
class ScaleSpec:
    """Per-axis upsampling ratios ``H/h`` and ``W/w``."""

    s_y: float
    s_x: float

    def __post_init__(self):
        if not (self.s_y > 0 and self.s_x > 0) or not (math.isfinite(self.s_y) and math.isfinite(self.s_x)):
            raise ValueError(f"scale factors must be positive and finite, got ({self.s_y}, {self.s_x})")

    @classmethod
    def isotropic(cls, s: float) -> "ScaleSpec":
        return cls(float(s), float(s))

    @classmethod
    def from_shapes(cls, h: int, w: int, H: int, W: int) -> "ScaleSpec":
        return cls(H / h, W / w)

    @property
    def s_eff(self) -> float:
        # geometric mean; equals s for isotropic scales
        if self.s_y == self.s_x:
            return self.s_y
        return math.sqrt(self.s_y * self.s_x)

    @property
    def is_upsampling(self) -> bool:
        return self.s_y >= 1 and self.s_x >= 1


@dataclass(frozen=True, eq=False)
class CoordGrid:
    """Query positions in the LR frame, optionally laid out as a regular image."""

    coords: np.ndarray
    source_h: int
    source_w: int
    target_shape: tuple[int, int] | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "coords", c)
        if not np.all(np.isfinite(c)):
            raise ValueError("CoordGrid coordinates must be finite")
        if self.target_shape is not None:
            th, tw = self.target_shape
            if th * tw != len(c):
                raise ValueError(f"target_shape {self.target_shape} does not match {len(c)} coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def regular(self) -> bool:
        return self.target_shape is not None

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.target_shape if self.target_shape is not None else (1, len(self.coords))


@dataclass(frozen=True, eq=False)
class WarpMap:
    """An arbitrary set of LR-frame query coordinates laid out as an ``H x W`` image.

    ``source_h``/``source_w`` may be left unset and bound later with
    :meth:`bind` once the depth map being sampled is known.
    """

    coords: np.ndarray
    shape: tuple[int, int]
    provenance: str = "manual"
    source_h: int | None = None
    source_w: int | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        if self.provenance not in ("file", "affine", "manual"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.shape[0] * self.shape[1] != len(c):
            raise ValueError(f"warp map declares {self.shape} pixels but holds {len(c)} coordinates")
        if not np.all(np.isfinite(c)):
            raise ValueError("WarpMap coordinates must be finite")

    def __len__(self) -> int:
        return len(self.coords)

    def bind(self, source_h: int, source_w: int) -> "WarpMap":
        return WarpMap(self.coords, self.shape, self.provenance, source_h, source_w)

    @property
    def regular(self) -> bool:
        return False

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.shape


def _axis_centers(n_src: int, n_dst: int) -> np.ndarray:
    return (np.arange(n_dst, dtype=np.float64) + 0.5) * n_src / n_dst - 0.5


def make_target_grid(source_h: int, source_w: int, target_h: int, target_w: int) -> CoordGrid:
    """Regular grid of output pixel centers mapped into the source frame."""
    if min(source_h, source_w, target_h, target_w) < 1:
        raise ValueError(f"grid extents must be >= 1, got source {source_h}x{source_w} target {target_h}x{target_w}")
    ys = _axis_centers(source_h, target_h)
    xs = _axis_centers(source_w, target_w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
    return CoordGrid(coords, source_h, source_w, (target_h, target_w))


def change_frame(coords: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Re-express cell-center coordinates of an ``src`` image in a ``dst`` image of the same extent."""
    c = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(c)
    out[:, 0] = (c[:, 0] + 0.5) * dst[0] / src[0] - 0.5
    out[:, 1] = (c[:, 1] + 0.5) * dst[1] / src[1] - 0.5
    return out


def window_offsets(k: int) -> np.ndarray:
    """Row-major (dy, dx) offsets of a ``k x k`` window relative to its center."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    r = k // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([dy.reshape(-1), dx.reshape(-1)], axis=1)


def reciprocal_distance_field(k: int, spec: ScaleSpec | float, dtype=np.float32) -> Tensor:
    """``1 / (s * max(|offset|^2, D_FLOOR))`` per window offset, shaped (k*k, 1)."""
    s = spec.s_eff if isinstance(spec, ScaleSpec) else float(spec)
    if not s > 0:
        raise ValueError(f"effective scale must be positive, got {s}")
    off = window_offsets(k)
    d2 = np.maximum((off.astype(np.float64) ** 2).sum(axis=1), D_FLOOR)
    vals = 1.0 / (s * d2)
    return Tensor(vals.reshape(-1, 1).astype(dtype))


def affine_matrix(affine) -> np.ndarray:
    a = np.asarray(affine, dtype=np.float64).reshape(-1)
    if a.size != 6:
        raise ValueError(f"affine needs 6 numbers (a, b, c, d, e, f), got {a.size}")
    return a.reshape(2, 3)


def warp_from_affine(source_h: int, source_w: int, target_h: int, target_w: int, affine) -> WarpMap:
    """Apply ``y' = a*y + b*x + c``, ``x' = d*y + e*x + f`` to the regular target grid."""
    m = affine_matrix(affine)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-12:
        raise ValueError("affine transform is singular")
    grid = make_target_grid(source_h, source_w, target_h, target_w)
    y, x = grid.coords[:, 0], grid.coords[:, 1]
    ny = m[0, 0] * y + m[0, 1] * x + m[0, 2]
    nx = m[1, 0] * y + m[1, 1] * x + m[1, 2]
    return WarpMap(np.stack([ny, nx], axis=1), (target_h, target_w), "affine", source_h, source_w)


def rotation_affine(degrees: float, center: tuple[float, float]) -> np.ndarray:
    """Affine coefficients rotating (y, x) positions about ``center``."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    cy, cx = center
    rot = np.array([[c, -s], [s, c]])
    shift = np.array([cy, cx]) - rot @ np.array([cy, cx])
    return np.array([rot[0, 0], rot[0, 1], shift[0], rot[1, 0], rot[1, 1], shift[1]])


# -- bicubic ------------------------------------------------------------------

KEYS_A = -0.5


def keys_kernel(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    tn, tf = t[near], t[far]
    out[near] = (a + 2) * tn**3 - (a + 3) * tn**2 + 1
    out[far] = a * tf**3 - 5 * a * tf**2 + 8 * a * tf - 4 * a
    return out


def bicubic_weights(n_in: int, n_out: int, antialias: bool = False) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis.

    With ``antialias`` the kernel is stretched by the reduction factor when
    shrinking (PIL/MATLAB style); otherwise the plain 4-tap kernel is
    evaluated at every output center. Out-of-range taps clamp to the edge.
    """
    scale = n_in / n_out
    support = max(1.0, scale) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    mat = np.zeros((n_out, n_in))
    radius = 2.0 * support
    for i, c in enumerate(centers):
        taps = np.arange(math.floor(c - radius), math.ceil(c + radius) + 1)
        w = keys_kernel((taps - c) / support)
        keep = w != 0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def bicubic_resample(image, target_h: int, target_w: int, antialias: bool = False):
    """Resize a (C, H, W) array or Tensor with the Keys (a = -0.5) kernel."""
    as_tensor = isinstance(image, Tensor)
    arr = image.data if as_tensor else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"bicubic_resample expects (C, H, W), got {arr.shape}")
    if min(target_h, target_w) < 1 or min(arr.shape[1:]) < 1:
        raise ValueError("resample extents must be >= 1")
    _, h, w = arr.shape
    if (h, w) == (target_h, target_w):
        out = arr.copy()
    else:
        ay = bicubic_weights(h, target_h, antialias)
        ax = bicubic_weights(w, target_w, antialias)
        out = np.einsum("ih,chw,jw->cij", ay, arr.astype(np.float64), ax, optimize=True)
        out = out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    return Tensor(out, dtype=out.dtype) if as_tensor else out
