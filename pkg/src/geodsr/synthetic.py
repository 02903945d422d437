"""Synthetic RGB-D scenes for desk-scale training.

Each scene is a slanted background plane with a few overlapping rectangles
and ellipses in front of it. Every depth layer gets a distinct flat colour in
the guide, so depth discontinuities are visible in the RGB image. The guide
also carries painted patches, stripes and grain that have no depth
counterpart, which is the kind of texture the fusion step has to ignore.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticSceneSpec:
    count: int = 200
    seed: int = 0
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    texture_patches: int = 2
    texture_amplitude: float = 0.12
    grain: float = 0.01

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"synthetic scenes need size >= 32, got {self.size}")


def _distinct_colours(rng: np.random.Generator, n: int, min_dist: float = 0.35) -> np.ndarray:
    colours: list[np.ndarray] = []
    while len(colours) < n:
        c = rng.uniform(0.05, 0.95, 3)
        if all(np.abs(c - o).max() >= min_dist for o in colours) or len(colours) == 0:
            colours.append(c)
    return np.array(colours)


def _shape_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    ry, rx = rng.uniform(0.08, 0.3, 2) * size
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_scene(spec: SyntheticSceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(depth (1, S, S), guide (3, S, S))``, both in [0, 1]."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    colours = _distinct_colours(rng, n_shapes + 1)

    base = rng.uniform(0.6, 0.9)
    gy, gx = rng.uniform(-0.2, 0.2, 2) / s
    depth = base + gy * (yy - s / 2) + gx * (xx - s / 2)
    label = np.zeros((s, s), dtype=np.int64)
    # painter's order: later shapes are nearer
    levels = np.sort(rng.uniform(0.05, 0.55, n_shapes))[::-1]
    for k in range(n_shapes):
        mask = _shape_mask(rng, yy, xx, s)
        ty, tx = rng.uniform(-0.1, 0.1, 2) / s
        plane = levels[k] + ty * (yy - s / 2) + tx * (xx - s / 2)
        depth = np.where(mask, plane, depth)
        label = np.where(mask, k + 1, label)
    depth = np.clip(depth, 0.0, 1.0)

    guide = colours[label].transpose(2, 0, 1).copy()
    shade = 1.0 - 0.25 * (depth - depth.min())
    guide *= shade[None]

    amp = spec.texture_amplitude
    for _ in range(spec.texture_patches):
        patch = _shape_mask(rng, yy, xx, s)
        guide += np.where(patch, 1.0, 0.0)[None] * rng.uniform(-amp, amp, (3, 1, 1))
    freq = rng.uniform(0.15, 0.6)
    angle = rng.uniform(0, np.pi)
    stripes = np.sin(freq * (np.cos(angle) * yy + np.sin(angle) * xx))
    guide += 0.3 * amp * stripes[None] * rng.uniform(0.3, 1.0, (3, 1, 1))
    guide += rng.normal(0.0, spec.grain, guide.shape)
    guide = np.clip(guide, 0.0, 1.0)
    return depth[None].astype(np.float32), guide.astype(np.float32)


def gen_synthetic(spec: SyntheticSceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [make_scene(spec, i) for i in range(spec.count)]


def _gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    gy[..., 1:, :] = np.abs(np.diff(img, axis=-2))
    gx[..., :, 1:] = np.abs(np.diff(img, axis=-1))
    mag = np.maximum(gy, gx)
    return mag.max(axis=0) if mag.ndim == 3 else mag


def edge_alignment(depth: np.ndarray, guide: np.ndarray, depth_thresh: float = 0.05, guide_thresh: float = 0.1) -> float:
    """Fraction of strong depth-gradient pixels that sit within one pixel of a strong guide gradient."""
    d_edges = _gradient_magnitude(depth.reshape(depth.shape[-2:])) > depth_thresh
    g_edges = _gradient_magnitude(guide) > guide_thresh
    # dilate the guide edges by one pixel (8-neighbourhood)
    padded = np.pad(g_edges, 1)
    h, w = g_edges.shape
    near = np.zeros_like(g_edges)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            near |= padded[dy : dy + h, dx : dx + w]
    if not d_edges.any():
        return 1.0
    return float((d_edges & near).sum() / d_edges.sum())
