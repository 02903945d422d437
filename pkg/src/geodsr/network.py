"""Guided depth upsampling network with modulation fusion and two decoders."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .geometry import CoordGrid, ScaleSpec, WarpMap, change_frame, make_target_grid
from .gsa import GsaGroup, gsa_group_forward
from .nn import Conv2d, Module
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class NetworkConfig:
    channels: int = 128
    blocks_per_group: int = 4
    guide_groups: int = 1
    depth_groups: int = 2
    encoder_hidden: int = 32
    decoder_blocks: int = 2
    use_gsa: bool = True
    use_modulation_fusion: bool = True
    two_step_upsampling: bool = True
    global_residual: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.channels <= 0 or self.blocks_per_group < 0:
            raise ValueError(f"invalid network config: {self}")

    @classmethod
    def small(cls, **kw) -> "NetworkConfig":
        return cls(channels=64, **kw)

    @classmethod
    def desk(cls, **kw) -> "NetworkConfig":
        """Tiny variant that trains in minutes on a CPU."""
        kw.setdefault("channels", 16)
        kw.setdefault("blocks_per_group", 1)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in kinds:
                continue
            if kinds[key] in ("bool", bool):
                out[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            else:
                out[key] = int(value)
        return cls(**out)


class FeatureModulation(Module):
    """``w * (guide * depth) + b`` with ``w, b`` a 1x1 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fuse = Conv2d(channels, channels, 1, rng)

    def __call__(self, x_guide: Tensor, x_depth: Tensor) -> Tensor:
        return modulate(x_guide, x_depth, self)


def modulate(x_guide: Tensor, x_depth: Tensor, fm: FeatureModulation) -> Tensor:
    if x_guide.shape != x_depth.shape:
        raise ValueError(f"modulate: guide {x_guide.shape} and depth {x_depth.shape} differ")
    c, m = x_guide.shape
    prod = T.reshape(x_guide * x_depth, (1, c, 1, m))
    return T.reshape(fm.fuse(prod), (c, m))


class ConcatFusion(Module):
    """Concatenate guide and depth features, then mix with a 1x1 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fuse = Conv2d(2 * channels, channels, 1, rng)

    def __call__(self, x_guide: Tensor, x_depth: Tensor) -> Tensor:
        c, m = x_guide.shape
        cat = T.reshape(T.concat([x_guide, x_depth], axis=0), (1, 2 * c, 1, m))
        return T.reshape(self.fuse(cat), (c, m))


class ResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.relu(self.conv1(x)))


class Decoder(Module):
    def __init__(self, channels: int, rng: np.random.Generator, blocks: int = 2, modulation: bool = True):
        self.fusion = FeatureModulation(channels, rng) if modulation else ConcatFusion(channels, rng)
        self.body = [ResBlock(channels, rng) for _ in range(blocks)]

    def zero_body(self) -> None:
        for block in self.body:
            block.conv2.zero_()


def decode_stage(
    depth_feats: Tensor,
    guide_feats: Tensor,
    grid: CoordGrid,
    decoder: Decoder,
) -> Tensor:
    """Sample both feature maps at ``grid``, fuse, and refine.

    ``grid`` is expressed in ``depth_feats``' pixel frame; the guide features
    are sampled at the same physical positions in their own frame. Feature
    maps are (C, h, w) or (1, C, h, w); the result is (1, C, *grid.out_shape).
    """
    if depth_feats.ndim == 4:
        depth_feats = T.reshape(depth_feats, depth_feats.shape[1:])
    if guide_feats.ndim == 4:
        guide_feats = T.reshape(guide_feats, guide_feats.shape[1:])
    c, h, w = depth_feats.shape
    _, gh, gw = guide_feats.shape
    if (grid.source_h, grid.source_w) != (h, w):
        raise ValueError(
            f"grid is expressed in a {grid.source_h}x{grid.source_w} frame but depth features are {h}x{w}"
        )
    guide_coords = change_frame(grid.coords, (h, w), (gh, gw))
    sampled_depth = T.grid_sample_bilinear(depth_feats, grid.coords)
    sampled_guide = T.grid_sample_bilinear(guide_feats, guide_coords)
    fused = decoder.fusion(sampled_guide, sampled_depth)
    oh, ow = grid.out_shape
    x = T.reshape(fused, (1, c, oh, ow))
    for block in decoder.body:
        x = block(x)
    return x


def intermediate_shape(source: tuple[int, int], target: tuple[int, int]) -> tuple[int, int]:
    """Arithmetic mean of source and target extents, rounding halves up."""
    return tuple(int(np.floor((s + t) / 2 + 0.5)) for s, t in zip(source, target))


class GeoDsrNetwork(Module):
    def __init__(self, config: NetworkConfig | None = None):
        self.config = config or NetworkConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.guide_head = Conv2d(3, c, 3, rng)
        self.depth_head = Conv2d(1, c, 3, rng)
        self.guide_groups = [
            GsaGroup(c, rng, cfg.blocks_per_group, cfg.encoder_hidden, cfg.use_gsa) for _ in range(cfg.guide_groups)
        ]
        self.depth_groups = [
            GsaGroup(c, rng, cfg.blocks_per_group, cfg.encoder_hidden, cfg.use_gsa) for _ in range(cfg.depth_groups)
        ]
        self.decoder1 = Decoder(c, rng, cfg.decoder_blocks, cfg.use_modulation_fusion)
        self.decoder2 = Decoder(c, rng, cfg.decoder_blocks, cfg.use_modulation_fusion)
        # default init rather than zeros: a zero head blocks gradients to the
        # whole body for the first few hundred steps
        self.out_head = Conv2d(c, 1, 3, rng)
        self.clamp_count = 0

    def __call__(self, d_l, y_h, query, spec: ScaleSpec | None = None, capture: dict | None = None) -> Tensor:
        return forward(self, d_l, y_h, query, spec, capture)

    def upsample(self, d_l, y_h, scale: float | None = None, target: tuple[int, int] | None = None) -> np.ndarray:
        """Convenience wrapper: regular-grid inference returning an (H, W) array."""
        h, w = np.shape(getattr(d_l, "data", d_l))[-2:]
        if target is None:
            target = (int(round(h * scale)), int(round(w * scale)))
        grid = make_target_grid(h, w, *target)
        with T.no_grad():
            out = self(d_l, y_h, grid)
        return out.data.reshape(target)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def default_spec(query, h: int, w: int) -> ScaleSpec:
    if isinstance(query, WarpMap) or query.regular:
        return ScaleSpec.from_shapes(h, w, *query.out_shape)
    raise ValueError("an irregular CoordGrid query needs an explicit ScaleSpec")


def forward(
    net: GeoDsrNetwork,
    d_l,
    y_h,
    query: CoordGrid | WarpMap,
    spec: ScaleSpec | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Predict normalized depth at every query coordinate -> (1, M).

    ``d_l`` is (1, h, w) in [0, 1], ``y_h`` is (3, H, W), and query coordinates
    live in the LR depth frame.
    """
    cfg = net.config
    dtype = net.out_head.weight.dtype
    d_l = _as_tensor(d_l, dtype)
    y_h = _as_tensor(y_h, dtype)
    if d_l.ndim != 3 or d_l.shape[0] != 1:
        raise ValueError(f"depth input must be (1, h, w), got {d_l.shape}")
    if y_h.ndim != 3 or y_h.shape[0] != 3:
        raise ValueError(f"guide input must be (3, H, W), got {y_h.shape}")
    for name, arr in (("depth", d_l.data), ("guide", y_h.data)):
        if not np.all(np.isfinite(arr)):
            raise T.ValidationError(f"{name} input contains non-finite values")
    _, h, w = d_l.shape
    if spec is None:
        spec = default_spec(query, h, w)

    coords = query.coords
    lo = np.array([-1.0, -1.0])
    hi = np.array([float(h), float(w)])
    outside = np.any((coords < lo) | (coords > hi), axis=1)
    if outside.any():
        net.clamp_count += int(outside.sum())
        log.warning("clamped %d query coordinates outside the depth frame", int(outside.sum()))
        coords = np.clip(coords, lo, hi)
    out_shape = query.out_shape

    # inputs are centered on zero before the heads
    g = net.guide_head(T.reshape(y_h - 0.5, (1,) + y_h.shape))
    _stash(capture, "guide_head", g)
    for i, group in enumerate(net.guide_groups):
        g = gsa_group_forward(g, group, spec)
        _stash(capture, f"guide_group.{i}", g)
    d = net.depth_head(T.reshape(d_l - 0.5, (1,) + d_l.shape))
    _stash(capture, "depth_head", d)
    for i, group in enumerate(net.depth_groups):
        d = gsa_group_forward(d, group, spec)
        _stash(capture, f"depth_group.{i}", d)

    if cfg.two_step_upsampling:
        mid = intermediate_shape((h, w), out_shape)
    else:
        mid = tuple(out_shape)
    x = decode_stage(d, g, make_target_grid(h, w, *mid), net.decoder1)
    _stash(capture, "decoder1", x)
    mid_coords = change_frame(coords, (h, w), mid)
    x = decode_stage(x, g, CoordGrid(mid_coords, mid[0], mid[1], out_shape), net.decoder2)
    _stash(capture, "decoder2", x)
    out = T.reshape(net.out_head(x), (1, out_shape[0] * out_shape[1]))
    if cfg.global_residual:
        out = out + T.grid_sample_bilinear(d_l, coords)
    return out


def _stash(capture: dict | None, name: str, value: Tensor) -> None:
    if capture is not None:
        capture[name] = value.data.copy()


LAYER_NAMES = (
    "guide_head",
    "guide_group.0",
    "depth_head",
    "depth_group.0",
    "depth_group.1",
    "decoder1",
    "decoder2",
)
