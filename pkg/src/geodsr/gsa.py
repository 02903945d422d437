"""Geometric Spatial Aggregator and the blocks built from it.

A GSA layer is a 3x3 convolution whose static kernel is multiplied, offset by
offset and input channel by input channel, with a modulation produced by a
small MLP from the reciprocal squared distance ``1 / (s * d^2)`` of every
window offset. On a regular grid the modulation is identical at every site,
so it is folded into the kernel once per forward pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import ScaleSpec, make_target_grid, reciprocal_distance_field
from .nn import ChannelNorm, Conv2d, Linear, Module
from .tensor import Tensor


class GeometricEncoder(Module):
    """MLP ``1 -> hidden -> channels`` applied to each window offset's distance term."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = 32, kernel_size: int = 3):
        self.kernel_size = kernel_size
        self.channels = channels
        self.fc1 = Linear(1, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        # start close to the identity modulation
        self.fc2.weight.data *= 0.1
        self.fc2.bias.data[...] = 1.0

    def __call__(self, field: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(field)))

    def freeze_constant(self, value: float = 1.0) -> None:
        """Make the encoder output ``value`` for every input."""
        self.fc2.weight.data[...] = 0.0
        self.fc2.bias.data[...] = value


def geometric_weights(encoder: GeometricEncoder, spec: ScaleSpec) -> Tensor:
    """(k*k, C) modulation matrix, one row per window offset in row-major order."""
    field = reciprocal_distance_field(encoder.kernel_size, spec, dtype=encoder.fc1.weight.dtype)
    return encoder(field)


class GsaLayer(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        rng: np.random.Generator,
        kernel_size: int = 3,
        hidden: int = 32,
        use_gsa: bool = True,
    ):
        if kernel_size % 2 == 0:
            raise ValueError("GSA kernel size must be odd")
        self.kernel_size = kernel_size
        self.cin, self.cout = cin, cout
        bound = 1.0 / np.sqrt(cin * kernel_size * kernel_size)
        self.weight = T.parameter(rng.uniform(-bound, bound, (cout, cin, kernel_size, kernel_size)))
        self.bias = T.parameter(rng.uniform(-bound, bound, (cout,)))
        self.encoder = GeometricEncoder(cin, rng, hidden, kernel_size) if use_gsa else None

    def modulated_kernel(self, spec: ScaleSpec) -> Tensor:
        if self.encoder is None:
            return self.weight
        k = self.kernel_size
        w = geometric_weights(self.encoder, spec)  # (k*k, Cin)
        m = T.reshape(T.transpose(w, (1, 0)), (1, self.cin, k, k))
        return T.mul(self.weight, m)

    def __call__(self, x: Tensor, spec: ScaleSpec) -> Tensor:
        return gsa_forward(x, self, spec)

    def zero_(self) -> None:
        self.weight.data[...] = 0
        self.bias.data[...] = 0


def gsa_forward(x: Tensor, layer: GsaLayer, spec: ScaleSpec) -> Tensor:
    if x.ndim != 4 or x.shape[1] != layer.cin:
        raise ValueError(f"GSA layer expects (N, {layer.cin}, H, W), got {x.shape}")
    return T.conv2d(x, layer.modulated_kernel(spec), layer.bias)


class GsaBlock(Module):
    """Pre-norm transformer block with the GSA layer in place of self-attention."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = 32, use_gsa: bool = True):
        self.norm1 = ChannelNorm(channels)
        self.gsa = GsaLayer(channels, channels, rng, hidden=hidden, use_gsa=use_gsa)
        self.norm2 = ChannelNorm(channels)
        self.ffn_in = Conv2d(channels, 2 * channels, 1, rng)
        self.ffn_out = Conv2d(2 * channels, channels, 1, rng)

    def __call__(self, x: Tensor, spec: ScaleSpec) -> Tensor:
        return gsa_block_forward(x, self, spec)

    def zero_outputs(self) -> None:
        self.gsa.zero_()
        self.ffn_out.zero_()


def gsa_block_forward(x: Tensor, block: GsaBlock, spec: ScaleSpec) -> Tensor:
    y = x + block.gsa(block.norm1(x), spec)
    return y + block.ffn_out(T.relu(block.ffn_in(block.norm2(y))))


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Resize (N, C, h, w) to (N, C, height, width) with cell-center bilinear sampling."""
    n, c, h, w = x.shape
    if (h, w) == (height, width):
        return x
    grid = make_target_grid(h, w, height, width)
    weights = T.bilinear_matrix(grid.coords, h, w, x.dtype)
    items = [
        T.reshape(T.grid_sample_bilinear(T.take(x, i), grid, weights), (1, c, height, width))
        for i in range(n)
    ]
    return items[0] if n == 1 else T.concat(items, axis=0)


class EsaModule(Module):
    """Lightweight spatial gate: reduce, pool, two convs, upsample, expand, sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        reduced = max(1, channels // 4)
        self.reduce = Conv2d(channels, reduced, 1, rng)
        self.conv_a = Conv2d(reduced, reduced, 3, rng)
        self.conv_b = Conv2d(reduced, reduced, 3, rng)
        self.expand = Conv2d(reduced, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        r = self.reduce(x)
        p = T.avg_pool2x2(r)
        p = T.conv2d(p, self.conv_a.weight, self.conv_a.bias, pad_mode="edge")
        p = T.conv2d(T.relu(p), self.conv_b.weight, self.conv_b.bias, pad_mode="edge")
        up = upsample_bilinear(p, h, w)
        return T.sigmoid(self.expand(up))


class GsaGroup(Module):
    def __init__(self, channels: int, rng: np.random.Generator, blocks: int = 4, hidden: int = 32, use_gsa: bool = True):
        self.blocks = [GsaBlock(channels, rng, hidden, use_gsa) for _ in range(blocks)]
        self.esa = EsaModule(channels, rng)

    def __call__(self, x: Tensor, spec: ScaleSpec) -> Tensor:
        return gsa_group_forward(x, self, spec)


def gsa_group_forward(x: Tensor, group: GsaGroup, spec: ScaleSpec, return_mask: bool = False):
    body = x
    for block in group.blocks:
        body = block(body, spec)
    mask = group.esa(body)
    out = x + body * mask
    return (out, mask) if return_mask else out
