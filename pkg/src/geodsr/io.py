"""File formats: checkpoints, netpbm depth/guide images, warp maps, manifests.

Checkpoint layout (all integers little-endian)::

    b"GEODSRCK"  u32 version
    u32 config length, UTF-8 ``section.key=value`` lines
    u32 parameter count, then per parameter:
        u16 name length, name, u8 ndim, u32 extents..., float32 payload
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import WarpMap
from .network import GeoDsrNetwork, NetworkConfig
from .training import TrainConfig

MAGIC = b"GEODSRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ImageParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)


def atomic_write(path: str | os.PathLike, payload: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(payload)
    os.replace(tmp, path)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    network_config: NetworkConfig
    train_config: TrainConfig | None
    params: dict[str, np.ndarray]

    def build_network(self) -> GeoDsrNetwork:
        net = GeoDsrNetwork(self.network_config)
        net.load_state_dict(self.params)
        return net

    @classmethod
    def from_network(cls, net: GeoDsrNetwork, train_config: TrainConfig | None = None) -> "Checkpoint":
        return cls(net.config, train_config, net.state_dict())


def _config_text(ckpt: Checkpoint) -> str:
    lines = [f"net.{k}={v}" for k, v in ckpt.network_config.to_dict().items()]
    if ckpt.train_config is not None:
        for k, v in ckpt.train_config.to_dict().items():
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"train.{k}={v}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_text(ckpt).encode()
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        encoded = name.encode()
        parts.append(struct.pack("<HB", len(encoded), arr.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch; file is corrupted")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    kv = parse_key_values(body[pos : pos + clen].decode())
    pos += clen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos : pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name in params:
            raise CheckpointError(f"parameter {name} appears twice")
        params[name] = arr.astype(np.float32)
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the parameter table")
    net_cfg = NetworkConfig.from_dict({k[4:]: v for k, v in kv.items() if k.startswith("net.")})
    train_kv = {k[6:]: v for k, v in kv.items() if k.startswith("train.")}
    train_cfg = TrainConfig.from_dict(train_kv) if train_kv else None
    return Checkpoint(net_cfg, train_cfg, params)


def load_checkpoint(path: str | os.PathLike, expect: NetworkConfig | None = None) -> Checkpoint:
    ckpt = parse_checkpoint(Path(path).read_bytes())
    if expect is not None and expect != ckpt.network_config:
        raise CheckpointError(f"checkpoint config {ckpt.network_config} does not match {expect}")
    return ckpt


# -- netpbm ----------------------------------------------------------------------

def _parse_netpbm_header(blob: bytes, expected: tuple[bytes, ...]) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if blob[:2] not in expected:
        raise ImageParseError(f"expected magic {' or '.join(e.decode() for e in expected)}, found {blob[:2]!r}", 0)
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageParseError("malformed header: expected a decimal number", start)
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise ImageParseError("malformed header: missing whitespace before the pixel data", pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageParseError(f"invalid extents {width}x{height}", 2)
    if not 0 < maxval < 65536:
        raise ImageParseError(f"invalid maxval {maxval}", pos - 1)
    return blob[:2], width, height, maxval, pos


def decode_netpbm(blob: bytes) -> tuple[np.ndarray, int]:
    """Decode binary P5/P6 data to ((H, W) or (H, W, 3) integers, maxval)."""
    magic, width, height, maxval, pos = _parse_netpbm_header(blob, (b"P5", b"P6"))
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    have = len(blob) - pos
    if have < need:
        raise ImageParseError(f"pixel payload is {need - have} bytes short: header declares {need}, file holds {have}", pos)
    arr = np.frombuffer(blob, dtype=dtype, count=width * height * channels, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_netpbm(arr: np.ndarray, maxval: int) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape} as netpbm")
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    h, w = arr.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    return f"{magic.decode()}\n{w} {h}\n{maxval}\n".encode() + arr.astype(dtype).tobytes()


def read_depth(path: str | os.PathLike) -> np.ndarray:
    """Raw depth values of a P5 file (or grayscale PNG) as a float64 (H, W) array."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path, "L").astype(np.float64)
    arr, _ = decode_netpbm(path.read_bytes())
    if arr.ndim != 2:
        raise ImageParseError(f"{path}: depth maps must be single-channel P5", 0)
    return arr.astype(np.float64)


def write_depth(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write raw values, rounded and clipped to 16 bits, as a P5 file."""
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64)), 0, 65535).astype(np.uint16)
    atomic_write(path, encode_netpbm(q.reshape(q.shape[-2:]), 65535))


def write_depth_normalized(path: str | os.PathLike, depth01: np.ndarray) -> None:
    write_depth(path, np.asarray(depth01, dtype=np.float64) * 65535.0)


def read_depth_normalized(path: str | os.PathLike) -> np.ndarray:
    return read_depth(path) / 65535.0


def read_guide(path: str | os.PathLike) -> np.ndarray:
    """RGB guide as a float32 (3, H, W) array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = _read_png(path, "RGB")
        maxval = 255
    else:
        arr, maxval = decode_netpbm(path.read_bytes())
        if arr.ndim != 3:
            raise ImageParseError(f"{path}: guide images must be P6", 0)
    return (arr.astype(np.float64) / maxval).transpose(2, 0, 1).astype(np.float32)


def write_guide(path: str | os.PathLike, guide01: np.ndarray) -> None:
    g = np.clip(np.rint(np.asarray(guide01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    atomic_write(path, encode_netpbm(g.transpose(1, 2, 0), 255))


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is optional
        raise ImageParseError(f"{path}: PNG support needs Pillow") from exc
    with Image.open(path) as img:
        if mode == "L" and img.mode in ("I;16", "I;16B", "I"):
            return np.asarray(img, dtype=np.float64)
        return np.asarray(img.convert(mode))


# -- warp maps -------------------------------------------------------------------

def write_warp_map(path: str | os.PathLike, warp) -> None:
    """Plain text: ``H W`` then one ``y x`` line per output pixel in row-major order."""
    h, w = warp.out_shape
    lines = [f"{h} {w}"]
    lines += [f"{y!r} {x!r}" for y, x in warp.coords.tolist()]
    atomic_write(path, "\n".join(lines) + "\n")


def read_warp_map(path: str | os.PathLike) -> WarpMap:
    text = Path(path).read_text().split("\n")
    try:
        h, w = (int(v) for v in text[0].split())
    except ValueError:
        raise ValueError(f"{path}: first line must be 'H W', got {text[0]!r}") from None
    rows = [line.split() for line in text[1:] if line.strip()]
    if len(rows) != h * w:
        raise ValueError(f"{path}: header declares {h * w} coordinates, file holds {len(rows)}")
    coords = np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64)
    return WarpMap(coords, (h, w), "file")


# -- manifests -------------------------------------------------------------------

@dataclass
class Manifest:
    """Paired depth/guide files plus the unit and normalization range of the depth values.

    Text format, one directive or pair per line (``#`` starts a comment)::

        unit cm            # or levels255
        range 0 1000       # optional normalization min/max in raw units
        value_scale 0.1    # optional factor turning raw file values into the unit
        depth_0001.pgm guide_0001.ppm
    """

    pairs: list[tuple[Path, Path]]
    unit: str = "levels255"
    value_range: tuple[float, float] | None = None
    value_scale: float = 1.0

    @classmethod
    def parse(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        base = path.parent
        pairs, unit, rng, scale = [], "levels255", None, 1.0
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            key = parts[0]
            if key == "unit":
                unit = parts[1]
                if unit not in ("cm", "levels255"):
                    raise ValueError(f"{path}:{lineno}: unknown unit {unit!r}")
            elif key == "range":
                rng = (float(parts[1]), float(parts[2]))
            elif key == "value_scale":
                scale = float(parts[1])
            elif len(parts) == 2:
                d, g = (base / p for p in parts)
                for f in (d, g):
                    if not f.exists():
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {f}")
                pairs.append((d, g))
            else:
                raise ValueError(f"{path}:{lineno}: cannot parse {raw!r}")
        if not pairs:
            raise ValueError(f"{path}: manifest lists no image pairs")
        return cls(pairs, unit, rng, scale)

    def load(self) -> list["EvalItem"]:
        from .evaluation import EvalItem

        items = []
        for dpath, gpath in self.pairs:
            raw = read_depth(dpath) * self.value_scale
            guide = read_guide(gpath)
            if raw.shape != guide.shape[1:]:
                raise ValueError(f"{dpath} is {raw.shape} but {gpath} is {guide.shape[1:]}")
            lo, hi = self.value_range if self.value_range else (float(raw.min()), float(raw.max()))
            if hi <= lo:
                hi = lo + 1.0
            if self.unit == "levels255":
                # RMSE in levels is computed on values mapped to [0, 1] full scale
                full = 255.0 if raw.max() <= 255 else 65535.0
                lo, hi = lo / full, hi / full
                raw = raw / full
            items.append(EvalItem(((raw - lo) / (hi - lo))[None].astype(np.float32), guide, (lo, hi)))
        return items
