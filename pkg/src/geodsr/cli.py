"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 data or parse error, 4 numeric failure.

Training configs are ``key=value`` text files. Keys prefixed ``net.`` and
``train.`` map onto :class:`NetworkConfig` and :class:`TrainConfig`; ``data.``
keys choose the training set, either ``data.manifest=<file>`` or the synthetic
generator via ``data.count``, ``data.seed`` and ``data.size``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from . import io as gio
from .evaluation import benchmark, format_table
from .geometry import ScaleSpec, bicubic_resample, make_target_grid
from .network import LAYER_NAMES, GeoDsrNetwork, NetworkConfig
from .synthetic import SyntheticSceneSpec, gen_synthetic
from .tensor import ValidationError, no_grad
from .training import NumericalError, TrainConfig, run_stage

log = logging.getLogger("geodsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _scales(text: str) -> list[float]:
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}")
    if not out or any(s < 1 for s in out):
        raise argparse.ArgumentTypeError(f"scales must be >= 1, got {text!r}")
    return out


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geodsr", description="Arbitrary-scale guided depth upsampling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic RGB-D dataset and manifest")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--out", required=True, help="checkpoint written at the end")
    t.add_argument("--log", help="loss log CSV")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")

    def model_inputs(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--depth", required=True, help="16-bit PGM depth map")
        sp.add_argument("--guide", required=True, help="PPM (or PNG) guide image")
        sp.add_argument("--range", type=_range, help="depth normalization LO,HI (default: observed range)")

    i = sub.add_parser("infer", help="upsample a depth map by a real-valued scale")
    model_inputs(i)
    i.add_argument("--scale", type=float, required=True)
    i.add_argument("--out", required=True)

    w = sub.add_parser("warp", help="sample a depth map at the coordinates of a warp map")
    model_inputs(w)
    w.add_argument("--map", required=True)
    w.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="benchmark a checkpoint against bicubic")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--scales", type=_scales, default=[4.0, 8.0, 16.0])
    e.add_argument("--csv", help="also write the report as CSV")

    d = sub.add_parser("dump-features", help="export one intermediate feature map as .npy")
    model_inputs(d)
    d.add_argument("--scale", type=float, required=True)
    d.add_argument("--layer", choices=LAYER_NAMES, required=True)
    d.add_argument("--out", required=True)
    return p


# -- helpers -----------------------------------------------------------------------


def _require(*paths) -> None:
    for path in paths:
        if path is not None and not Path(path).exists():
            raise UsageError(f"no such file: {path}")


def _load_inputs(args):
    _require(args.ckpt, args.depth, args.guide)
    net = gio.load_checkpoint(args.ckpt).build_network()
    raw = gio.read_depth(args.depth)
    guide = gio.read_guide(args.guide)
    lo, hi = args.range if args.range else (float(raw.min()), float(raw.max()))
    if hi <= lo:
        hi = lo + 1.0
    depth = ((raw - lo) / (hi - lo))[None].astype(np.float32)
    return net, depth, guide.astype(np.float32), (lo, hi)


def _fit_guide(guide: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if guide.shape[1:] == tuple(shape):
        return guide
    log.info("resampling guide from %s to %s", guide.shape[1:], shape)
    return np.clip(bicubic_resample(guide, *shape), 0.0, 1.0).astype(np.float32)


def _write_output(path, pred: np.ndarray, denorm) -> None:
    lo, hi = denorm
    gio.write_depth(path, pred * (hi - lo) + lo)


def _target_shape(h: int, w: int, scale: float) -> tuple[int, int]:
    if not scale > 0:
        raise UsageError(f"scale must be positive, got {scale}")
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def _training_data(cfg: dict[str, str], base: Path):
    if "data.manifest" in cfg:
        manifest = gio.Manifest.parse(base / cfg["data.manifest"])
        return [(item.hr_depth, item.hr_guide) for item in manifest.load()]
    spec = SyntheticSceneSpec(
        count=int(cfg.get("data.count", 200)),
        seed=int(cfg.get("data.seed", 0)),
        size=int(cfg.get("data.size", 64)),
    )
    return gen_synthetic(spec)


def _section(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


# -- commands ------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = gen_synthetic(SyntheticSceneSpec(count=args.count, seed=args.seed, size=args.size))
    lines = ["unit levels255", "range 0 65535"]
    for i, (depth, guide) in enumerate(scenes):
        dname, gname = f"depth_{i:04d}.pgm", f"guide_{i:04d}.ppm"
        gio.write_depth_normalized(out / dname, depth[0])
        gio.write_guide(out / gname, guide)
        lines.append(f"{dname} {gname}")
    gio.atomic_write(out / "manifest.txt", "\n".join(lines) + "\n")
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.config, args.resume)
    cfg = gio.parse_key_values(Path(args.config).read_text())
    for item in args.set:
        cfg.update(gio.parse_key_values(item))
    train_kw = _section(cfg, "train.")
    train_kw["stage"] = args.stage
    train_cfg = TrainConfig.from_dict(train_kw)
    net_kw = _section(cfg, "net.")
    if args.resume:
        ckpt = gio.load_checkpoint(args.resume)
        if net_kw:
            wanted = NetworkConfig.from_dict({**ckpt.network_config.to_dict(), **net_kw})
            if wanted != ckpt.network_config:
                raise gio.CheckpointError(f"config asks for {wanted} but {args.resume} holds {ckpt.network_config}")
        net = ckpt.build_network()
    elif args.stage == 2:
        raise UsageError("stage 2 starts from a stage-1 checkpoint; pass --resume")
    else:
        net = GeoDsrNetwork(NetworkConfig.from_dict(net_kw))
    data = _training_data(cfg, Path(args.config).parent)
    result = run_stage(net, data, train_cfg, log_path=args.log, checkpoint_path=args.out, dump_dir=Path(args.out).parent)
    print(f"stage {args.stage}: {len(result.losses)} steps, final loss {result.losses[-1]['loss']:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net, depth, guide, denorm = _load_inputs(args)
    _, h, w = depth.shape
    target = _target_shape(h, w, args.scale)
    guide = _fit_guide(guide, target)
    with no_grad():
        out = net(depth, guide, make_target_grid(h, w, *target))
    _write_output(args.out, out.data.reshape(target), denorm)
    print(f"wrote {target[0]}x{target[1]} depth to {args.out}")
    return EXIT_OK


def cmd_warp(args) -> int:
    _require(args.map)
    net, depth, guide, denorm = _load_inputs(args)
    _, h, w = depth.shape
    warp = gio.read_warp_map(args.map).bind(h, w)
    shape = warp.out_shape
    guide = _fit_guide(guide, shape)
    with no_grad():
        out = net(depth, guide, warp, ScaleSpec.from_shapes(h, w, *shape))
    _write_output(args.out, out.data.reshape(shape), denorm)
    print(f"wrote {shape[0]}x{shape[1]} warped depth to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args.ckpt, args.manifest)
    net = gio.load_checkpoint(args.ckpt).build_network()
    manifest = gio.Manifest.parse(args.manifest)
    items = manifest.load()
    reports = [
        benchmark("bicubic", items, args.scales, unit=manifest.unit),
        benchmark(net, items, args.scales, unit=manifest.unit),
    ]
    for rep in reports:
        bad = [s for s in rep.scales if not np.isfinite(rep.rmse[s])]
        if bad:
            raise NumericalError(f"{rep.method} produced non-finite RMSE at scales {bad}")
    print(format_table(reports))
    if args.csv:
        parts = [r.to_csv() for r in reports]
        # keep a single header line
        gio.atomic_write(args.csv, parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:]))
    return EXIT_OK


def cmd_dump_features(args) -> int:
    net, depth, guide, _ = _load_inputs(args)
    _, h, w = depth.shape
    target = _target_shape(h, w, args.scale)
    guide = _fit_guide(guide, target)
    capture: dict = {}
    with no_grad():
        net(depth, guide, make_target_grid(h, w, *target), capture=capture)
    feats = capture[args.layer]
    with open(args.out, "wb") as fh:
        np.save(fh, feats)
    print(f"wrote {args.layer} features {feats.shape} to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "warp": cmd_warp,
    "eval": cmd_eval,
    "dump-features": cmd_dump_features,
}


def _thread_limits(stack: ExitStack) -> None:
    """Honour GEODSR_THREADS and GEODSR_DETERMINISTIC for BLAS thread pools."""
    threads = os.environ.get("GEODSR_THREADS")
    if os.environ.get("GEODSR_DETERMINISTIC") == "1":
        threads = "1"
    if threads:
        from threadpoolctl import threadpool_limits

        stack.enter_context(threadpool_limits(limits=max(1, int(threads))))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with ExitStack() as stack:
            _thread_limits(stack)
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"geodsr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"geodsr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FloatingPointError) as exc:
        print(f"geodsr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (gio.ImageParseError, gio.CheckpointError, ValueError, OSError) as exc:
        print(f"geodsr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
