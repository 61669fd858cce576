"""Command-line entry point: ``esrkit <verb> ...``.

Exit codes: 0 success, 1 domain error (bad file, binding failure, failed
check), 2 usage error.

Architecture arguments accept a path to an architecture text file or
``builtin:<name>``; weight arguments accept an ESRW file or ``random:<seed>``.
"""

from __future__ import annotations

import argparse
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import blocks, image, profiler, ranking, reparam
from .executor import forward
from .graph import ArchError, ArchSpec, validate
from .png import PngDecodeError
from .tensor import ShapeError
from .weights import BindingError, WeightFormatError, WeightStore, init_weights

EQUIV_TOL = 1e-4


class DomainError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; expected HxW such as 256x256")
    return int(m.group(1)), int(m.group(2))


def load_arch(ref: str) -> ArchSpec:
    if ref.startswith("builtin:"):
        try:
            arch = blocks.build(ref.split(":", 1)[1])
        except KeyError as exc:
            raise DomainError(exc.args[0]) from None
    else:
        arch = ArchSpec.load(ref)
    diags = validate(arch)
    if diags:
        raise DomainError("invalid architecture:\n  " + "\n  ".join(diags))
    return arch


def load_weights(ref: str, arch: ArchSpec) -> WeightStore:
    if ref.startswith("random:"):
        try:
            seed = int(ref.split(":", 1)[1])
        except ValueError:
            raise DomainError(f"bad random seed in {ref!r}") from None
        return init_weights(arch, seed)
    w = WeightStore.load(ref)
    w.bind(arch)
    return w


def _png_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DomainError(f"no PNG files in {path}")
        return files
    if not path.exists():
        raise DomainError(f"no such file: {path}")
    return [path]


def cmd_infer(args) -> int:
    arch = load_arch(args.arch)
    weights = load_weights(args.weights, arch)
    x = image.to_tensor(image.load_png(args.input))
    y = forward(arch, weights, x, fast=not args.serial)
    if args.collapse:
        arch2, w2 = reparam.collapse_arch(arch, weights)
        y2 = forward(arch2, w2, x, fast=not args.serial)
        err = float(np.max(np.abs(y - y2)))
        print(f"collapse: {arch.count('conv')} -> {arch2.count('conv')} convs, max |diff| {err:.3e}")
        if not err <= EQUIV_TOL:
            raise DomainError(f"collapsed network deviates by {err:.3e} > {EQUIV_TOL}")
        y = y2
    out = image.to_image(y)
    image.save_png(out, args.output)
    print(f"wrote {args.output} ({out.width}x{out.height})")
    return 0


def cmd_profile(args) -> int:
    arch = load_arch(args.arch)
    h, w = args.input_size
    runtime = None
    if args.time:
        if not args.weights or not args.images:
            raise DomainError("--time needs --weights and --images")
        weights = load_weights(args.weights, arch)
        inputs = [image.to_tensor(image.load_png(p)) for p in _png_files(Path(args.images))]
        runtime = profiler.time_inference(arch, weights, inputs, trials=args.trials)
    report = profiler.profile(arch, h, w, runtime)
    if args.csv:
        print(report.csv_header())
        print(report.to_csv_row())
    else:
        print(report.to_text())
    return 0


def cmd_psnr(args) -> int:
    sr = _png_files(Path(args.sr))
    hr = _png_files(Path(args.hr))
    if len(sr) != len(hr):
        raise DomainError(f"{len(sr)} SR images but {len(hr)} HR images")
    values = []
    for a, b in zip(sr, hr):
        v = image.psnr(image.load_png(a), image.load_png(b), args.border)
        values.append(v)
        print(f"{a.name}\t{v:.4f}" if math.isfinite(v) else f"{a.name}\tinf")
    mean = sum(values) / len(values)
    print(f"mean\t{mean:.4f}" if math.isfinite(mean) else "mean\tinf")
    return 0


def cmd_degrade(args) -> int:
    img = image.load_png(args.input)
    cfg = image.DegradeConfig(scale=args.scale)
    out = image.to_image(image.bicubic_resize(image.to_tensor(img), cfg, "down"))
    image.save_png(out, args.output)
    print(f"wrote {args.output} ({out.width}x{out.height})")
    return 0


def cmd_reparam(args) -> int:
    arch = load_arch(args.arch)
    weights = load_weights(args.weights, arch)
    arch2, w2 = reparam.collapse_arch(arch, weights)
    arch2.save(args.out_arch)
    w2.save(args.out_weights)
    print(f"{arch.count('conv')} -> {arch2.count('conv')} convs; wrote {args.out_arch} and {args.out_weights}")
    return 0


def cmd_verify(args) -> int:
    arch = load_arch(args.arch)
    weights = load_weights(args.weights, arch)
    arch2, w2 = reparam.collapse_arch(arch, weights)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        x = rng.uniform(-1, 1, (1, arch.in_channels, args.size, args.size)).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(forward(arch, weights, x, fast=True) - forward(arch2, w2, x, fast=True)))))
    ok = worst <= EQUIV_TOL
    print(f"convs {arch.count('conv')} -> {arch2.count('conv')}; max |diff| over {args.trials} trials: {worst:.3e}")
    print("PASS" if ok else f"FAIL (tolerance {EQUIV_TOL})")
    return 0 if ok else 1


def cmd_rank(args) -> int:
    records = ranking.load_csv(args.csv or ranking.fixture_path())
    print(ranking.render(ranking.rank_tracks(records), args.track))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esrkit", description="Efficient SR toolkit: inference, profiling, reparameterization, ranking.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("infer", help="super-resolve one PNG")
    s.add_argument("--arch", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--collapse", action="store_true", help="collapse branch groups first and check equivalence")
    s.add_argument("--serial", action="store_true", help="use the fixed-order serial convolution")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("profile", help="params / FLOPs / activations / convs / memory")
    s.add_argument("--arch", required=True)
    s.add_argument("--input-size", type=_size, default=(256, 256))
    s.add_argument("--weights")
    s.add_argument("--time", action="store_true")
    s.add_argument("--images")
    s.add_argument("--trials", type=int, default=3)
    s.add_argument("--csv", action="store_true", help="print a CSV header and row")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("psnr", help="PSNR of SR vs HR (files or directories)")
    s.add_argument("--sr", required=True)
    s.add_argument("--hr", required=True)
    s.add_argument("--border", type=int, default=4)
    s.set_defaults(func=cmd_psnr)

    s = sub.add_parser("degrade", help="bicubic downscale a PNG")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("reparam", help="collapse branch groups and fold batch norms")
    s.add_argument("--arch", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out-arch", required=True)
    s.add_argument("--out-weights", required=True)
    s.set_defaults(func=cmd_reparam)

    s = sub.add_parser("verify", help="check collapse equivalence on random inputs")
    s.add_argument("--arch", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("rank", help="leaderboard tracks from a submissions CSV")
    s.add_argument("--csv", help="defaults to the bundled leaderboard fixture")
    s.add_argument("--track", choices=ranking.TRACKS, default="main")
    s.set_defaults(func=cmd_rank)
    return p


_DOMAIN_ERRORS = (
    DomainError,
    ArchError,
    BindingError,
    WeightFormatError,
    PngDecodeError,
    ShapeError,
    ranking.CsvFormatError,
    OSError,
    ValueError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
