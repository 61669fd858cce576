"""Complexity counters and the best-of-trials runtime protocol."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .graph import INPUT, ArchSpec, conv_params, infer_shapes, param_shapes

__all__ = [
    "BYTES_PER_ELEMENT",
    "ELEMENTWISE_FLOP_KINDS",
    "count_params",
    "count_flops",
    "count_activations",
    "count_convs",
    "estimate_peak_memory",
    "time_inference",
    "MetricsReport",
    "profile",
]

BYTES_PER_ELEMENT = 4
# one operation per output element; data movement (add, concat, split, pool, resize, shuffle) is free
ELEMENTWISE_FLOP_KINDS = ("act", "mul", "bn", "scale")


def _numel(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def count_params(arch: ArchSpec, weights=None) -> int:
    """Learnable scalars implied by the graph; fixed derivative kernels count one scale per channel."""
    total = 0
    for node in arch.nodes:
        for key, shape in param_shapes(node).items():
            total += _numel(weights[key].shape) if weights is not None else _numel(shape)
    return total


def count_flops(arch: ArchSpec, input_h: int = 256, input_w: int = 256) -> int:
    """Multiply-accumulates of every conv plus one op per element of activations, products and affine maps."""
    shapes = infer_shapes(arch, input_h, input_w)
    total = 0
    for node in arch.nodes:
        out = shapes[node.name]
        if node.kind == "conv":
            cp = conv_params(node)
            total += _numel(out) * (cp.in_channels // cp.groups) * cp.kernel_h * cp.kernel_w
        elif node.kind in ELEMENTWISE_FLOP_KINDS:
            total += _numel(out)
    return total


def count_activations(arch: ArchSpec, input_h: int = 256, input_w: int = 256) -> int:
    shapes = infer_shapes(arch, input_h, input_w)
    return sum(_numel(shapes[n.name]) for n in arch.nodes if n.kind == "conv")


def count_convs(arch: ArchSpec) -> int:
    return arch.count("conv")


def estimate_peak_memory(arch: ArchSpec, input_h: int = 256, input_w: int = 256) -> int:
    """Peak bytes of simultaneously live tensors when nodes run in listed order.

    A tensor lives from its creation until its last consumer has run; the
    network input is live from the start and the output is never freed.
    """
    shapes = infer_shapes(arch, input_h, input_w)
    last_use = {INPUT: -1}
    for i, node in enumerate(arch.nodes):
        last_use[node.name] = i
        for ref in node.inputs:
            last_use[ref] = i
    last_use[arch.output] = len(arch.nodes)
    live = {INPUT: _numel(shapes[INPUT])}
    peak = live[INPUT]
    for i, node in enumerate(arch.nodes):
        live[node.name] = _numel(shapes[node.name])
        peak = max(peak, sum(live.values()))
        for name in [n for n in live if last_use[n] <= i]:
            del live[name]
    return peak * BYTES_PER_ELEMENT


def time_inference(arch: ArchSpec, weights, inputs, trials: int = 3, *, fast: bool = True) -> float:
    """Best (minimum) over ``trials`` of the mean per-image wall-clock time, in ms."""
    from .executor import forward

    inputs = list(inputs)
    if not inputs:
        raise ValueError("time_inference needs at least one input")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    weights.bind(arch)
    best = float("inf")
    for _ in range(trials):
        start = time.perf_counter()
        for x in inputs:
            forward(arch, weights, x, fast=fast)
        best = min(best, (time.perf_counter() - start) * 1000.0 / len(inputs))
    return best


@dataclass(frozen=True)
class MetricsReport:
    name: str
    input_h: int
    input_w: int
    params: int
    flops: int
    activations: int
    conv_count: int
    peak_activation_bytes: int
    runtime_ms: float | None = None

    def csv_header(self) -> str:
        return ",".join(f.name for f in fields(self))

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        row = ["" if v is None else v for v in asdict(self).values()]
        csv.writer(buf, lineterminator="").writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"architecture      {self.name or '-'}",
            f"input size        {self.input_h}x{self.input_w}",
            f"params            {self.params:,} ({self.params / 1e6:.3f}M)",
            f"FLOPs             {self.flops:,} ({self.flops / 1e9:.2f}G)",
            f"activations       {self.activations:,} ({self.activations / 1e6:.2f}M)",
            f"conv layers       {self.conv_count}",
            f"peak activations  {self.peak_activation_bytes:,} bytes ({self.peak_activation_bytes / 2**20:.2f} MiB)",
        ]
        if self.runtime_ms is not None:
            lines.append(f"runtime           {self.runtime_ms:.2f} ms (best of trials)")
        return "\n".join(lines)


def profile(arch: ArchSpec, input_h: int = 256, input_w: int = 256, runtime_ms: float | None = None) -> MetricsReport:
    return MetricsReport(
        name=arch.name,
        input_h=input_h,
        input_w=input_w,
        params=count_params(arch),
        flops=count_flops(arch, input_h, input_w),
        activations=count_activations(arch, input_h, input_w),
        conv_count=count_convs(arch),
        peak_activation_bytes=estimate_peak_memory(arch, input_h, input_w),
        runtime_ms=runtime_ms,
    )
