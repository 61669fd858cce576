"""Reference forward executor for :class:`~esrkit.graph.ArchSpec` graphs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import INPUT, ArchSpec, NodeSpec, conv_params, fixed_kernel
from .weights import WeightStore

__all__ = ["forward", "trace", "conv_weight"]


def conv_weight(node: NodeSpec, weights: WeightStore) -> np.ndarray:
    """Effective dense weight of a conv node (fixed kernels are expanded)."""
    w = weights[f"{node.name}.weight"]
    fixed = node.get("fixed")
    if fixed:
        return (w.reshape(-1, 1, 1, 1) * fixed_kernel(fixed)[None, None]).astype(np.float32)
    return w


def _eval(node: NodeSpec, ins: list[np.ndarray], weights: WeightStore, fast: bool) -> np.ndarray:
    k = node.kind
    p = node.params
    x = ins[0]
    if k == "conv":
        cp = conv_params(node)
        bias = weights[f"{node.name}.bias"] if cp.has_bias else None
        fill = p.get("pad_fill")
        pad_value = weights[f"{fill}.bias"] if fill else None
        return T.conv2d(x, cp, conv_weight(node, weights), bias, pad_value=pad_value, fast=fast)
    if k == "bn":
        bn = T.BnParams(
            weights[f"{node.name}.gamma"],
            weights[f"{node.name}.beta"],
            weights[f"{node.name}.mean"],
            weights[f"{node.name}.var"],
            float(p.get("eps", 1e-5)),
        )
        return T.batchnorm_inference(x, bn)
    if k == "act":
        fn = p["fn"]
        slope = weights[f"{node.name}.slope"] if fn == "prelu" else p.get("slope")
        return T.activation(x, fn, slope)
    if k == "pixel_shuffle":
        return T.pixel_shuffle(x, int(p["s"]))
    if k == "add":
        out = x.copy()
        for y in ins[1:]:
            out += y
        return out
    if k == "mul":
        return x * ins[1]
    if k == "concat":
        return np.concatenate(ins, axis=1)
    if k == "split":
        start, size = int(p["start"]), int(p["size"])
        return np.ascontiguousarray(x[:, start : start + size])
    if k == "pool":
        fn = p["fn"]
        if fn == "global_avg":
            return T.pool(x, "global_avg")
        kk = int(p["k"])
        return T.pool(x, fn, kk, int(p.get("stride", kk)), int(p.get("pad", 0)))
    if k == "resize":
        if len(ins) == 2:
            oh, ow = ins[1].shape[2:]
        elif "factor" in p:
            oh, ow = x.shape[2] * int(p["factor"]), x.shape[3] * int(p["factor"])
        else:
            oh, ow = int(p["out_h"]), int(p["out_w"])
        return T.resize(x, p["mode"], oh, ow)
    if k == "global_skip_ref":
        return x
    if k == "scale":
        return x * weights[f"{node.name}.weight"].reshape(1, -1, 1, 1)
    raise ValueError(f"node {node.name!r}: unknown kind {k!r}")


def _run(arch: ArchSpec, weights: WeightStore, x, fast: bool, keep_all: bool):
    x = T.as_tensor(x)
    if x.shape[1] != arch.in_channels:
        raise T.ShapeError(f"input has {x.shape[1]} channels, architecture expects {arch.in_channels}")
    weights.bind(arch)
    last_use: dict[str, int] = {}
    for i, node in enumerate(arch.nodes):
        for ref in node.inputs:
            last_use[ref] = i
    values = {INPUT: x}
    out_name = arch.output
    for i, node in enumerate(arch.nodes):
        values[node.name] = _eval(node, [values[r] for r in node.inputs], weights, fast)
        if not keep_all:
            for ref in set(node.inputs):
                if last_use[ref] == i and ref != out_name:
                    del values[ref]
    return values


def forward(arch: ArchSpec, weights: WeightStore, x, *, fast: bool = False) -> np.ndarray:
    """Run the graph on ``x`` and return the output node's value.

    Weights are bound strictly first; a mismatch raises
    :class:`~esrkit.weights.BindingError` naming the first offending tensor.
    """
    return _run(arch, weights, x, fast, keep_all=False)[arch.output]


def trace(arch: ArchSpec, weights: WeightStore, x, *, fast: bool = False) -> dict[str, np.ndarray]:
    """Like :func:`forward` but return every node's value (plus ``"input"``)."""
    return _run(arch, weights, x, fast, keep_all=True)
