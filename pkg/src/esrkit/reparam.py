"""Structural reparameterization: merge linear multi-branch blocks into one conv.

Kernel algebra works in float64 and returns float32 tensors.  Kernels are
``(out, in, kh, kw)`` with odd spatial sizes so a centre tap is defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .graph import ArchError, ArchSpec, NodeSpec, conv_params, fixed_kernel, infer_shapes, param_shapes
from .tensor import BnParams, ShapeError
from .weights import WeightStore

__all__ = [
    "Branch",
    "ReparamError",
    "merge_identity",
    "fold_bn",
    "merge_seq_1x1_kxk",
    "merge_parallel",
    "lower_branch",
    "dense_weight",
    "prune_channels",
    "collapse_arch",
    "BRANCH_VARIANTS",
]

BRANCH_VARIANTS = ("conv_kxk", "seq_1x1_then_kxk", "identity", "conv_1xk", "conv_kx1", "scaled_fixed")


class ReparamError(ArchError):
    pass


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _bias(b, n: int) -> np.ndarray:
    return np.zeros(n) if b is None else _f64(b).reshape(n)


def _out(w, b):
    return np.asarray(w, np.float32), np.asarray(b, np.float32)


def _embed(w: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-pad a kernel to ``kh x kw`` keeping it centred."""
    h, v = w.shape[2:]
    if (kh - h) % 2 or (kw - v) % 2 or h > kh or v > kw:
        raise ShapeError(f"cannot centre a {h}x{v} kernel inside {kh}x{kw}")
    out = np.zeros(w.shape[:2] + (kh, kw), w.dtype)
    ph, pw = (kh - h) // 2, (kw - v) // 2
    out[:, :, ph : ph + h, pw : pw + v] = w
    return out


def merge_identity(w, b=None):
    """Fold a residual ``+x`` into a square, odd-sized kernel: ``conv(W', x) = conv(W, x) + x``."""
    w = _f64(w)
    co, ci, kh, kw = w.shape
    if co != ci:
        raise ShapeError(f"identity merge needs a square channel map, got {ci}->{co}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"identity merge needs an odd kernel, got {kh}x{kw}")
    w = w.copy()
    idx = np.arange(co)
    w[idx, idx, kh // 2, kw // 2] += 1.0
    return _out(w, _bias(b, co))


def fold_bn(w, b, bn: BnParams):
    """Absorb an inference-mode batch norm that follows a conv."""
    w = _f64(w)
    co = w.shape[0]
    if bn.channels != co:
        raise ShapeError(f"bn has {bn.channels} channels but conv has {co} output channels")
    scale, shift = bn.affine()
    return _out(w * scale[:, None, None, None], _bias(b, co) * scale + shift)


def merge_seq_1x1_kxk(w1, b1, w3, b3):
    """Compose a 1x1 conv followed by a k x k conv.

    Exact on the whole output (borders included) when the intermediate
    feature is padded with ``b1`` rather than zero.
    """
    w1, w3 = _f64(w1), _f64(w3)
    if w1.shape[2:] != (1, 1):
        raise ShapeError(f"first kernel must be 1x1, got {w1.shape[2:]}")
    if w3.shape[1] != w1.shape[0]:
        raise ShapeError(f"inner channel mismatch: 1x1 gives {w1.shape[0]}, kxk expects {w3.shape[1]}")
    b1 = _bias(b1, w1.shape[0])
    w = np.einsum("omuv,mi->oiuv", w3, w1[:, :, 0, 0])
    b = _bias(b3, w3.shape[0]) + np.einsum("omuv,m->o", w3, b1)
    return _out(w, b)


@dataclass(frozen=True, eq=False)
class Branch:
    """One parallel branch of a re-parameterizable block.

    ``tensors`` by variant:

    * ``conv_kxk`` / ``conv_1xk`` / ``conv_kx1``: ``(W, b)``
    * ``seq_1x1_then_kxk``: ``(W1, b1, W3, b3)``
    * ``identity``: ``(channels,)``
    * ``scaled_fixed``: ``(W1, b1, scale, bias)`` with ``kernel`` naming a
      fixed depthwise filter applied after the 1x1 conv
    """

    variant: str
    tensors: tuple
    kernel: str | None = None

    @classmethod
    def conv(cls, w, b=None):
        return cls("conv_kxk", (w, b))

    @classmethod
    def seq(cls, w1, b1, w3, b3):
        return cls("seq_1x1_then_kxk", (w1, b1, w3, b3))

    @classmethod
    def identity(cls, channels: int):
        return cls("identity", (channels,))

    @classmethod
    def fixed(cls, w1, b1, scale, bias, kernel: str):
        return cls("scaled_fixed", (w1, b1, scale, bias), kernel)


def lower_branch(br: Branch, k: int):
    """Equivalent ``k x k`` kernel and bias for one branch (float64)."""
    if k % 2 == 0:
        raise ShapeError(f"merge size must be odd, got {k}")
    v = br.variant
    if v in ("conv_kxk", "conv_1xk", "conv_kx1"):
        w, b = br.tensors
        w = _f64(w)
        if v == "conv_1xk" and w.shape[2] != 1:
            raise ShapeError(f"1xk branch has kernel {w.shape[2:]}")
        if v == "conv_kx1" and w.shape[3] != 1:
            raise ShapeError(f"kx1 branch has kernel {w.shape[2:]}")
        return _embed(w, k, k), _bias(b, w.shape[0])
    if v == "seq_1x1_then_kxk":
        w, b = merge_seq_1x1_kxk(*br.tensors)
        return _embed(_f64(w), k, k), _f64(b)
    if v == "identity":
        (c,) = br.tensors
        w = np.zeros((c, c, k, k))
        w[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
        return w, np.zeros(c)
    if v == "scaled_fixed":
        w1, b1, scale, bias = br.tensors
        scale = _f64(scale).reshape(-1)
        c = scale.shape[0]
        dw = np.zeros((c, c, 3, 3))
        dw[np.arange(c), np.arange(c)] = scale[:, None, None] * fixed_kernel(br.kernel)
        w, b = merge_seq_1x1_kxk(w1, b1, dw, bias)
        return _embed(_f64(w), k, k), _f64(b)
    raise ValueError(f"unknown branch variant {v!r}")


def merge_parallel(branches: Iterable[Branch], k: int = 3):
    """Sum of branches as one ``k x k`` conv.

    Lowered kernels are summed in a canonical order (by content), so the
    result does not depend on the order branches are given in.
    """
    branches = list(branches)
    if not branches:
        raise ValueError("merge_parallel needs at least one branch")
    lowered = []
    shape = None
    for i, br in enumerate(branches):
        try:
            w, b = lower_branch(br, k)
        except (ShapeError, ValueError, KeyError) as exc:
            raise ShapeError(f"branch {i}: {exc}") from None
        if shape is None:
            shape = w.shape
        elif w.shape != shape:
            raise ShapeError(f"branch {i}: shape {w.shape[:2]} incompatible with {shape[:2]}")
        lowered.append((BRANCH_VARIANTS.index(br.variant), w.tobytes(), b.tobytes(), w, b))
    lowered.sort(key=lambda t: t[:3])
    w = np.zeros(shape)
    b = np.zeros(shape[0])
    for *_, wi, bi in lowered:
        w += wi
        b += bi
    return _out(w, b)


def dense_weight(node: NodeSpec, weights) -> np.ndarray:
    """Conv weight as a dense ``(out, in, kh, kw)`` float64 array (groups and fixed kernels expanded)."""
    cp = conv_params(node)
    w = _f64(weights[f"{node.name}.weight"])
    if node.get("fixed"):
        w = w.reshape(-1, 1, 1, 1) * fixed_kernel(node.get("fixed"))[None, None]
    g = cp.groups
    if g == 1:
        return w
    cig, cog = cp.in_channels // g, cp.out_channels // g
    out = np.zeros((cp.out_channels, cp.in_channels) + w.shape[2:])
    for i in range(g):
        out[i * cog : (i + 1) * cog, i * cig : (i + 1) * cig] = w[i * cog : (i + 1) * cog]
    return out


def _conv_bias(node: NodeSpec, weights) -> np.ndarray:
    cp = conv_params(node)
    return _f64(weights[f"{node.name}.bias"]) if cp.has_bias else np.zeros(cp.out_channels)


def _bn_params(node: NodeSpec, weights) -> BnParams:
    n = node.name
    return BnParams(
        weights[f"{n}.gamma"], weights[f"{n}.beta"], weights[f"{n}.mean"], weights[f"{n}.var"], float(node.get("eps", 1e-5))
    )


# pruning


def prune_channels(arch: ArchSpec, weights: WeightStore, layer_name: str, keep):
    """Remove output channels of conv ``layer_name`` not in ``keep``.

    Direct consumers (convs, possibly behind activations/batch norms, and
    convs behind a concat) lose the matching input-channel slices.  Any other
    consumer kind raises :class:`ReparamError`.
    """
    node = arch.node(layer_name)
    if node.kind != "conv":
        raise ReparamError(f"node {layer_name!r} is a {node.kind}, only convs can be pruned")
    cp = conv_params(node)
    if cp.groups != 1 or node.get("fixed"):
        raise ReparamError(f"node {layer_name!r}: grouped or fixed-kernel convs cannot be pruned")
    keep = sorted({int(i) for i in keep})
    if not keep:
        raise ValueError("keep set is empty")
    if keep[0] < 0 or keep[-1] >= cp.out_channels:
        raise IndexError(f"keep index out of range for {cp.out_channels} channels: {keep}")
    keep_idx = np.array(keep)
    if len(keep) == cp.out_channels:
        return arch, weights

    consumers = arch.consumers()
    new_params: dict[str, dict] = {}
    changes: dict[str, np.ndarray] = {}

    def w(key):
        return weights[key]

    if arch.output == layer_name:
        raise ReparamError(f"node {layer_name!r} is the network output; its channels cannot be pruned")
    for other in arch.nodes:
        if other.get("pad_fill") == layer_name:
            raise ReparamError(f"node {other.name!r} pads with the bias of {layer_name!r}; unsupported topology")
    new_params[layer_name] = {**node.params, "out": len(keep)}
    changes[f"{layer_name}.weight"] = w(f"{layer_name}.weight")[keep_idx]
    if cp.has_bias:
        changes[f"{layer_name}.bias"] = w(f"{layer_name}.bias")[keep_idx]

    def visit(src: str, idx: np.ndarray, offset: int, width: int, via_concat: bool):
        # idx: kept channel positions within the src value; offset/width locate them in a concat
        for cname in consumers.get(src, []):
            c = arch.node(cname)
            if c.kind == "conv":
                ccp = conv_params(c)
                if ccp.groups != 1 or c.get("fixed") or c.get("pad_fill"):
                    raise ReparamError(f"consumer {cname!r}: grouped, fixed or bias-padded conv; unsupported topology")
                if c.inputs.count(src) != 1:
                    raise ReparamError(f"consumer {cname!r} uses {src!r} more than once")
                full = np.arange(ccp.in_channels)
                keep_in = np.concatenate([full[:offset], offset + idx, full[offset + width :]])
                new_params[cname] = {**new_params.get(cname, c.params), "in": len(keep_in)}
                changes[f"{cname}.weight"] = w(f"{cname}.weight")[:, keep_in]
            elif c.kind == "act" and not via_concat:
                if c.get("fn") == "prelu":
                    new_params[cname] = {**c.params, "ch": len(idx)}
                    changes[f"{cname}.slope"] = w(f"{cname}.slope")[idx]
                visit(cname, idx, offset, width, via_concat)
            elif c.kind == "bn" and not via_concat:
                new_params[cname] = {**c.params, "ch": len(idx)}
                for r in ("gamma", "beta", "mean", "var"):
                    changes[f"{cname}.{r}"] = w(f"{cname}.{r}")[idx]
                visit(cname, idx, offset, width, via_concat)
            elif c.kind == "concat" and not via_concat:
                if arch.output == cname:
                    raise ReparamError(f"concat {cname!r} is the network output; unsupported topology")
                off = 0
                for ref in c.inputs:
                    if ref == src:
                        break
                    off += _channels(arch, ref)
                if c.inputs.count(src) != 1:
                    raise ReparamError(f"concat {cname!r} uses {src!r} more than once")
                visit(cname, idx, off, width, True)
            else:
                raise ReparamError(
                    f"cannot prune through {c.kind} node {cname!r} (supported: conv, act, bn, concat -> conv)"
                )

    visit(layer_name, keep_idx, 0, cp.out_channels, False)
    nodes = tuple(n.replace(params=new_params[n.name]) if n.name in new_params else n for n in arch.nodes)
    return arch.with_nodes(nodes), weights.updated(changes)


def _channels(arch: ArchSpec, name: str) -> int:
    probe = 8 * arch.scale
    shapes = infer_shapes(arch, probe, probe)
    return shapes[name][0]


# whole-graph collapse


class _Rep:
    """Affine map from the group input: ``y = conv(K, x) + b`` with K centred."""

    __slots__ = ("k", "b")

    def __init__(self, k: np.ndarray, b: np.ndarray):
        self.k = k
        self.b = b

    @property
    def pointwise(self) -> bool:
        return self.k.shape[2:] == (1, 1)


def _apply_conv(node: NodeSpec, rep: _Rep, weights) -> _Rep:
    cp = conv_params(node)
    w = dense_weight(node, weights)
    bias = _conv_bias(node, weights)
    kh, kw = cp.kernel_h, cp.kernel_w
    if cp.stride != 1 or cp.dilation != 1:
        raise ReparamError("strided or dilated conv")
    if kh % 2 == 0 or kw % 2 == 0 or cp.pad != (kh // 2, kw // 2):
        raise ReparamError("conv must be odd-sized with same padding")
    if (kh, kw) == (1, 1):
        k = np.einsum("om,miuv->oiuv", w[:, :, 0, 0], rep.k)
        return _Rep(k, bias + w[:, :, 0, 0] @ rep.b)
    if not rep.pointwise:
        raise ReparamError(f"{kh}x{kw} conv stacked on a spatial kernel is not border-exact")
    fill_node = node.get("pad_fill")
    fill = _f64(weights[f"{fill_node}.bias"]) if fill_node else np.zeros(cp.in_channels)
    if not np.allclose(fill, rep.b, rtol=0, atol=1e-6):
        raise ReparamError("padding constant differs from the incoming bias; borders would not match")
    k = np.einsum("omuv,mi->oiuv", w, rep.k[:, :, 0, 0])
    return _Rep(k, bias + np.einsum("omuv,m->o", w, rep.b))


def _sum_reps(reps: list[_Rep]) -> _Rep:
    kh = max(r.k.shape[2] for r in reps)
    kw = max(r.k.shape[3] for r in reps)
    k = sum(_embed(r.k, kh, kw) for r in reps)
    return _Rep(k, sum(r.b for r in reps))


def _collapse_group(arch: ArchSpec, gid: str, members: list[NodeSpec], weights, consumers) -> tuple[NodeSpec, dict]:
    names = {n.name for n in members}
    ext = sorted({r for n in members for r in n.inputs if r not in names})
    if len(ext) != 1:
        raise ReparamError(f"group {gid!r} must have exactly one external input, found {ext}")
    outs = [n.name for n in members if n.name == arch.output or any(c not in names for c in consumers.get(n.name, []))]
    if len(outs) != 1:
        raise ReparamError(f"group {gid!r} must have exactly one output, found {outs}")
    src = ext[0]
    cin = _channels(arch, src)
    reps = {src: _Rep(np.eye(cin)[:, :, None, None], np.zeros(cin))}
    for n in members:
        ins = [reps[r] for r in n.inputs]
        try:
            if n.kind == "conv":
                reps[n.name] = _apply_conv(n, ins[0], weights)
            elif n.kind == "add":
                reps[n.name] = _sum_reps(ins)
            elif n.kind == "bn":
                scale, shift = _bn_params(n, weights).affine()
                reps[n.name] = _Rep(ins[0].k * scale[:, None, None, None], ins[0].b * scale + shift)
            elif n.kind == "scale":
                s = _f64(weights[f"{n.name}.weight"])
                reps[n.name] = _Rep(ins[0].k * s[:, None, None, None], ins[0].b * s)
            elif n.kind == "global_skip_ref":
                reps[n.name] = ins[0]
            else:
                raise ReparamError(f"{n.kind} is not linear")
        except ReparamError as exc:
            raise ReparamError(f"group {gid!r} cannot be collapsed at node {n.name!r}: {exc}") from None
    out = reps[outs[0]]
    kh, kw = out.k.shape[2:]
    co = out.k.shape[0]
    params = {"in": cin, "out": co}
    if kh == kw:
        params.update(k=kh, pad=kh // 2)
    else:
        params.update(kh=kh, kw=kw, padh=kh // 2, padw=kw // 2)
    node = NodeSpec(outs[0], "conv", params, (src,))
    return node, {f"{outs[0]}.weight": out.k.astype(np.float32), f"{outs[0]}.bias": out.b.astype(np.float32)}


def _group_pass(arch: ArchSpec, weights: WeightStore):
    groups: dict[str, list[NodeSpec]] = {}
    for n in arch.nodes:
        if n.group is not None:
            groups.setdefault(n.group, []).append(n)
    if not groups:
        return arch, weights
    consumers = arch.consumers()
    replaced: dict[str, NodeSpec] = {}
    changes: dict[str, np.ndarray | None] = {}
    for gid, members in groups.items():
        node, tensors = _collapse_group(arch, gid, members, weights, consumers)
        replaced[node.name] = node
        for m in members:
            for key in _tensor_keys(m):
                changes[key] = None
        changes.update(tensors)
    grouped = {n.name for ms in groups.values() for n in ms}
    nodes = []
    for n in arch.nodes:
        if n.name in replaced:
            nodes.append(replaced[n.name])
        elif n.name not in grouped:
            nodes.append(n)
    return arch.with_nodes(tuple(nodes)), weights.updated(changes)


def _tensor_keys(node: NodeSpec):
    return list(param_shapes(node))


def _bn_pass(arch: ArchSpec, weights: WeightStore):
    if not arch.count("bn"):
        return arch, weights
    consumers = arch.consumers()
    by_name = {n.name: n for n in arch.nodes}
    drop: set[str] = set()
    moved: dict[str, NodeSpec] = {}  # bn name -> folded conv placed at the bn's position
    rename: dict[str, str] = {}
    changes: dict[str, np.ndarray | None] = {}
    for n in arch.nodes:
        if n.kind != "bn":
            continue
        (src,) = n.inputs
        conv = by_name.get(src)
        if conv is None or conv.kind != "conv":
            raise ReparamError(f"bn node {n.name!r} does not follow a conv; cannot fold")
        if consumers.get(src, []) != [n.name] or src == arch.output:
            raise ReparamError(f"bn node {n.name!r}: conv {src!r} has other consumers; cannot fold")
        w, b = fold_bn(dense_weight(conv, weights) if conv.get("fixed") else weights[f"{src}.weight"],
                       _conv_bias(conv, weights), _bn_params(n, weights))
        params = {k: v for k, v in conv.params.items() if k not in ("fixed", "bias")}
        if conv.get("fixed"):
            w = w[np.arange(w.shape[0]), np.arange(w.shape[0])][:, None]
        drop.add(src)
        moved[n.name] = conv.replace(params=params)
        rename[n.name] = src
        for key in _tensor_keys(n):
            changes[key] = None
        changes[f"{src}.weight"] = w
        changes[f"{src}.bias"] = b
    nodes = []
    for n in arch.nodes:
        if n.name in drop:
            continue
        if n.name in moved:
            nodes.append(moved[n.name])
            continue
        new_inputs = tuple(rename.get(r, r) for r in n.inputs)
        params = n.params
        if params.get("pad_fill") in rename:
            params = {**params, "pad_fill": rename[params["pad_fill"]]}
        if new_inputs != n.inputs or params is not n.params:
            n = n.replace(inputs=new_inputs, params=params)
        nodes.append(n)
    return arch.with_nodes(tuple(nodes)), weights.updated(changes)


def collapse_arch(arch: ArchSpec, weights: WeightStore):
    """Replace every tagged branch group by one conv and fold every batch norm.

    Returns ``(arch', weights')``.  Plain graphs come back unchanged.
    """
    weights.bind(arch)
    arch, weights = _group_pass(arch, weights)
    arch, weights = _bn_pass(arch, weights)
    weights.bind(arch)
    return arch, weights

