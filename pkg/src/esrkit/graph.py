"""Declarative architecture graphs.

An :class:`ArchSpec` is an ordered list of :class:`NodeSpec`.  Each node names
its inputs (earlier nodes or the reserved name ``input``); the last node is the
network output.  The text form is one node per line::

    @scale 4
    @in_channels 3
    head conv in=3 out=64 k=3 pad=1 inputs=input
    up pixel_shuffle s=4 inputs=head

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ACTIVATIONS, ConvParams

__all__ = [
    "INPUT",
    "KINDS",
    "FIXED_KERNEL_NAMES",
    "FIXED_KERNELS",
    "fixed_kernel",
    "NodeSpec",
    "ArchSpec",
    "ArchError",
    "validate",
    "infer_shapes",
    "conv_params",
    "param_shapes",
]

INPUT = "input"
KINDS = (
    "conv",
    "bn",
    "act",
    "pixel_shuffle",
    "add",
    "mul",
    "concat",
    "split",
    "pool",
    "resize",
    "global_skip_ref",
    "scale",
)
FIXED_KERNELS = {
    "sobel_x": ((1, 0, -1), (2, 0, -2), (1, 0, -1)),
    "sobel_y": ((1, 2, 1), (0, 0, 0), (-1, -2, -1)),
    "laplacian": ((0, 1, 0), (1, -4, 1), (0, 1, 0)),
    "laplacian8": ((1, 1, 1), (1, -8, 1), (1, 1, 1)),
}
FIXED_KERNEL_NAMES = tuple(FIXED_KERNELS)

_ARITY = {
    "conv": (1, 1),
    "bn": (1, 1),
    "act": (1, 1),
    "pixel_shuffle": (1, 1),
    "add": (2, None),
    "mul": (2, 2),
    "concat": (1, None),
    "split": (1, 1),
    "pool": (1, 1),
    "resize": (1, 2),
    "global_skip_ref": (1, 1),
    "scale": (1, 1),
}


def fixed_kernel(name: str) -> np.ndarray:
    """The constant 3x3 derivative kernel ``name`` as float32."""
    try:
        return np.array(FIXED_KERNELS[name], np.float32)
    except KeyError:
        raise ValueError(f"unknown fixed kernel {name!r}; expected one of {FIXED_KERNEL_NAMES}") from None


class ArchError(ValueError):
    """Malformed architecture text or an invalid graph."""


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = ()

    def get(self, key, default=None):
        return self.params.get(key, default)

    @property
    def group(self) -> str | None:
        return self.params.get("group")

    def replace(self, **changes) -> "NodeSpec":
        d = {"name": self.name, "kind": self.kind, "params": dict(self.params), "inputs": self.inputs}
        d.update(changes)
        d["inputs"] = tuple(d["inputs"])
        return NodeSpec(**d)

    def to_line(self) -> str:
        parts = [self.name, self.kind]
        parts += [f"{k}={_fmt(v)}" for k, v in self.params.items()]
        parts.append("inputs=" + ",".join(self.inputs))
        return " ".join(parts)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


@dataclass(frozen=True)
class ArchSpec:
    nodes: tuple[NodeSpec, ...]
    scale: int = 4
    in_channels: int = 3
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    @property
    def output(self) -> str:
        if not self.nodes:
            raise ArchError("empty architecture has no output")
        return self.nodes[-1].name

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        for n in self.nodes:
            out.setdefault(n.name, [])
        for n in self.nodes:
            for i in n.inputs:
                out.setdefault(i, []).append(n.name)
        return out

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def with_nodes(self, nodes: Iterable[NodeSpec]) -> "ArchSpec":
        return ArchSpec(tuple(nodes), self.scale, self.in_channels, self.name)

    # text format

    def to_text(self) -> str:
        lines = []
        if self.name:
            lines.append(f"@name {self.name}")
        lines.append(f"@scale {self.scale}")
        lines.append(f"@in_channels {self.in_channels}")
        lines += [n.to_line() for n in self.nodes]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        header = {"scale": 4, "in_channels": 3, "name": ""}
        nodes = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("@"):
                key, _, val = line[1:].partition(" ")
                if key not in header:
                    raise ArchError(f"line {lineno}: unknown directive @{key}")
                val = val.strip()
                header[key] = val if key == "name" else _int_or_fail(val, lineno)
                continue
            toks = line.split()
            if len(toks) < 2:
                raise ArchError(f"line {lineno}: expected 'name kind key=value... inputs=a,b'")
            name, kind = toks[0], toks[1]
            params = {}
            inputs: tuple[str, ...] | None = None
            for tok in toks[2:]:
                key, eq, val = tok.partition("=")
                if not eq or not key:
                    raise ArchError(f"line {lineno}: malformed token {tok!r}")
                if key == "inputs":
                    inputs = tuple(v for v in val.split(",") if v)
                else:
                    params[key] = _parse_value(val)
            if inputs is None:
                raise ArchError(f"line {lineno}: node {name!r} lacks inputs=")
            nodes.append(NodeSpec(name, kind, params, inputs))
        return cls(tuple(nodes), header["scale"], header["in_channels"], header["name"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ArchSpec":
        return cls.from_text(Path(path).read_text())


def _int_or_fail(val: str, lineno: int) -> int:
    try:
        return int(val)
    except ValueError:
        raise ArchError(f"line {lineno}: expected an integer, got {val!r}") from None


def conv_params(node: NodeSpec):
    """Build :class:`~esrkit.tensor.ConvParams` from a conv node's hyperparameters."""
    p = node.params
    k = p.get("k")
    kh = p.get("kh", k)
    kw = p.get("kw", k)
    pad = p.get("pad", 0)
    padh = p.get("padh", pad)
    padw = p.get("padw", pad)
    return ConvParams(
        out_channels=int(p["out"]),
        in_channels=int(p["in"]),
        kernel_h=int(kh),
        kernel_w=int(kw),
        stride=int(p.get("stride", 1)),
        padding=(int(padh), int(padw)),
        dilation=int(p.get("dil", 1)),
        groups=int(p.get("groups", 1)),
        has_bias=bool(int(p.get("bias", 1))),
    )


def param_shapes(node: NodeSpec) -> dict[str, tuple[int, ...]]:
    """Learnable tensors a node needs, keyed ``"<node>.<role>"``."""
    p = node.params
    k = node.kind
    if k == "conv":
        cp = conv_params(node)
        shapes = {}
        if p.get("fixed"):
            shapes[f"{node.name}.weight"] = (cp.out_channels, 1, 1, 1)
        else:
            shapes[f"{node.name}.weight"] = cp.weight_shape
        if cp.has_bias:
            shapes[f"{node.name}.bias"] = (cp.out_channels,)
        return shapes
    if k == "bn":
        c = int(p["ch"])
        return {f"{node.name}.{r}": (c,) for r in ("gamma", "beta", "mean", "var")}
    if k == "act" and p.get("fn") == "prelu":
        return {f"{node.name}.slope": (int(p["ch"]),)}
    if k == "scale":
        return {f"{node.name}.weight": (int(p["ch"]),)}
    return {}


def _node_shape(node: NodeSpec, ins: list[tuple[int, int, int]], arch_nodes: dict[str, NodeSpec]):
    """Output (c, h, w) of ``node`` given input shapes; raises ValueError with a reason."""
    k = node.kind
    p = node.params
    c0, h0, w0 = ins[0]
    if k == "conv":
        try:
            cp = conv_params(node)
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"bad conv hyperparameters: {exc}") from None
        if c0 != cp.in_channels:
            raise ValueError(f"channel mismatch: input has {c0} channels, conv expects in={cp.in_channels}")
        fixed = p.get("fixed")
        if fixed:
            if fixed not in FIXED_KERNEL_NAMES:
                raise ValueError(f"unknown fixed kernel {fixed!r}")
            if not (cp.groups == cp.in_channels == cp.out_channels and cp.kernel_h == cp.kernel_w == 3):
                raise ValueError("fixed kernels need a 3x3 depthwise conv with in == out == groups")
        fill = p.get("pad_fill")
        if fill is not None:
            src = arch_nodes.get(fill)
            if src is None or src.kind != "conv" or not int(src.get("bias", 1)):
                raise ValueError(f"pad_fill {fill!r} must name a conv node with bias")
            if int(src.params["out"]) != cp.in_channels:
                raise ValueError(f"pad_fill {fill!r} has {src.params['out']} channels, conv input has {cp.in_channels}")
        oh, ow = cp.output_hw(h0, w0)
        if oh < 1 or ow < 1:
            raise ValueError(f"spatial size {h0}x{w0} too small for kernel")
        return cp.out_channels, oh, ow
    if k in ("bn", "scale"):
        if int(p["ch"]) != c0:
            raise ValueError(f"channel mismatch: input has {c0} channels, node declares ch={p['ch']}")
        return ins[0]
    if k == "act":
        fn = p.get("fn")
        if fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation fn={fn!r}")
        if fn == "prelu" and int(p.get("ch", -1)) != c0:
            raise ValueError(f"prelu ch={p.get('ch')} does not match input channels {c0}")
        return ins[0]
    if k == "global_skip_ref":
        return ins[0]
    if k == "pixel_shuffle":
        s = int(p["s"])
        if s < 1 or c0 % (s * s):
            raise ValueError(f"channels {c0} not divisible by s^2={s * s}")
        return c0 // (s * s), h0 * s, w0 * s
    if k in ("add", "mul"):
        for i, shp in enumerate(ins[1:], 1):
            if shp != ins[0]:
                raise ValueError(f"operand {i} shape {shp} differs from operand 0 shape {ins[0]}")
        return ins[0]
    if k == "concat":
        for i, shp in enumerate(ins[1:], 1):
            if shp[1:] != ins[0][1:]:
                raise ValueError(f"operand {i} spatial size {shp[1:]} differs from {ins[0][1:]}")
        return sum(s[0] for s in ins), h0, w0
    if k == "split":
        start, size = int(p["start"]), int(p["size"])
        if start < 0 or size < 1 or start + size > c0:
            raise ValueError(f"channel range [{start}, {start + size}) outside input's {c0} channels")
        return size, h0, w0
    if k == "pool":
        fn = p.get("fn")
        if fn == "global_avg":
            return c0, 1, 1
        if fn not in ("max", "avg"):
            raise ValueError(f"unknown pool fn={fn!r}")
        kk = int(p["k"])
        st = int(p.get("stride", kk))
        pad = int(p.get("pad", 0))
        if kk > h0 + 2 * pad or kk > w0 + 2 * pad:
            raise ValueError(f"pool window {kk} larger than input {h0}x{w0}")
        return c0, (h0 + 2 * pad - kk) // st + 1, (w0 + 2 * pad - kk) // st + 1
    if k == "resize":
        if p.get("mode") not in ("nearest", "bilinear"):
            raise ValueError(f"unknown resize mode {p.get('mode')!r}")
        if len(ins) == 2:
            return c0, ins[1][1], ins[1][2]
        if "factor" in p:
            f = int(p["factor"])
            return c0, h0 * f, w0 * f
        return c0, int(p["out_h"]), int(p["out_w"])
    raise ValueError(f"unknown kind {k!r}")


def _walk(arch: ArchSpec, h: int, w: int, n_diag: list[str] | None):
    shapes: dict[str, tuple[int, int, int] | None] = {INPUT: (arch.in_channels, h, w)}
    by_name: dict[str, NodeSpec] = {}
    for node in arch.nodes:
        where = f"node {node.name!r}"

        def fail(msg):
            if n_diag is None:
                raise ArchError(f"{where}: {msg}")
            n_diag.append(f"{where}: {msg}")

        if node.name == INPUT or node.name in by_name:
            fail("duplicate or reserved name")
        if node.kind not in KINDS:
            fail(f"unknown kind {node.kind!r}")
            shapes[node.name] = None
            by_name[node.name] = node
            continue
        lo, hi = _ARITY[node.kind]
        if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
            fail(f"{node.kind} takes {lo}..{hi or 'n'} inputs, got {len(node.inputs)}")
            shapes[node.name] = None
            by_name[node.name] = node
            continue
        ins = []
        ok = True
        for ref in node.inputs:
            if ref not in shapes:
                fail(f"input {ref!r} does not refer to an earlier node")
                ok = False
            elif shapes[ref] is None:
                ok = False
            else:
                ins.append(shapes[ref])
        if ok:
            try:
                shapes[node.name] = _node_shape(node, ins, by_name)
            except (ValueError, KeyError, TypeError) as exc:
                fail(str(exc) if not isinstance(exc, KeyError) else f"missing hyperparameter {exc}")
                shapes[node.name] = None
        else:
            shapes[node.name] = None
        by_name[node.name] = node
    return shapes


def validate(arch: ArchSpec, probe: int = 64) -> list[str]:
    """Return diagnostics (empty when the graph is well formed).

    Channel arithmetic, references and arities are checked for every node;
    spatial agreement and the declared scale are checked by propagating a
    ``probe x probe`` input.
    """
    diags: list[str] = []
    if not arch.nodes:
        return ["architecture has no nodes"]
    if arch.scale < 1 or arch.in_channels < 1:
        diags.append("scale and in_channels must be positive")
    shapes = _walk(arch, probe, probe, diags)
    out = shapes.get(arch.output)
    if out is not None and (out[1], out[2]) != (probe * arch.scale, probe * arch.scale):
        diags.append(
            f"node {arch.output!r}: output spatial size {out[1]}x{out[2]} is not input x{arch.scale}"
        )
    return diags


def infer_shapes(arch: ArchSpec, h: int, w: int) -> dict[str, tuple[int, int, int]]:
    """Per-node ``(c, h, w)`` for an ``h x w`` input; raises :class:`ArchError` if invalid."""
    return _walk(arch, h, w, None)  # type: ignore[return-value]
