"""Block templates and builders for the efficient SR architectures.

Templates append nodes to a :class:`GraphBuilder` and return the name of their
output node.  Training-time multi-branch blocks tag every node of the block
with ``group=<name>``; :func:`esrkit.reparam.collapse_arch` replaces each
tagged group by one convolution named like the group's output node, so a
collapsed training graph lines up name-for-name with the ``deploy=True`` build.
"""

from __future__ import annotations

from typing import Callable

from .graph import INPUT, ArchSpec, NodeSpec

__all__ = [
    "GraphBuilder",
    "upsampler",
    "imdb",
    "esa",
    "rfdb",
    "rlfb",
    "repblock",
    "erb",
    "hfab",
    "ecb",
    "reconv3",
    "pixel_attention",
    "channel_weighting",
    "bsconv",
    "esdb_block",
    "build_imdn",
    "build_rfdn",
    "build_rlfn",
    "build_fmen",
    "build_bsrn",
    "build_efdn",
    "BUILDERS",
    "build",
]


class GraphBuilder:
    """Accumulates nodes while tracking each node's channel count."""

    def __init__(self, in_channels: int = 3, scale: int = 4, name: str = ""):
        self.in_channels = in_channels
        self.scale = scale
        self.name = name
        self.nodes: list[NodeSpec] = []
        self.channels: dict[str, int] = {INPUT: in_channels}

    def _add(self, name: str, kind: str, inputs, channels: int, **params) -> str:
        if name in self.channels:
            raise ValueError(f"duplicate node name {name!r}")
        params = {k: v for k, v in params.items() if v is not None}
        self.nodes.append(NodeSpec(name, kind, params, tuple(inputs)))
        self.channels[name] = channels
        return name

    def conv(
        self,
        name,
        src,
        out,
        k=3,
        *,
        kh=None,
        kw=None,
        stride=None,
        pad=None,
        groups=None,
        bias=True,
        fixed=None,
        pad_fill=None,
        group=None,
    ) -> str:
        cin = self.channels[src]
        params = {"in": cin, "out": out}
        if kh is None and kw is None:
            params["k"] = k
            if pad is None:
                pad = k // 2
            params["pad"] = pad
        else:
            kh = k if kh is None else kh
            kw = k if kw is None else kw
            params.update(kh=kh, kw=kw, padh=kh // 2 if pad is None else pad, padw=kw // 2 if pad is None else pad)
        params.update(stride=stride, groups=groups, bias=None if bias else 0, fixed=fixed, pad_fill=pad_fill, group=group)
        return self._add(name, "conv", [src], out, **params)

    def act(self, name, src, fn, slope=None, group=None) -> str:
        ch = self.channels[src] if fn == "prelu" else None
        return self._add(name, "act", [src], self.channels[src], fn=fn, slope=slope, ch=ch, group=group)

    def bn(self, name, src, eps=1e-5, group=None) -> str:
        return self._add(name, "bn", [src], self.channels[src], ch=self.channels[src], eps=eps, group=group)

    def add(self, name, *srcs, group=None) -> str:
        return self._add(name, "add", srcs, self.channels[srcs[0]], group=group)

    def mul(self, name, a, b) -> str:
        return self._add(name, "mul", [a, b], self.channels[a])

    def concat(self, name, *srcs) -> str:
        return self._add(name, "concat", srcs, sum(self.channels[s] for s in srcs))

    def split(self, name, src, start, size) -> str:
        return self._add(name, "split", [src], size, start=start, size=size)

    def pool(self, name, src, fn, k=None, stride=None, pad=None) -> str:
        return self._add(name, "pool", [src], self.channels[src], fn=fn, k=k, stride=stride, pad=pad)

    def resize_like(self, name, src, ref, mode="bilinear") -> str:
        return self._add(name, "resize", [src, ref], self.channels[src], mode=mode)

    def scale_channels(self, name, src) -> str:
        return self._add(name, "scale", [src], self.channels[src], ch=self.channels[src])

    def pixel_shuffle(self, name, src, s) -> str:
        return self._add(name, "pixel_shuffle", [src], self.channels[src] // (s * s), s=s)

    def ref(self, name, src) -> str:
        return self._add(name, "global_skip_ref", [src], self.channels[src])

    def build(self) -> ArchSpec:
        return ArchSpec(tuple(self.nodes), self.scale, self.in_channels, self.name)


ConvFn = Callable[..., str]


def upsampler(b: GraphBuilder, src: str, out_channels: int = 3, s: int = 4, prefix: str = "up") -> str:
    """One trainable 3x3 conv expanding to ``out*s^2`` channels, then pixel shuffle."""
    c = b.conv(f"{prefix}.conv", src, out_channels * s * s, 3)
    return b.pixel_shuffle(prefix, c, s)


def imdb(b: GraphBuilder, p: str, x: str, channels: int = 64, distill: int = 16, slope: float = 0.05) -> str:
    """Information multi-distillation block: four split stages, concat, 1x1 fusion, skip."""
    rem = channels - distill
    cur = x
    kept = []
    for i in (1, 2, 3):
        c = b.conv(f"{p}.c{i}", cur, channels, 3)
        a = b.act(f"{p}.a{i}", c, "leaky_relu", slope)
        kept.append(b.split(f"{p}.d{i}", a, 0, distill))
        cur = b.split(f"{p}.r{i}", a, distill, rem)
    kept.append(b.conv(f"{p}.c4", cur, distill, 3))
    cat = b.concat(f"{p}.cat", *kept)
    fused = b.conv(f"{p}.c5", cat, channels, 1)
    return b.add(p, fused, x)


def esa(
    b: GraphBuilder,
    p: str,
    x: str,
    esa_channels: int,
    *,
    simplified: bool = False,
    pool_k: int = 7,
    pool_stride: int = 3,
    conv3: ConvFn | None = None,
) -> str:
    """Enhanced spatial attention gate ``x * sigmoid(...)``.

    1x1 reduce -> strided 3x3 -> max pool -> conv group (three 3x3 convs with
    ReLU, or one 3x3 when ``simplified``) -> bilinear resize back -> add the
    1x1 skip of the reduced features -> 1x1 expand -> sigmoid.
    """
    conv3 = conv3 or (lambda name, src, out: b.conv(name, src, out, 3))
    ch = b.channels[x]
    f = esa_channels
    c1_ = b.conv(f"{p}.conv1", x, f, 1)
    c1 = b.conv(f"{p}.conv2", c1_, f, 3, stride=2, pad=0)
    vmax = b.pool(f"{p}.pool", c1, "max", pool_k, pool_stride)
    if simplified:
        c3 = conv3(f"{p}.conv3", vmax, f)
    else:
        v = b.act(f"{p}.conv_max_act", conv3(f"{p}.conv_max", vmax, f), "relu")
        c3 = b.act(f"{p}.conv3_act", conv3(f"{p}.conv3", v, f), "relu")
        c3 = conv3(f"{p}.conv3_", c3, f)
    up = b.resize_like(f"{p}.up", c3, x)
    cf = b.conv(f"{p}.conv_f", c1_, f, 1)
    c4 = b.conv(f"{p}.conv4", b.add(f"{p}.sum", up, cf), ch, 1)
    m = b.act(f"{p}.gate", c4, "sigmoid")
    return b.mul(p, x, m)


def _srb(b: GraphBuilder, p: str, x: str, slope: float) -> str:
    c = b.conv(f"{p}.conv", x, b.channels[x], 3)
    return b.act(p, b.add(f"{p}.sum", c, x), "leaky_relu", slope)


def rfdb(
    b: GraphBuilder,
    p: str,
    x: str,
    distill: int | None = None,
    esa_channels: int | None = None,
    slope: float = 0.05,
    refine: Callable[[GraphBuilder, str, str], str] | None = None,
) -> str:
    """Residual feature distillation block.

    Three stages of {1x1 distillation, refinement}; the refinement defaults to
    the shallow residual block ``lrelu(conv3(x) + x)`` and can be swapped
    (e.g. for an edge-oriented block).
    """
    ch = b.channels[x]
    dc = distill or ch // 2
    refine = refine or (lambda bb, name, src: _srb(bb, name, src, slope))
    cur = x
    kept = []
    for i in (1, 2, 3):
        d = b.conv(f"{p}.c{i}_d", cur, dc, 1)
        kept.append(b.act(f"{p}.c{i}_d_act", d, "leaky_relu", slope))
        cur = refine(b, f"{p}.c{i}_r", cur)
    r4 = b.act(f"{p}.c4_act", b.conv(f"{p}.c4", cur, dc, 3), "leaky_relu", slope)
    cat = b.concat(f"{p}.cat", *kept, r4)
    fused = b.conv(f"{p}.c5", cat, ch, 1)
    return esa(b, f"{p}.esa", fused, esa_channels or ch // 4)


def rlfb(
    b: GraphBuilder,
    p: str,
    x: str,
    mid_channels: int | None = None,
    esa_channels: int = 16,
    slope: float = 0.05,
) -> str:
    """Residual local feature block: three conv3+act, residual add, 1x1, simplified ESA."""
    ch = b.channels[x]
    mid = mid_channels or ch
    h = b.act(f"{p}.c1_act", b.conv(f"{p}.c1_r", x, mid, 3), "leaky_relu", slope)
    h = b.act(f"{p}.c2_act", b.conv(f"{p}.c2_r", h, mid, 3), "leaky_relu", slope)
    h = b.act(f"{p}.c3_act", b.conv(f"{p}.c3_r", h, ch, 3), "leaky_relu", slope)
    h = b.add(f"{p}.sum", h, x)
    h = b.conv(f"{p}.c5", h, ch, 1)
    return esa(b, f"{p}.esa", h, esa_channels, simplified=True)


def repblock(b: GraphBuilder, p: str, x: str, out: int | None = None, ratio: int = 2, deploy: bool = False) -> str:
    """Re-parameterizable 3x3 conv.

    Training form: 1x1 expand -> (3x3 on bias-padded features + identity) ->
    1x1 reduce -> + input (when channel counts match).
    """
    cin = b.channels[x]
    out = out or cin
    if deploy:
        return b.conv(p, x, out, 3)
    mid = ratio * cin
    e = b.conv(f"{p}.expand", x, mid, 1, group=p)
    f = b.conv(f"{p}.fea", e, mid, 3, pad_fill=e, group=p)
    s = b.add(f"{p}.fea_sum", f, e, group=p)
    if out != cin:
        return b.conv(p, s, out, 1, group=p)
    r = b.conv(f"{p}.reduce", s, out, 1, group=p)
    return b.add(p, r, x, group=p)


def erb(b: GraphBuilder, p: str, x: str, ratio: int = 2, deploy: bool = False) -> str:
    """Enhanced residual block: RepBlock -> ReLU -> RepBlock."""
    h = repblock(b, f"{p}.rb1", x, ratio=ratio, deploy=deploy)
    h = b.act(f"{p}.act", h, "relu")
    return repblock(b, f"{p}.rb2", h, ratio=ratio, deploy=deploy)


def hfab(
    b: GraphBuilder,
    p: str,
    x: str,
    att_channels: int,
    n_erb: int = 1,
    ratio: int = 2,
    slope: float = 0.1,
    deploy: bool = False,
) -> str:
    """High-frequency attention block.

    3x3 squeeze (+BN) -> lrelu -> ERBs -> lrelu -> 3x3 excite (+BN) -> sigmoid,
    used to rescale ``x``.  BN appears only in the training form.
    """
    ch = b.channels[x]
    h = b.conv(f"{p}.squeeze", x, att_channels, 3)
    if not deploy:
        h = b.bn(f"{p}.squeeze_bn", h)
    h = b.act(f"{p}.squeeze_act", h, "leaky_relu", slope)
    for i in range(n_erb):
        h = erb(b, f"{p}.erb{i + 1}", h, ratio=ratio, deploy=deploy)
    h = b.act(f"{p}.erb_act", h, "leaky_relu", slope)
    h = b.conv(f"{p}.excite", h, ch, 3)
    if not deploy:
        h = b.bn(f"{p}.excite_bn", h)
    m = b.act(f"{p}.gate", h, "sigmoid")
    return b.mul(p, m, x)


def ecb(
    b: GraphBuilder,
    p: str,
    x: str,
    out: int | None = None,
    depth_multiplier: int = 2,
    with_identity: bool = True,
    asymmetric: bool = False,
    deploy: bool = False,
) -> str:
    """Edge-oriented convolution block.

    Training form sums: 3x3 conv; 1x1 expand -> 3x3; 1x1 -> scaled Sobel-x,
    Sobel-y and Laplacian depthwise filters; identity (when shapes allow);
    optionally 1x3 and 3x1 convs (``asymmetric``).
    """
    cin = b.channels[x]
    out = out or cin
    if deploy:
        return b.conv(p, x, out, 3)
    branches = [b.conv(f"{p}.k3", x, out, 3, group=p)]
    mid = out * depth_multiplier
    e = b.conv(f"{p}.es_expand", x, mid, 1, group=p)
    branches.append(b.conv(f"{p}.es_squeeze", e, out, 3, pad_fill=e, group=p))
    for kern in ("sobel_x", "sobel_y", "laplacian"):
        s = b.conv(f"{p}.{kern}_1x1", x, out, 1, group=p)
        branches.append(b.conv(f"{p}.{kern}", s, out, 3, groups=out, fixed=kern, pad_fill=s, group=p))
    if asymmetric:
        branches.append(b.conv(f"{p}.k1x3", x, out, kh=1, kw=3, group=p))
        branches.append(b.conv(f"{p}.k3x1", x, out, kh=3, kw=1, group=p))
    if with_identity and cin == out:
        branches.append(x)
    return b.add(p, *branches, group=p)


def reconv3(b: GraphBuilder, p: str, x: str, deploy: bool = False) -> str:
    """input + conv3(input) + conv3(conv1(input)), collapsible to one 3x3 conv."""
    ch = b.channels[x]
    if deploy:
        return b.conv(p, x, ch, 3)
    k3 = b.conv(f"{p}.k3", x, ch, 3, group=p)
    e = b.conv(f"{p}.k1", x, ch, 1, group=p)
    s = b.conv(f"{p}.k1k3", e, ch, 3, pad_fill=e, group=p)
    return b.add(p, x, k3, s, group=p)


def pixel_attention(b: GraphBuilder, p: str, x: str) -> str:
    """``x * sigmoid(conv1x1(x))``."""
    m = b.act(f"{p}.gate", b.conv(f"{p}.conv", x, b.channels[x], 1), "sigmoid")
    return b.mul(p, x, m)


def channel_weighting(b: GraphBuilder, p: str, x: str) -> str:
    """Learnable per-channel scale (a 1x1xC weight)."""
    return b.scale_channels(p, x)


def bsconv(b: GraphBuilder, p: str, x: str, out: int, k: int = 3) -> str:
    """Blueprint separable conv: bias-free 1x1 pointwise then depthwise ``k x k``."""
    pw = b.conv(f"{p}.pw", x, out, 1, bias=False)
    return b.conv(p, pw, out, k, groups=out)


def esdb_block(b: GraphBuilder, p: str, x: str, esa_channels: int | None = None) -> str:
    """Efficient separable distillation block with channel weighting and residual."""
    ch = b.channels[x]
    dc = ch // 2
    cur = x
    kept = []
    for i in (1, 2, 3):
        kept.append(b.act(f"{p}.c{i}_d_act", b.conv(f"{p}.c{i}_d", cur, dc, 1), "gelu"))
        r = bsconv(b, f"{p}.c{i}_r", cur, ch)
        cur = b.act(f"{p}.c{i}_r_act", b.add(f"{p}.c{i}_r_sum", r, cur), "gelu")
    r4 = b.act(f"{p}.c4_act", bsconv(b, f"{p}.c4", cur, dc), "gelu")
    fused = b.conv(f"{p}.c5", b.concat(f"{p}.cat", *kept, r4), ch, 1)

    def sep(name, src, out):
        return bsconv(b, name, src, out)

    att = esa(b, f"{p}.esa", fused, esa_channels or ch // 4, conv3=sep)
    cw = channel_weighting(b, f"{p}.cw", att)
    return b.add(p, cw, x)


# Builders


def build_imdn(channels: int = 64, blocks: int = 8, distill: int = 16, slope: float = 0.05, scale: int = 4) -> ArchSpec:
    if not 0 < distill < channels:
        raise ValueError("distill must be in (0, channels)")
    b = GraphBuilder(3, scale, "imdn")
    head = b.conv("head", INPUT, channels, 3)
    h = head
    for i in range(blocks):
        h = imdb(b, f"b{i + 1}", h, channels, distill, slope)
    h = b.add("body", b.conv("body.conv", h, channels, 3), head)
    upsampler(b, h, 3, scale)
    return b.build()


def _distill_trunk(b: GraphBuilder, head: str, outs: list[str], channels: int, slope: float) -> str:
    fused = b.act("fuse_act", b.conv("fuse", b.concat("trunk_cat", *outs), channels, 1), "leaky_relu", slope)
    return b.add("body", b.conv("body.conv", fused, channels, 3), head)


def build_rfdn(
    channels: int = 50,
    blocks: int = 4,
    distill: int | None = 25,
    esa_channels: int | None = None,
    slope: float = 0.05,
    scale: int = 4,
) -> ArchSpec:
    b = GraphBuilder(3, scale, "rfdn")
    dc = distill if distill and distill < channels else channels // 2
    head = b.conv("head", INPUT, channels, 3)
    h, outs = head, []
    for i in range(blocks):
        h = rfdb(b, f"b{i + 1}", h, dc, esa_channels or max(channels // 4, 1), slope)
        outs.append(h)
    upsampler(b, _distill_trunk(b, head, outs, channels, slope), 3, scale)
    return b.build()


def build_rlfn(
    channels: int = 48,
    blocks: int = 4,
    esa_channels: int = 16,
    mid_channels: int | None = None,
    scale: int = 4,
) -> ArchSpec:
    b = GraphBuilder(3, scale, "rlfn")
    head = b.conv("head", INPUT, channels, 3)
    h = head
    for i in range(blocks):
        h = rlfb(b, f"b{i + 1}", h, mid_channels, esa_channels)
    h = b.add("body", b.conv("body.conv", h, channels, 3), head)
    upsampler(b, h, 3, scale)
    return b.build()


def build_fmen(
    pairs: int = 5,
    channels: int = 50,
    att_channels: int = 16,
    ratio: int = 2,
    deploy: bool = False,
    scale: int = 4,
) -> ArchSpec:
    """Fast and memory-efficient network.

    The first pair is a warm-up RepBlock followed by a narrower HFAB
    (``att_channels - 4``) holding two ERBs; the remaining pairs are
    ERB + HFAB(``att_channels``, one ERB).
    """
    b = GraphBuilder(3, scale, "fmen" if deploy else "fmen-train")
    head = b.conv("head", INPUT, channels, 3)
    h = repblock(b, "p1.warmup", head, ratio=ratio, deploy=deploy)
    h = hfab(b, "p1.hfab", h, max(att_channels - 4, 1), n_erb=2, ratio=ratio, deploy=deploy)
    for i in range(2, pairs + 1):
        h = erb(b, f"p{i}.erb", h, ratio=ratio, deploy=deploy)
        h = hfab(b, f"p{i}.hfab", h, att_channels, n_erb=1, ratio=ratio, deploy=deploy)
    h = b.add("body", b.conv("body.conv", h, channels, 3), head)
    upsampler(b, h, 3, scale)
    return b.build()


def build_bsrn(esdb: int = 5, channels: int = 48, scale: int = 4) -> ArchSpec:
    b = GraphBuilder(3, scale, "bsrn")
    rep = b.concat("replicate", INPUT, INPUT, INPUT, INPUT)
    head = bsconv(b, "head", rep, channels)
    h, outs = head, []
    for i in range(esdb):
        h = esdb_block(b, f"b{i + 1}", h)
        outs.append(h)
    fused = b.act("fuse_act", b.conv("fuse", b.concat("trunk_cat", *outs), channels, 1), "gelu")
    h = b.add("body", bsconv(b, "body.conv", fused, channels), head)
    upsampler(b, h, 3, scale)
    return b.build()


def build_efdn(
    channels: int = 42,
    blocks: int = 4,
    asymmetric: bool = False,
    deploy: bool = False,
    slope: float = 0.05,
    scale: int = 4,
) -> ArchSpec:
    """RFDN topology whose shallow residual blocks are edge-oriented conv blocks."""
    b = GraphBuilder(3, scale, "efdn" if deploy else "efdn-train")

    def refine(bb: GraphBuilder, name: str, src: str) -> str:
        return bb.act(f"{name}_act", ecb(bb, name, src, asymmetric=asymmetric, deploy=deploy), "leaky_relu", slope)

    head = b.conv("head", INPUT, channels, 3)
    h, outs = head, []
    for i in range(blocks):
        h = rfdb(b, f"b{i + 1}", h, channels // 2, max(channels // 4, 1), slope, refine=refine)
        outs.append(h)
    upsampler(b, _distill_trunk(b, head, outs, channels, slope), 3, scale)
    return b.build()


BUILDERS: dict[str, Callable[[], ArchSpec]] = {
    "imdn": build_imdn,
    "rfdn": build_rfdn,
    "rlfn": build_rlfn,
    "fmen": lambda: build_fmen(deploy=True),
    "fmen-train": build_fmen,
    "bsrn": build_bsrn,
    "efdn": lambda: build_efdn(deploy=True),
    "efdn-train": build_efdn,
    "rep-rfdn-train": lambda: build_efdn(channels=40, asymmetric=True),
}


def build(name: str) -> ArchSpec:
    try:
        return BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(BUILDERS)}") from None
