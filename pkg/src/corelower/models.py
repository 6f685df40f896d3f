"""Graph builders: desk-scale trainable teachers and full-scale shape-only
skeletons for the cost model.

Full-scale skeletons carry random weights; only the tiny_* templates are
meant to be trained. Node ids follow conventions the stage planner relies
on: residual-network blocks expose an Add followed by a ReLU, sequence
models prefix node ids with "enc{i}/", "dec{i}/", "src_embed/", "tgt_embed/"
and name the output projection "proj".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .ir import Graph, GraphBuilder, image_spec, token_spec


class InvalidTemplate(Exception):
    pass


@dataclass
class ArchTemplate:
    name: str
    family: str  # resnet_like | mobilenet_like | transformer_like
    options: dict[str, Any] = field(default_factory=dict)


# --------------------------------------------------------------------------
# residual networks
# --------------------------------------------------------------------------


def _conv_bn_relu(gb: GraphBuilder, x: str, out_c: int, name: str, kernel: int = 3,
                  stride: int = 1, relu: bool = True) -> str:
    x = gb.conv(x, out_c, kernel=kernel, stride=stride, name=name)
    x = gb.bn(x, name=f"{name}_bn")
    if relu:
        x = gb.relu(x, name=f"{name}_relu")
    return x


def _basic_block(gb: GraphBuilder, x: str, out_c: int, stride: int, prefix: str) -> str:
    identity = x
    y = _conv_bn_relu(gb, x, out_c, f"{prefix}.conv1", stride=stride)
    y = gb.conv(y, out_c, name=f"{prefix}.conv2")
    y = gb.bn(y, name=f"{prefix}.conv2_bn")
    in_c = gb.edges[identity].dims[1]
    if stride != 1 or in_c != out_c:
        identity = gb.conv(identity, out_c, kernel=1, stride=stride, padding=0,
                           name=f"{prefix}.ds")
        identity = gb.bn(identity, name=f"{prefix}.ds_bn")
    y = gb.add(y, identity, name=f"{prefix}.add")
    return gb.relu(y, name=f"{prefix}.relu_out")


def _bottleneck_block(gb: GraphBuilder, x: str, width: int, stride: int,
                      prefix: str) -> str:
    identity = x
    out_c = width * 4
    y = _conv_bn_relu(gb, x, width, f"{prefix}.conv1", kernel=1)
    y = _conv_bn_relu(gb, y, width, f"{prefix}.conv2", stride=stride)
    y = gb.conv(y, out_c, kernel=1, padding=0, name=f"{prefix}.conv3")
    y = gb.bn(y, name=f"{prefix}.conv3_bn")
    in_c = gb.edges[identity].dims[1]
    if stride != 1 or in_c != out_c:
        identity = gb.conv(identity, out_c, kernel=1, stride=stride, padding=0,
                           name=f"{prefix}.ds")
        identity = gb.bn(identity, name=f"{prefix}.ds_bn")
    y = gb.add(y, identity, name=f"{prefix}.add")
    return gb.relu(y, name=f"{prefix}.relu_out")


def build_resnet(stage_blocks: tuple[int, ...], bottleneck: bool = False,
                 num_classes: int = 1000, input_size: int = 224, in_channels: int = 3,
                 base_width: int = 64, batch: int = 1, seed: int = 0,
                 stem_kernel: int = 7) -> Graph:
    gb = GraphBuilder(seed)
    x = gb.input("image", image_spec(batch, in_channels, input_size, input_size))
    x = gb.conv(x, base_width, kernel=stem_kernel, stride=2,
                padding=stem_kernel // 2, name="stem")
    x = gb.bn(x, name="stem_bn")
    x = gb.relu(x, name="stem_relu")
    x = gb.maxpool(x, 3, 2, 1, name="stem_pool")
    width = base_width
    for si, n_blocks in enumerate(stage_blocks):
        for bi in range(n_blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            prefix = f"s{si}b{bi}"
            if bottleneck:
                x = _bottleneck_block(gb, x, width, stride, prefix)
            else:
                x = _basic_block(gb, x, width, stride, prefix)
        width *= 2
    x = gb.avgpool(x, name="gap")
    x = gb.fc(x, num_classes, name="head")
    return gb.graph([x])


def build_tiny_resnet(num_classes: int = 10, input_size: int = 32,
                      in_channels: int = 1, base_width: int = 16, batch: int = 1,
                      seed: int = 0) -> Graph:
    """Three-block residual classifier small enough to train in seconds."""
    gb = GraphBuilder(seed)
    x = gb.input("image", image_spec(batch, in_channels, input_size, input_size))
    x = gb.conv(x, base_width, kernel=7, stride=2, padding=3, name="stem")
    x = gb.bn(x, name="stem_bn")
    x = gb.relu(x, name="stem_relu")
    x = gb.maxpool(x, 3, 2, 1, name="stem_pool")
    x = _basic_block(gb, x, base_width, 1, "s0b0")
    x = _basic_block(gb, x, base_width * 2, 2, "s1b0")
    x = _basic_block(gb, x, base_width * 2, 1, "s2b0")
    x = gb.avgpool(x, name="gap")
    x = gb.fc(x, num_classes, name="head")
    return gb.graph([x])


# --------------------------------------------------------------------------
# mobilenets
# --------------------------------------------------------------------------


def _dw_separable(gb: GraphBuilder, x: str, out_c: int, stride: int, prefix: str) -> str:
    in_c = gb.edges[x].dims[1]
    x = gb.conv(x, in_c, kernel=3, stride=stride, groups=in_c, name=f"{prefix}.dw")
    x = gb.bn(x, name=f"{prefix}.dw_bn")
    x = gb.relu(x, name=f"{prefix}.dw_relu")
    x = gb.conv(x, out_c, kernel=1, padding=0, name=f"{prefix}.pw")
    x = gb.bn(x, name=f"{prefix}.pw_bn")
    return gb.relu(x, name=f"{prefix}.pw_relu")


def build_mobilenet_v1(num_classes: int = 1000, input_size: int = 224,
                       in_channels: int = 3, batch: int = 1, seed: int = 0) -> Graph:
    gb = GraphBuilder(seed)
    x = gb.input("image", image_spec(batch, in_channels, input_size, input_size))
    x = _conv_bn_relu(gb, x, 32, "stem", stride=2)
    cfg = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
           (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]
    for i, (c, s) in enumerate(cfg):
        x = _dw_separable(gb, x, c, s, f"b{i}")
    x = gb.avgpool(x, name="gap")
    x = gb.fc(x, num_classes, name="head")
    return gb.graph([x])


def build_mobilenet_v2(num_classes: int = 1000, input_size: int = 224,
                       in_channels: int = 3, batch: int = 1, seed: int = 0) -> Graph:
    gb = GraphBuilder(seed)
    x = gb.input("image", image_spec(batch, in_channels, input_size, input_size))
    x = _conv_bn_relu(gb, x, 32, "stem", stride=2)
    # (expansion, out channels, repeats, first stride)
    cfg = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
           (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    bi = 0
    for t, c, n, s in cfg:
        for i in range(n):
            stride = s if i == 0 else 1
            prefix = f"b{bi}"
            bi += 1
            in_c = gb.edges[x].dims[1]
            exp = in_c * t
            y = x
            if t != 1:
                y = _conv_bn_relu(gb, y, exp, f"{prefix}.expand", kernel=1)
            y = gb.conv(y, exp, kernel=3, stride=stride, groups=exp, name=f"{prefix}.dw")
            y = gb.bn(y, name=f"{prefix}.dw_bn")
            y = gb.relu(y, name=f"{prefix}.dw_relu")
            y = gb.conv(y, c, kernel=1, padding=0, name=f"{prefix}.project")
            y = gb.bn(y, name=f"{prefix}.project_bn")
            if stride == 1 and in_c == c:
                y = gb.add(y, x, name=f"{prefix}.add")
            x = y
    x = _conv_bn_relu(gb, x, 1280, "tail", kernel=1)
    x = gb.avgpool(x, name="gap")
    x = gb.fc(x, num_classes, name="head")
    return gb.graph([x])


def build_tiny_mobilenet(num_classes: int = 10, input_size: int = 32,
                         in_channels: int = 1, batch: int = 1, seed: int = 0) -> Graph:
    gb = GraphBuilder(seed)
    x = gb.input("image", image_spec(batch, in_channels, input_size, input_size))
    x = _conv_bn_relu(gb, x, 16, "stem", stride=2)
    for i, (c, s) in enumerate([(32, 2), (32, 1), (64, 2)]):
        x = _dw_separable(gb, x, c, s, f"b{i}")
    x = gb.avgpool(x, name="gap")
    x = gb.fc(x, num_classes, name="head")
    return gb.graph([x])


# --------------------------------------------------------------------------
# transformer
# --------------------------------------------------------------------------


def _attention(gb: GraphBuilder, q_src: str, kv_src: str, heads: int, prefix: str,
               causal: bool = False) -> str:
    b, w, d = gb.edges[q_src].dims
    wk = gb.edges[kv_src].dims[1]
    dh = d // heads
    roles4 = ("batch", "sequence", "channel", "feature")

    def split_heads(x: str, length: int, tag: str) -> str:
        x = gb.reshape(x, (-1, length, heads, dh), roles4, name=f"{prefix}.{tag}_split")
        return gb.permute(x, (0, 2, 1, 3), name=f"{prefix}.{tag}_perm")

    q = split_heads(gb.fc(q_src, d, name=f"{prefix}.q"), w, "q")
    k = gb.fc(kv_src, d, name=f"{prefix}.k")
    k = gb.reshape(k, (-1, wk, heads, dh), roles4, name=f"{prefix}.k_split")
    k = gb.permute(k, (0, 2, 3, 1), name=f"{prefix}.k_perm")
    v = split_heads(gb.fc(kv_src, d, name=f"{prefix}.v"), wk, "v")

    scores = gb.matmul(q, k, scale=1.0 / math.sqrt(dh), name=f"{prefix}.scores")
    probs = gb.softmax(scores, axis=-1, causal=causal, name=f"{prefix}.attn")
    ctx = gb.matmul(probs, v, name=f"{prefix}.ctx")
    ctx = gb.permute(ctx, (0, 2, 1, 3), name=f"{prefix}.ctx_perm")
    ctx = gb.reshape(ctx, (-1, w, d), ("batch", "sequence", "feature"),
                     name=f"{prefix}.ctx_merge")
    return gb.fc(ctx, d, name=f"{prefix}.o")


def _ffn(gb: GraphBuilder, x: str, d: int, hidden: int, prefix: str) -> str:
    y = gb.fc(x, hidden, name=f"{prefix}.ffn1")
    y = gb.relu(y, name=f"{prefix}.ffn_relu")
    return gb.fc(y, d, name=f"{prefix}.ffn2")


def build_transformer(vocab: int = 32, seq_len: int = 8, d_model: int = 64,
                      heads: int = 4, ffn: int = 128, n_enc: int = 2, n_dec: int = 2,
                      batch: int = 1, seed: int = 0) -> Graph:
    """Post-norm encoder/decoder stack over fixed-length token sequences."""
    if d_model % heads:
        raise InvalidTemplate("d_model must be divisible by heads")
    gb = GraphBuilder(seed)
    src = gb.input("src", token_spec(batch, seq_len))
    tgt = gb.input("tgt", token_spec(batch, seq_len))

    x = gb.embedding(src, vocab, d_model, positional=True, name="src_embed/emb")
    for i in range(n_enc):
        p = f"enc{i}"
        a = _attention(gb, x, x, heads, f"{p}/self")
        x = gb.add(x, a, name=f"{p}/add1")
        x = gb.ln(x, name=f"{p}/ln1")
        f = _ffn(gb, x, d_model, ffn, f"{p}/ffn")
        x = gb.add(x, f, name=f"{p}/add2")
        x = gb.ln(x, name=f"{p}/ln2")
    memory = x

    y = gb.embedding(tgt, vocab, d_model, positional=True, name="tgt_embed/emb")
    for i in range(n_dec):
        p = f"dec{i}"
        a = _attention(gb, y, y, heads, f"{p}/self", causal=True)
        y = gb.add(y, a, name=f"{p}/add1")
        y = gb.ln(y, name=f"{p}/ln1")
        a = _attention(gb, y, memory, heads, f"{p}/cross")
        y = gb.add(y, a, name=f"{p}/add2")
        y = gb.ln(y, name=f"{p}/ln2")
        f = _ffn(gb, y, d_model, ffn, f"{p}/ffn")
        y = gb.add(y, f, name=f"{p}/add3")
        y = gb.ln(y, name=f"{p}/ln3")

    logits = gb.fc(y, vocab, name="proj")
    return gb.graph([logits])


# --------------------------------------------------------------------------
# template registry
# --------------------------------------------------------------------------


_BUILDERS: dict[str, tuple[str, Callable[..., Graph]]] = {
    "resnet18": ("resnet_like",
                 lambda **kw: build_resnet((2, 2, 2, 2), bottleneck=False, **kw)),
    "resnet34": ("resnet_like",
                 lambda **kw: build_resnet((3, 4, 6, 3), bottleneck=False, **kw)),
    "resnet50": ("resnet_like",
                 lambda **kw: build_resnet((3, 4, 6, 3), bottleneck=True, **kw)),
    "mobilenet_v1": ("mobilenet_like", build_mobilenet_v1),
    "mobilenet_v2": ("mobilenet_like", build_mobilenet_v2),
    "tiny_resnet": ("resnet_like", build_tiny_resnet),
    "tiny_mobilenet": ("mobilenet_like", build_tiny_mobilenet),
    "tiny_transformer": ("transformer_like", build_transformer),
}


def template_names() -> list[str]:
    return sorted(_BUILDERS)


def template(name: str, **options) -> ArchTemplate:
    if name not in _BUILDERS:
        raise InvalidTemplate(f"unknown template {name!r} "
                              f"(available: {', '.join(template_names())})")
    return ArchTemplate(name=name, family=_BUILDERS[name][0], options=dict(options))


def family_of(name: str) -> str:
    return template(name).family


def build(tmpl: ArchTemplate | str, **overrides) -> Graph:
    """Instantiate a template; keyword overrides win over template options."""
    if isinstance(tmpl, str):
        tmpl = template(tmpl)
    if tmpl.name not in _BUILDERS:
        raise InvalidTemplate(f"unknown template {tmpl.name!r}")
    options = dict(tmpl.options)
    options.update(overrides)
    try:
        return _BUILDERS[tmpl.name][1](**options)
    except TypeError as exc:
        raise InvalidTemplate(f"bad options for {tmpl.name!r}: {exc}") from exc
