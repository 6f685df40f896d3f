"""Graph lowering onto the core operator set.

A fixed catalog of rewrite passes replaces rich operators (large-kernel and
1x1 convolutions, wide pools, layer normalization, embeddings, residual
adds, over-wide or grouped convolutions) with core-set equivalents, carrying
teacher weights where the rewrite has a weight-preserving form. Rewrites
keep the replaced node's output edge ids so downstream consumers and
feature-tap alignment survive untouched.

The pass pipeline runs in a fixed order and iterates to a fixpoint: a pass
may create work for an earlier pass (a residual merge can exceed the channel
limit), and a second legalization of the result is always a no-op.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ir import (
    Add, BatchNorm, Concat, Conv2D, Embedding, FakeQuant, FullyConnected,
    Graph, GraphError, LayerNorm, MaxPool, Node, OneHot, Permute, ReLU,
    Reshape, Split, TensorSpec, infer_node_specs, is_core, validate,
)

PASS_ORDER = (
    "conv_decompose",
    "conv1x1_pad",
    "maxpool",
    "ln_to_bn",
    "embedding_to_fc",
    "channel_split",
    "add_to_concat_conv",
)

_MAX_PIPELINE_ITERS = 12


class LegalizeError(Exception):
    def __init__(self, message: str, trace: "PassTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class UnsupportedKernel(LegalizeError):
    pass


class IndivisibleChannels(LegalizeError):
    pass


@dataclass
class LegalizeConfig:
    channel_limit: int = 512
    replace_residual_add: bool = True
    insert_bn_relu_between_decomposed_convs: bool = True
    pass_allowlist: list[str] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.channel_limit < 1:
            raise LegalizeError("channel_limit must be >= 1")
        if self.pass_allowlist is not None:
            bad = set(self.pass_allowlist) - set(PASS_ORDER)
            if bad:
                raise LegalizeError(f"unknown passes in allowlist: {sorted(bad)}")

    @classmethod
    def for_family(cls, family: str, **kwargs) -> "LegalizeConfig":
        """Family defaults: sequence models keep their residual adds."""
        if family == "transformer_like":
            kwargs.setdefault("replace_residual_add", False)
        return cls(**kwargs)


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------


@dataclass
class ParamOrigin:
    """How a rewritten parameter derives from its pre-rewrite ancestor."""

    kind: str  # copy | pad_center | identity_concat | slice | embedding_transpose
    #            | ln_affine | random | zeros | bn_stat
    source: str | None = None
    detail: dict = field(default_factory=dict)


@dataclass
class RewriteRecord:
    pass_name: str
    node_id: str
    new_nodes: list[str]
    exact: bool
    param_origins: dict[str, ParamOrigin] = field(default_factory=dict)


@dataclass
class PassTrace:
    records: list[RewriteRecord] = field(default_factory=list)

    def by_pass(self, pass_name: str) -> list[RewriteRecord]:
        return [r for r in self.records if r.pass_name == pass_name]

    def origins(self) -> dict[str, ParamOrigin]:
        out: dict[str, ParamOrigin] = {}
        for r in self.records:
            out.update(r.param_origins)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "records": [
                {
                    "pass": r.pass_name,
                    "node": r.node_id,
                    "new_nodes": r.new_nodes,
                    "exact": r.exact,
                    "param_origins": {
                        name: {"kind": o.kind, "source": o.source, "detail": o.detail}
                        for name, o in r.param_origins.items()
                    },
                }
                for r in self.records
            ]
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PassTrace":
        doc = json.loads(text)
        records = []
        for r in doc["records"]:
            records.append(RewriteRecord(
                pass_name=r["pass"],
                node_id=r["node"],
                new_nodes=list(r["new_nodes"]),
                exact=bool(r["exact"]),
                param_origins={
                    name: ParamOrigin(o["kind"], o.get("source"), dict(o.get("detail", {})))
                    for name, o in r.get("param_origins", {}).items()
                },
            ))
        return cls(records)


# --------------------------------------------------------------------------
# rewrite workspace
# --------------------------------------------------------------------------


class _Workspace:
    """Mutable copy of a graph during the pass pipeline."""

    def __init__(self, graph: Graph, config: LegalizeConfig):
        g = graph.copy()
        self.nodes = g.nodes
        self.edges = g.edges
        self.graph_inputs = g.graph_inputs
        self.graph_outputs = g.graph_outputs
        self.weights = g.weights
        self.config = config
        self.trace = PassTrace()

    def as_graph(self) -> Graph:
        return Graph(self.nodes, self.edges, self.graph_inputs,
                     self.graph_outputs, self.weights)

    def rng_for(self, name: str) -> np.random.Generator:
        # per-parameter stream: deterministic and independent of rewrite order
        return np.random.default_rng([self.config.seed, zlib.crc32(name.encode())])

    def he(self, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        rng = self.rng_for(name)
        return (rng.standard_normal(shape) * math.sqrt(2.0 / max(fan_in, 1))).astype(np.float32)

    def splice(self, pass_name: str, old: Node, new_nodes: list[Node],
               new_edges: dict[str, TensorSpec],
               param_origins: dict[str, ParamOrigin], exact: bool) -> None:
        """Replace `old` with `new_nodes`; the subgraph must reproduce the
        node's output edges and specs exactly."""
        produced = {e for n in new_nodes for e in n.outputs}
        if set(old.outputs) - produced:
            raise LegalizeError(f"pass {pass_name}: rewrite of {old.id} does not "
                                f"produce {old.outputs}", self.trace)
        # type-check the rewritten subgraph against the original specs
        specs = dict(self.edges)
        specs.update(new_edges)
        for n in new_nodes:
            try:
                outs = infer_node_specs(n, [specs[e] for e in n.inputs], self.weights)
            except (KeyError, GraphError) as exc:
                raise LegalizeError(f"pass {pass_name}: rewrite of {old.id} does not "
                                    f"type-check: {exc}", self.trace) from exc
            for e, s in zip(n.outputs, outs):
                declared = specs.get(e)
                if declared is not None and declared != s:
                    raise LegalizeError(
                        f"pass {pass_name}: rewrite of {old.id} changes spec of {e!r} "
                        f"from {declared.dims} to {s.dims}", self.trace)
                specs[e] = s
        idx = next(i for i, n in enumerate(self.nodes) if n is old)
        self.nodes[idx:idx + 1] = new_nodes
        self.edges.update(new_edges)
        for e, s in specs.items():
            if e in self.edges:
                self.edges[e] = s
        self.trace.records.append(RewriteRecord(
            pass_name=pass_name, node_id=old.id,
            new_nodes=[n.id for n in new_nodes],
            exact=exact, param_origins=param_origins))


def _even_sections(total: int, groups: int) -> list[int]:
    base, rem = divmod(total, groups)
    return [base + (1 if i < rem else 0) for i in range(groups)]


def _bn_params(ws: _Workspace, nid: str, channels: int,
               origins: dict[str, ParamOrigin]) -> dict[str, str]:
    names = {}
    for role, init, okind in (("gamma", np.ones, "random"), ("beta", np.zeros, "random"),
                              ("running_mean", np.zeros, "bn_stat"),
                              ("running_var", np.ones, "bn_stat")):
        pname = f"{nid}.{role}"
        ws.weights.add(pname, init(channels, dtype=np.float32))
        origins[pname] = ParamOrigin(okind if okind == "bn_stat" else
                                     ("zeros" if init is np.zeros else "ones"))
        names[role] = pname
    return names


# --------------------------------------------------------------------------
# passes
# --------------------------------------------------------------------------


def _pass_conv_decompose(ws: _Workspace, node: Node) -> bool:
    k = node.kind
    if not isinstance(k, Conv2D) or k.groups != 1:
        return False
    if k.kernel_h != k.kernel_w or (k.kernel_h, k.kernel_w) in ((1, 1), (3, 3)):
        return False
    kk = k.kernel_h
    if kk % 2 == 0 or kk > 7:
        raise UnsupportedKernel(f"node {node.id}: cannot decompose {kk}x{kk} convolution",
                                ws.trace)
    if k.stride not in (1, 2):
        raise UnsupportedKernel(f"node {node.id}: stride {k.stride} not supported",
                                ws.trace)
    n_convs = (kk - 1) // 2
    in_spec = ws.edges[node.inputs[0]]
    out_spec = ws.edges[node.outputs[0]]
    out_c = out_spec.dims[1]
    origins: dict[str, ParamOrigin] = {}
    new_nodes: list[Node] = []
    new_edges: dict[str, TensorSpec] = {}
    cur_edge = node.inputs[0]
    cur_c = in_spec.dims[1]
    with_bn = ws.config.insert_bn_relu_between_decomposed_convs
    for i in range(n_convs):
        last = i == n_convs - 1
        nid = f"{node.id}.dec{i}"
        wname = f"{nid}.weight"
        ws.weights.add(wname, ws.he(wname, (out_c, cur_c, 3, 3), cur_c * 9))
        origins[wname] = ParamOrigin("random")
        params = {"weight": wname}
        if last and "bias" in node.params:
            bname = f"{nid}.bias"
            ws.weights.add(bname, ws.weights[node.params["bias"]].copy())
            origins[bname] = ParamOrigin("copy", node.params["bias"])
            params["bias"] = bname
        out_edge = node.outputs[0] if last else f"{nid}~out"
        conv = Node(nid, Conv2D(3, 3, k.stride if last else 1, 1, 1),
                    [cur_edge], [out_edge], params, dict(node.attrs))
        new_nodes.append(conv)
        if not last:
            spatial = ws.edges[node.inputs[0]].dims[2:]
            new_edges[out_edge] = TensorSpec((in_spec.dims[0], out_c) + spatial,
                                             in_spec.roles)
            cur_edge, cur_c = out_edge, out_c
            if with_bn:
                bnid = f"{node.id}.dec{i}.bn"
                bn_names = _bn_params(ws, bnid, out_c, origins)
                bn_edge = f"{bnid}~out"
                new_nodes.append(Node(bnid, BatchNorm(), [cur_edge], [bn_edge], bn_names))
                new_edges[bn_edge] = new_edges[out_edge]
                rid = f"{node.id}.dec{i}.relu"
                relu_edge = f"{rid}~out"
                new_nodes.append(Node(rid, ReLU(), [bn_edge], [relu_edge]))
                new_edges[relu_edge] = new_edges[out_edge]
                cur_edge = relu_edge
    ws.splice("conv_decompose", node, new_nodes, new_edges, origins, exact=False)
    return True


def _pass_conv1x1_pad(ws: _Workspace, node: Node) -> bool:
    k = node.kind
    if not isinstance(k, Conv2D) or (k.kernel_h, k.kernel_w) != (1, 1) or k.groups != 1:
        return False
    old_w = ws.weights[node.params["weight"]]
    out_c, in_c = old_w.shape[0], old_w.shape[1]
    new_w = np.zeros((out_c, in_c, 3, 3), dtype=np.float32)
    new_w[:, :, 1, 1] = old_w[:, :, 0, 0]
    nid = f"{node.id}.pad3"
    wname = f"{nid}.weight"
    ws.weights.add(wname, new_w)
    origins = {wname: ParamOrigin("pad_center", node.params["weight"])}
    params = {"weight": wname}
    if "bias" in node.params:
        bname = f"{nid}.bias"
        ws.weights.add(bname, ws.weights[node.params["bias"]].copy())
        origins[bname] = ParamOrigin("copy", node.params["bias"])
        params["bias"] = bname
    conv = Node(nid, Conv2D(3, 3, k.stride, 1, 1), list(node.inputs),
                list(node.outputs), params, dict(node.attrs))
    ws.splice("conv1x1_pad", node, [conv], {}, origins, exact=True)
    return True


def _pass_maxpool(ws: _Workspace, node: Node) -> bool:
    k = node.kind
    if not isinstance(k, MaxPool) or (k.kernel, k.stride, k.padding) == (2, 2, 0):
        return False
    in_spec = ws.edges[node.inputs[0]]
    out_spec = ws.edges[node.outputs[0]]
    h, w = in_spec.dims[2], in_spec.dims[3]
    new_oh = (h - 2) // 2 + 1
    new_ow = (w - 2) // 2 + 1
    if (new_oh, new_ow) != out_spec.dims[2:]:
        raise LegalizeError(
            f"node {node.id}: 2x2/2 pooling would change {h}x{w} -> "
            f"{new_oh}x{new_ow}, original produced {out_spec.dims[2:]}", ws.trace)
    pool = Node(f"{node.id}.p2", MaxPool(2, 2, 0), list(node.inputs),
                list(node.outputs), {}, dict(node.attrs))
    ws.splice("maxpool", node, [pool], {}, {}, exact=False)
    return True


def _pass_ln_to_bn(ws: _Workspace, node: Node) -> bool:
    if not isinstance(node.kind, LayerNorm):
        return False
    in_spec = ws.edges[node.inputs[0]]
    if in_spec.rank != 3:
        raise LegalizeError(f"node {node.id}: layer-norm rewrite expects a "
                            f"[batch, sequence, feature] input, got {in_spec.dims}",
                            ws.trace)
    b, w, d = in_spec.dims
    base = node.id
    origins: dict[str, ParamOrigin] = {}

    perm1 = Node(f"{base}.perm_in", Permute((0, 2, 1)), [node.inputs[0]],
                 [f"{base}~p1"])
    rsh1 = Node(f"{base}.to4d", Reshape((-1, d, w, 1),
                                        ("batch", "channel", "sequence", "feature")),
                [f"{base}~p1"], [f"{base}~x4"])
    bnid = f"{base}.bn"
    bn_names = {}
    for role, src_role in (("gamma", "gamma"), ("beta", "beta")):
        pname = f"{bnid}.{role}"
        ws.weights.add(pname, ws.weights[node.params[src_role]].copy())
        origins[pname] = ParamOrigin("ln_affine", node.params[src_role])
        bn_names[role] = pname
    for role, init in (("running_mean", np.zeros), ("running_var", np.ones)):
        pname = f"{bnid}.{role}"
        ws.weights.add(pname, init(d, dtype=np.float32))
        origins[pname] = ParamOrigin("bn_stat")
        bn_names[role] = pname
    bn = Node(bnid, BatchNorm(), [f"{base}~x4"], [f"{base}~bn"], bn_names)
    fq = Node(f"{base}.fq", FakeQuant(32, "dorefa"), [f"{base}~bn"], [f"{base}~q"],
              {}, {"from_ln": 1, "signed": 1})
    rsh2 = Node(f"{base}.to3d", Reshape((-1, d, w), ("batch", "feature", "sequence")),
                [f"{base}~q"], [f"{base}~p2"])
    perm2 = Node(f"{base}.perm_out", Permute((0, 2, 1)), [f"{base}~p2"],
                 list(node.outputs))

    spec4 = TensorSpec((b, d, w, 1), ("batch", "channel", "sequence", "feature"))
    new_edges = {
        f"{base}~p1": TensorSpec((b, d, w), ("batch", "feature", "sequence")),
        f"{base}~x4": spec4,
        f"{base}~bn": spec4,
        f"{base}~q": spec4,
        f"{base}~p2": TensorSpec((b, d, w), ("batch", "feature", "sequence")),
    }
    ws.splice("ln_to_bn", node, [perm1, rsh1, bn, fq, rsh2, perm2],
              new_edges, origins, exact=False)
    return True


def _pass_embedding_to_fc(ws: _Workspace, node: Node) -> bool:
    k = node.kind
    if not isinstance(k, Embedding):
        return False
    table = ws.weights[node.params["table"]]
    base = node.id
    onehot = Node(f"{base}.onehot", OneHot(k.vocab_size), list(node.inputs),
                  [f"{base}~oh"])
    wname = f"{base}.fc.weight"
    ws.weights.add(wname, np.ascontiguousarray(table.T))
    origins = {wname: ParamOrigin("embedding_transpose", node.params["table"])}
    fc = Node(f"{base}.fc", FullyConnected(), [f"{base}~oh"], list(node.outputs),
              {"weight": wname}, dict(node.attrs))
    in_spec = ws.edges[node.inputs[0]]
    new_edges = {f"{base}~oh": TensorSpec(in_spec.dims + (k.vocab_size,),
                                          in_spec.roles + ("vocab",))}
    ws.splice("embedding_to_fc", node, [onehot, fc], new_edges, origins, exact=True)
    return True


def _pass_channel_split(ws: _Workspace, node: Node) -> bool:
    k = node.kind
    if not isinstance(k, Conv2D):
        return False
    in_spec = ws.edges[node.inputs[0]]
    in_c = in_spec.dims[1]
    unroll = k.groups > 1
    if not unroll and in_c <= ws.config.channel_limit:
        return False
    out_spec = ws.edges[node.outputs[0]]
    out_c = out_spec.dims[1]
    g = k.groups if unroll else math.ceil(in_c / ws.config.channel_limit)
    if out_c < g:
        raise IndivisibleChannels(
            f"node {node.id}: cannot split {out_c} output channels into {g} groups",
            ws.trace)
    in_secs = _even_sections(in_c, g)
    out_secs = _even_sections(out_c, g)
    w = ws.weights[node.params["weight"]]
    bias = ws.weights[node.params["bias"]] if "bias" in node.params else None
    base = node.id
    origins: dict[str, ParamOrigin] = {}

    split = Node(f"{base}.split", Split(1, tuple(in_secs)), list(node.inputs),
                 [f"{base}~in{i}" for i in range(g)])
    new_edges: dict[str, TensorSpec] = {}
    for i, sec in enumerate(in_secs):
        dims = list(in_spec.dims)
        dims[1] = sec
        new_edges[f"{base}~in{i}"] = TensorSpec(tuple(dims), in_spec.roles)

    branches: list[Node] = []
    in_off = out_off = 0
    for i in range(g):
        nid = f"{base}.b{i}"
        wname = f"{nid}.weight"
        if unroll:
            # the stored grouped kernel is already dense per group
            wslice = w[out_off:out_off + out_secs[i]].copy()
            origins[wname] = ParamOrigin("slice", node.params["weight"],
                                         {"out": [out_off, out_off + out_secs[i]]})
        else:
            wslice = w[out_off:out_off + out_secs[i],
                       in_off:in_off + in_secs[i]].copy()
            origins[wname] = ParamOrigin("slice", node.params["weight"],
                                         {"out": [out_off, out_off + out_secs[i]],
                                          "in": [in_off, in_off + in_secs[i]]})
        ws.weights.add(wname, wslice)
        params = {"weight": wname}
        if bias is not None:
            bname = f"{nid}.bias"
            ws.weights.add(bname, bias[out_off:out_off + out_secs[i]].copy())
            origins[bname] = ParamOrigin("slice", node.params["bias"],
                                         {"out": [out_off, out_off + out_secs[i]]})
            params["bias"] = bname
        conv = Node(nid, Conv2D(k.kernel_h, k.kernel_w, k.stride, k.padding, 1),
                    [f"{base}~in{i}"], [f"{base}~out{i}"], params, dict(node.attrs))
        branches.append(conv)
        dims = list(out_spec.dims)
        dims[1] = out_secs[i]
        new_edges[f"{base}~out{i}"] = TensorSpec(tuple(dims), out_spec.roles)
        in_off += in_secs[i]
        out_off += out_secs[i]

    cat = Node(f"{base}.cat", Concat(1), [f"{base}~out{i}" for i in range(g)],
               list(node.outputs))
    ws.splice("channel_split", node, [split] + branches + [cat], new_edges,
              origins, exact=unroll)
    return True


def _pass_add_to_concat_conv(ws: _Workspace, node: Node) -> bool:
    if not isinstance(node.kind, Add) or not ws.config.replace_residual_add:
        return False
    in_spec = ws.edges[node.inputs[0]]
    if in_spec.rank != 4:
        return False  # sequence-model adds are kept (FC-heavy graphs)
    c = in_spec.dims[1]
    base = node.id
    cat = Node(f"{base}.cat", Concat(1), list(node.inputs), [f"{base}~cat"])
    wname = f"{base}.merge.weight"
    w = np.zeros((c, 2 * c, 3, 3), dtype=np.float32)
    idx = np.arange(c)
    w[idx, idx, 1, 1] = 1.0
    w[idx, c + idx, 1, 1] = 1.0
    ws.weights.add(wname, w)
    origins = {wname: ParamOrigin("identity_concat", None, {"channels": c})}
    conv = Node(f"{base}.merge", Conv2D(3, 3, 1, 1, 1), [f"{base}~cat"],
                [f"{base}~merged"], {"weight": wname})
    # trailing BN keeps the merge output in range once the identity kernel is
    # fake-quantized; gamma = sqrt(1 + eps) makes the eval-mode construct an
    # exact addition at initialisation
    bnid = f"{base}.merge_bn"
    bn_names = _bn_params(ws, bnid, c, origins)
    gname = bn_names["gamma"]
    ws.weights.add(gname, np.full(c, math.sqrt(1.0 + 1e-5), dtype=np.float32))
    origins[gname] = ParamOrigin("eps_ones")
    bn = Node(bnid, BatchNorm(), [f"{base}~merged"], list(node.outputs), bn_names)
    dims = list(in_spec.dims)
    dims[1] = 2 * c
    new_edges = {f"{base}~cat": TensorSpec(tuple(dims), in_spec.roles),
                 f"{base}~merged": in_spec}
    ws.splice("add_to_concat_conv", node, [cat, conv, bn], new_edges, origins,
              exact=True)
    return True


_PASSES = {
    "conv_decompose": _pass_conv_decompose,
    "conv1x1_pad": _pass_conv1x1_pad,
    "maxpool": _pass_maxpool,
    "ln_to_bn": _pass_ln_to_bn,
    "embedding_to_fc": _pass_embedding_to_fc,
    "channel_split": _pass_channel_split,
    "add_to_concat_conv": _pass_add_to_concat_conv,
}


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def _collect_garbage(ws: _Workspace) -> None:
    referenced = {name for n in ws.nodes for name in n.params.values()}
    for name in ws.weights.names():
        if name not in referenced:
            ws.weights.remove(name)


def legalize(graph: Graph, config: LegalizeConfig | None = None) -> tuple[Graph, PassTrace]:
    """Rewrite a validated graph into core-set form.

    Returns (graph, trace). Residual Add nodes survive only when
    `replace_residual_add` is false or the add is not a 4-D activation sum;
    any other non-core survivor is an error.
    """
    config = config or LegalizeConfig()
    report = validate(graph)
    if not report.ok:
        raise LegalizeError(f"input graph does not validate:\n{report}")
    ws = _Workspace(graph, config)
    allowed = config.pass_allowlist or list(PASS_ORDER)

    for _ in range(_MAX_PIPELINE_ITERS):
        changed = False
        for pass_name in PASS_ORDER:
            if pass_name not in allowed:
                continue
            fn = _PASSES[pass_name]
            for node in list(ws.nodes):
                if fn(ws, node):
                    changed = True
        if not changed:
            break
    else:
        raise LegalizeError("pass pipeline did not reach a fixpoint", ws.trace)

    _collect_garbage(ws)
    out = ws.as_graph()
    report = validate(out)
    if not report.ok:
        raise LegalizeError(f"legalized graph does not validate:\n{report}", ws.trace)
    if config.pass_allowlist is None:
        leftovers = [n for n in out.nodes if not is_core(n) and not isinstance(n.kind, Add)]
        if leftovers:
            raise LegalizeError(
                "non-core operators survived legalization: "
                + ", ".join(n.id for n in leftovers), ws.trace)
    return out, ws.trace


def attribution(source: Graph, result: Graph, trace: PassTrace) -> dict[str, str]:
    """Map every result node to its provenance: 'source' or the pass name.

    Raises if a node is neither from the source graph nor attributed to a
    trace record (trace completeness).
    """
    source_ids = {n.id for n in source.nodes}
    created: dict[str, str] = {}
    for r in trace.records:
        for nid in r.new_nodes:
            created[nid] = r.pass_name
    out: dict[str, str] = {}
    for n in result.nodes:
        if n.id in source_ids:
            out[n.id] = "source"
        elif n.id in created:
            out[n.id] = created[n.id]
        else:
            raise LegalizeError(f"node {n.id} has no provenance in the trace")
    return out
