"""Computation-graph data model: tensor specs, operator kinds, nodes, graphs.

A Graph is a topologically ordered list of typed operator nodes over named
edges. Parameter tensors live in a WeightStore and are referenced by name.
Graphs are treated as immutable after construction: rewrites produce new
Graph objects (weight arrays themselves are updated in place only by a
single training loop at a time).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Union

import numpy as np

ROLES = ("batch", "channel", "height", "width", "sequence", "feature", "vocab")


class GraphError(Exception):
    """Base error for graph construction and analysis."""


class ShapeMismatch(GraphError):
    """An operator's inputs are incompatible with its signature."""


@dataclass(frozen=True)
class TensorSpec:
    """Shape plus per-dimension role labels for one edge."""

    dims: tuple[int, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "roles", tuple(self.roles))
        if len(self.dims) != len(self.roles):
            raise GraphError(f"spec has {len(self.dims)} dims but {len(self.roles)} roles")
        if any(d < 1 for d in self.dims):
            raise GraphError(f"all dims must be >= 1, got {self.dims}")
        for r in self.roles:
            if r not in ROLES:
                raise GraphError(f"unknown dimension role {r!r}")

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)


def image_spec(b: int, c: int, h: int, w: int) -> TensorSpec:
    """Canonical 4-D activation layout."""
    return TensorSpec((b, c, h, w), ("batch", "channel", "height", "width"))


def seq_spec(b: int, w: int, d: int) -> TensorSpec:
    return TensorSpec((b, w, d), ("batch", "sequence", "feature"))


def token_spec(b: int, w: int) -> TensorSpec:
    return TensorSpec((b, w), ("batch", "sequence"))


def vec_spec(b: int, f: int) -> TensorSpec:
    return TensorSpec((b, f), ("batch", "feature"))


@dataclass
class Tensor:
    """A dense float32 array together with its spec."""

    spec: TensorSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != self.spec.dims:
            raise GraphError(f"data shape {self.data.shape} != spec dims {self.spec.dims}")
        if not np.all(np.isfinite(self.data)):
            raise GraphError("tensor contains non-finite values")

    @classmethod
    def from_array(cls, arr: np.ndarray, roles: Iterable[str]) -> "Tensor":
        return cls(TensorSpec(tuple(arr.shape), tuple(roles)), np.asarray(arr))


# --------------------------------------------------------------------------
# Operator kinds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise GraphError("conv kernel must be >= 1")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise GraphError("conv stride/padding/groups out of range")


@dataclass(frozen=True)
class FullyConnected:
    pass


@dataclass(frozen=True)
class BatchNorm:
    epsilon: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class LayerNorm:
    epsilon: float = 1e-5


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int
    padding: int = 0


@dataclass(frozen=True)
class AvgPoolGlobal:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Concat:
    axis: int


@dataclass(frozen=True)
class Add:
    pass


@dataclass(frozen=True)
class Split:
    """Inverse of channel Concat: slice one axis into contiguous sections."""

    axis: int
    sections: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(int(s) for s in self.sections))


@dataclass(frozen=True)
class Embedding:
    vocab_size: int
    dim: int


@dataclass(frozen=True)
class OneHot:
    vocab_size: int


@dataclass(frozen=True)
class Softmax:
    axis: int = -1


@dataclass(frozen=True)
class MatMul:
    pass


@dataclass(frozen=True)
class Permute:
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if sorted(self.order) != list(range(len(self.order))):
            raise GraphError(f"permute order {self.order} is not a permutation")


@dataclass(frozen=True)
class Reshape:
    """Reshape to target_dims; one entry may be -1 (inferred, used for batch)."""

    target_dims: tuple[int, ...]
    target_roles: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "target_dims", tuple(int(d) for d in self.target_dims))
        object.__setattr__(self, "target_roles", tuple(self.target_roles))
        if sum(1 for d in self.target_dims if d == -1) > 1:
            raise GraphError("reshape allows at most one -1 dim")


@dataclass(frozen=True)
class FakeQuant:
    bits: int
    scheme: str = "dorefa"

    def __post_init__(self):
        if self.bits < 1:
            raise GraphError("fake-quant bits must be >= 1")
        if self.scheme not in ("dorefa", "lsq"):
            raise GraphError(f"unknown quant scheme {self.scheme!r}")


OpKind = Union[
    Conv2D, FullyConnected, BatchNorm, LayerNorm, MaxPool, AvgPoolGlobal,
    ReLU, Concat, Add, Split, Embedding, OneHot, Softmax, MatMul,
    Permute, Reshape, FakeQuant,
]

KIND_CLASSES: dict[str, type] = {
    "conv2d": Conv2D,
    "fully_connected": FullyConnected,
    "batch_norm": BatchNorm,
    "layer_norm": LayerNorm,
    "max_pool": MaxPool,
    "avg_pool_global": AvgPoolGlobal,
    "relu": ReLU,
    "concat": Concat,
    "add": Add,
    "split": Split,
    "embedding": Embedding,
    "one_hot": OneHot,
    "softmax": Softmax,
    "matmul": MatMul,
    "permute": Permute,
    "reshape": Reshape,
    "fake_quant": FakeQuant,
}
KIND_NAMES = {cls: name for name, cls in KIND_CLASSES.items()}


def kind_name(kind: OpKind) -> str:
    return KIND_NAMES[type(kind)]


# (min inputs, max inputs or None, n outputs or None for Split)
_ARITY: dict[type, tuple[int, int | None, int | None]] = {
    Conv2D: (1, 1, 1), FullyConnected: (1, 1, 1), BatchNorm: (1, 1, 1),
    LayerNorm: (1, 1, 1), MaxPool: (1, 1, 1), AvgPoolGlobal: (1, 1, 1),
    ReLU: (1, 1, 1), Concat: (2, None, 1), Add: (2, 2, 1),
    Split: (1, 1, None), Embedding: (1, 1, 1), OneHot: (1, 1, 1),
    Softmax: (1, 1, 1), MatMul: (2, 2, 1), Permute: (1, 1, 1),
    Reshape: (1, 1, 1), FakeQuant: (1, 1, 1),
}


@dataclass
class Node:
    id: str
    kind: OpKind
    inputs: list[str]
    outputs: list[str]
    params: dict[str, str] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def arity_ok(self) -> bool:
        lo, hi, n_out = _ARITY[type(self.kind)]
        if len(self.inputs) < lo or (hi is not None and len(self.inputs) > hi):
            return False
        if n_out is None:
            n_out = len(self.kind.sections) if isinstance(self.kind, Split) else 1
        return len(self.outputs) == n_out


class WeightStore:
    """Named float32 parameter tensors; rejects non-finite values."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise GraphError(f"weight {name!r} contains non-finite values")
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def get(self, name: str) -> np.ndarray | None:
        return self._tensors.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def remove(self, name: str) -> None:
        del self._tensors[name]

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self._tensors.items()})


# Parameter roles updated by gradient descent; BN running stats are excluded.
TRAINABLE_ROLES = ("weight", "bias", "gamma", "beta", "table", "step", "w_step")


@dataclass
class Graph:
    nodes: list[Node]
    edges: dict[str, TensorSpec]
    graph_inputs: list[str]
    graph_outputs: list[str]
    weights: WeightStore

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer_map(self) -> dict[str, Node]:
        prod: dict[str, Node] = {}
        for n in self.nodes:
            for e in n.outputs:
                prod[e] = n
        return prod

    def consumer_map(self) -> dict[str, list[Node]]:
        cons: dict[str, list[Node]] = {e: [] for e in self.edges}
        for n in self.nodes:
            for e in n.inputs:
                cons.setdefault(e, []).append(n)
        return cons

    def param_names(self) -> list[str]:
        names: list[str] = []
        for n in self.nodes:
            names.extend(n.params.values())
        return names

    def trainable_params(self) -> dict[str, np.ndarray]:
        """Parameter arrays updated by training, keyed by store name."""
        out: dict[str, np.ndarray] = {}
        for n in self.nodes:
            for role, name in n.params.items():
                if role in TRAINABLE_ROLES and name in self.weights:
                    out[name] = self.weights[name]
        return out

    def copy(self) -> "Graph":
        return Graph(
            nodes=[replace(n, inputs=list(n.inputs), outputs=list(n.outputs),
                           params=dict(n.params), attrs=dict(n.attrs)) for n in self.nodes],
            edges=dict(self.edges),
            graph_inputs=list(self.graph_inputs),
            graph_outputs=list(self.graph_outputs),
            weights=self.weights.copy(),
        )


# --------------------------------------------------------------------------
# Core operator subset
# --------------------------------------------------------------------------

_CORE_GLUE = (FullyConnected, BatchNorm, Concat, ReLU, AvgPoolGlobal,
              Permute, Reshape, OneHot, Softmax, MatMul, FakeQuant, Split)


def is_core(node: Node) -> bool:
    """Membership in the hardware core operator subset.

    Conv2D qualifies only as dense 3x3 stride 1/2 pad 1; MaxPool only as
    2x2 stride 2. Split is admitted alongside Concat as its glue inverse.
    """
    k = node.kind
    if isinstance(k, Conv2D):
        return (k.kernel_h, k.kernel_w) == (3, 3) and k.stride in (1, 2) \
            and k.padding == 1 and k.groups == 1
    if isinstance(k, MaxPool):
        return (k.kernel, k.stride, k.padding) == (2, 2, 0)
    return isinstance(k, _CORE_GLUE)


def non_core_nodes(graph: Graph) -> list[Node]:
    return [n for n in graph.nodes if not is_core(n)]


# --------------------------------------------------------------------------
# Shape inference
# --------------------------------------------------------------------------


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _param_shape(graph_weights: WeightStore, node: Node, role: str) -> tuple[int, ...]:
    name = node.params.get(role)
    if name is None or name not in graph_weights:
        raise ShapeMismatch(f"node {node.id}: missing param {role!r}")
    return graph_weights[name].shape


def infer_node_specs(node: Node, in_specs: list[TensorSpec],
                     weights: WeightStore) -> list[TensorSpec]:
    """Output specs of one node given its input specs. Raises ShapeMismatch."""
    k = node.kind

    if isinstance(k, Conv2D):
        (spec,) = in_specs
        if spec.rank != 4:
            raise ShapeMismatch(f"node {node.id}: conv needs a 4-D input, got {spec.dims}")
        b, c, h, w = spec.dims
        wshape = _param_shape(weights, node, "weight")
        if len(wshape) != 4 or wshape[2:] != (k.kernel_h, k.kernel_w):
            raise ShapeMismatch(f"node {node.id}: weight shape {wshape} does not match kernel")
        out_c, in_per_group = wshape[0], wshape[1]
        if c % k.groups or out_c % k.groups or in_per_group != c // k.groups:
            raise ShapeMismatch(f"node {node.id}: groups={k.groups} incompatible with "
                                f"in={c}, weight={wshape}")
        oh = conv_out_size(h, k.kernel_h, k.stride, k.padding)
        ow = conv_out_size(w, k.kernel_w, k.stride, k.padding)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"node {node.id}: empty conv output")
        return [TensorSpec((b, out_c, oh, ow), spec.roles)]

    if isinstance(k, FullyConnected):
        (spec,) = in_specs
        wshape = _param_shape(weights, node, "weight")
        if len(wshape) != 2 or wshape[1] != spec.dims[-1]:
            raise ShapeMismatch(f"node {node.id}: fc weight {wshape} vs input {spec.dims}")
        dims = spec.dims[:-1] + (wshape[0],)
        roles = spec.roles[:-1] + ("feature",)
        return [TensorSpec(dims, roles)]

    if isinstance(k, (BatchNorm,)):
        (spec,) = in_specs
        if spec.rank not in (2, 4):
            raise ShapeMismatch(f"node {node.id}: batch norm needs 2-D or 4-D input")
        c = spec.dims[1]
        if _param_shape(weights, node, "gamma") != (c,):
            raise ShapeMismatch(f"node {node.id}: gamma does not match {c} channels")
        return [spec]

    if isinstance(k, LayerNorm):
        (spec,) = in_specs
        if _param_shape(weights, node, "gamma") != (spec.dims[-1],):
            raise ShapeMismatch(f"node {node.id}: gamma does not match last dim")
        return [spec]

    if isinstance(k, MaxPool):
        (spec,) = in_specs
        if spec.rank != 4:
            raise ShapeMismatch(f"node {node.id}: pool needs a 4-D input")
        b, c, h, w = spec.dims
        oh = conv_out_size(h, k.kernel, k.stride, k.padding)
        ow = conv_out_size(w, k.kernel, k.stride, k.padding)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"node {node.id}: empty pool output")
        return [TensorSpec((b, c, oh, ow), spec.roles)]

    if isinstance(k, AvgPoolGlobal):
        (spec,) = in_specs
        if spec.rank != 4:
            raise ShapeMismatch(f"node {node.id}: global pool needs a 4-D input")
        return [TensorSpec(spec.dims[:2], spec.roles[:2])]

    if isinstance(k, (ReLU, FakeQuant)):
        return [in_specs[0]]

    if isinstance(k, Softmax):
        (spec,) = in_specs
        spec_axis = k.axis % spec.rank
        if spec_axis >= spec.rank:
            raise ShapeMismatch(f"node {node.id}: softmax axis out of range")
        return [spec]

    if isinstance(k, Concat):
        axis = k.axis % in_specs[0].rank
        base = in_specs[0]
        total = 0
        for s in in_specs:
            if s.rank != base.rank or s.roles != base.roles:
                raise ShapeMismatch(f"node {node.id}: concat role/rank mismatch")
            for d in range(base.rank):
                if d != axis and s.dims[d] != base.dims[d]:
                    raise ShapeMismatch(f"node {node.id}: concat non-axis dims differ")
            total += s.dims[axis]
        dims = list(base.dims)
        dims[axis] = total
        return [TensorSpec(tuple(dims), base.roles)]

    if isinstance(k, Add):
        a, b = in_specs
        if a.dims != b.dims:
            raise ShapeMismatch(f"node {node.id}: add inputs {a.dims} vs {b.dims}")
        return [a]

    if isinstance(k, Split):
        (spec,) = in_specs
        axis = k.axis % spec.rank
        if sum(k.sections) != spec.dims[axis]:
            raise ShapeMismatch(f"node {node.id}: split sections {k.sections} do not "
                                f"sum to dim {spec.dims[axis]}")
        out = []
        for s in k.sections:
            dims = list(spec.dims)
            dims[axis] = s
            out.append(TensorSpec(tuple(dims), spec.roles))
        return out

    if isinstance(k, Embedding):
        (spec,) = in_specs
        if spec.rank != 2:
            raise ShapeMismatch(f"node {node.id}: embedding input must be [batch, sequence]")
        if _param_shape(weights, node, "table") != (k.vocab_size, k.dim):
            raise ShapeMismatch(f"node {node.id}: embedding table shape mismatch")
        return [TensorSpec(spec.dims + (k.dim,), spec.roles + ("feature",))]

    if isinstance(k, OneHot):
        (spec,) = in_specs
        return [TensorSpec(spec.dims + (k.vocab_size,), spec.roles + ("vocab",))]

    if isinstance(k, MatMul):
        a, b = in_specs
        if a.rank < 2 or b.rank != a.rank or a.dims[:-2] != b.dims[:-2]:
            raise ShapeMismatch(f"node {node.id}: matmul leading dims differ")
        if a.dims[-1] != b.dims[-2]:
            raise ShapeMismatch(f"node {node.id}: matmul inner dims {a.dims} x {b.dims}")
        dims = a.dims[:-1] + (b.dims[-1],)
        roles = a.roles[:-1] + (b.roles[-1],)
        return [TensorSpec(dims, roles)]

    if isinstance(k, Permute):
        (spec,) = in_specs
        if len(k.order) != spec.rank:
            raise ShapeMismatch(f"node {node.id}: permute order rank mismatch")
        dims = tuple(spec.dims[i] for i in k.order)
        roles = tuple(spec.roles[i] for i in k.order)
        return [TensorSpec(dims, roles)]

    if isinstance(k, Reshape):
        (spec,) = in_specs
        dims = list(k.target_dims)
        if -1 in dims:
            rest = math.prod(d for d in dims if d != -1)
            if rest == 0 or spec.size % rest:
                raise ShapeMismatch(f"node {node.id}: cannot infer -1 in reshape")
            dims[dims.index(-1)] = spec.size // rest
        if math.prod(dims) != spec.size:
            raise ShapeMismatch(f"node {node.id}: reshape size {dims} vs {spec.dims}")
        if k.target_roles:
            roles = k.target_roles
            if len(roles) != len(dims):
                raise ShapeMismatch(f"node {node.id}: reshape roles rank mismatch")
        elif len(dims) == spec.rank:
            roles = spec.roles
        else:
            roles = ("batch",) + ("feature",) * (len(dims) - 1)
        return [TensorSpec(tuple(dims), roles)]

    raise ShapeMismatch(f"node {node.id}: unhandled kind {kind_name(k)}")


def infer_shapes(graph: Graph) -> dict[str, TensorSpec]:
    """Walk nodes in order and infer a spec for every edge.

    Deterministic and independent of declared edge specs except at graph
    inputs, which seed the walk.
    """
    specs: dict[str, TensorSpec] = {}
    for e in graph.graph_inputs:
        if e not in graph.edges:
            raise ShapeMismatch(f"graph input {e!r} has no declared spec")
        specs[e] = graph.edges[e]
    for node in graph.nodes:
        try:
            in_specs = [specs[e] for e in node.inputs]
        except KeyError as exc:
            raise ShapeMismatch(f"node {node.id}: input edge {exc} not yet produced") from exc
        out_specs = infer_node_specs(node, in_specs, graph.weights)
        for e, s in zip(node.outputs, out_specs):
            specs[e] = s
    return specs


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass
class Issue:
    kind: str
    where: str
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, kind: str, where: str, message: str) -> None:
        self.issues.append(Issue(kind, where, message))

    def __str__(self) -> str:
        if self.ok:
            return "graph OK"
        return "\n".join(f"[{i.kind}] {i.where}: {i.message}" for i in self.issues)


def validate(graph: Graph) -> ValidationReport:
    """Structural validation; issues are data, never exceptions."""
    report = ValidationReport()

    seen_nodes: set[str] = set()
    for n in graph.nodes:
        if n.id in seen_nodes:
            report.add("duplicate-node", n.id, "node id is not unique")
        seen_nodes.add(n.id)

    produced: dict[str, str] = {}
    for e in graph.graph_inputs:
        produced[e] = "<graph input>"
    for n in graph.nodes:
        for e in n.outputs:
            if e in produced:
                report.add("multi-producer", e, f"edge produced by both {produced[e]} and {n.id}")
            produced[e] = n.id

    # topological order / acyclicity: every input must already be produced
    available = set(graph.graph_inputs)
    for n in graph.nodes:
        for e in n.inputs:
            if e not in available:
                if e in produced:
                    report.add("topo-order", n.id, f"edge {e!r} used before it is produced")
                else:
                    report.add("dangling-edge", n.id, f"input edge {e!r} has no producer")
        available.update(n.outputs)

    for e in graph.graph_outputs:
        if e not in produced:
            report.add("dangling-edge", e, "graph output has no producer")

    for n in graph.nodes:
        if not n.arity_ok():
            report.add("arity", n.id,
                       f"{kind_name(n.kind)} got {len(n.inputs)} inputs / {len(n.outputs)} outputs")
        for role, name in n.params.items():
            if name not in graph.weights:
                report.add("missing-param", n.id, f"param {role!r} -> {name!r} not in store")

    referenced = set(graph.param_names())
    for name in graph.weights.names():
        if name not in referenced:
            report.add("orphan-weight", name, "weight is not referenced by any node")

    for e in list(graph.edges) + graph.graph_inputs + graph.graph_outputs:
        if e not in graph.edges:
            report.add("missing-spec", e, "edge has no declared spec")

    if any(i.kind in ("topo-order", "dangling-edge", "multi-producer", "missing-param",
                      "duplicate-node", "arity") for i in report.issues):
        return report  # shape walk would be meaningless

    try:
        inferred = infer_shapes(graph)
    except (ShapeMismatch, ValueError) as exc:
        report.add("shape", "<graph>", str(exc))
        return report
    for e, spec in inferred.items():
        declared = graph.edges.get(e)
        if declared is None:
            report.add("missing-spec", e, "edge has no declared spec")
        elif declared != spec:
            report.add("shape", e, f"declared {declared.dims} but inferred {spec.dims}")
    return report


# --------------------------------------------------------------------------
# Builder
# --------------------------------------------------------------------------


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / max(fan_in, 1))).astype(np.float32)


class GraphBuilder:
    """Incremental graph construction with eager shape inference.

    Every helper returns the new output edge id. Weights are created in the
    builder's store with deterministic He/default initialisation.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.edges: dict[str, TensorSpec] = {}
        self.graph_inputs: list[str] = []
        self.weights = WeightStore()
        self._counter = 0

    # -- plumbing -----------------------------------------------------------

    def _name(self, base: str | None, op: str) -> str:
        if base is not None:
            return base
        self._counter += 1
        return f"{op}{self._counter}"

    def _emit(self, node_id: str, kind: OpKind, inputs: list[str],
              params: dict[str, str] | None = None, attrs: dict | None = None,
              n_out: int = 1) -> list[str]:
        outputs = [node_id] if n_out == 1 else [f"{node_id}:{i}" for i in range(n_out)]
        node = Node(id=node_id, kind=kind, inputs=list(inputs), outputs=outputs,
                    params=dict(params or {}), attrs=dict(attrs or {}))
        in_specs = [self.edges[e] for e in inputs]
        out_specs = infer_node_specs(node, in_specs, self.weights)
        self.nodes.append(node)
        for e, s in zip(node.outputs, out_specs):
            self.edges[e] = s
        return node.outputs

    def input(self, name: str, spec: TensorSpec) -> str:
        self.edges[name] = spec
        self.graph_inputs.append(name)
        return name

    # -- operators ----------------------------------------------------------

    def conv(self, x: str, out_channels: int, kernel: int = 3, stride: int = 1,
             padding: int | None = None, groups: int = 1, bias: bool = False,
             name: str | None = None) -> str:
        nid = self._name(name, "conv")
        in_c = self.edges[x].dims[1]
        if padding is None:
            padding = kernel // 2
        wshape = (out_channels, in_c // groups, kernel, kernel)
        fan_in = (in_c // groups) * kernel * kernel
        self.weights.add(f"{nid}.weight", he_init(self.rng, wshape, fan_in))
        params = {"weight": f"{nid}.weight"}
        if bias:
            self.weights.add(f"{nid}.bias", np.zeros(out_channels, dtype=np.float32))
            params["bias"] = f"{nid}.bias"
        return self._emit(nid, Conv2D(kernel, kernel, stride, padding, groups), [x], params)[0]

    def bn(self, x: str, name: str | None = None) -> str:
        nid = self._name(name, "bn")
        c = self.edges[x].dims[1]
        self.weights.add(f"{nid}.gamma", np.ones(c, dtype=np.float32))
        self.weights.add(f"{nid}.beta", np.zeros(c, dtype=np.float32))
        self.weights.add(f"{nid}.running_mean", np.zeros(c, dtype=np.float32))
        self.weights.add(f"{nid}.running_var", np.ones(c, dtype=np.float32))
        params = {"gamma": f"{nid}.gamma", "beta": f"{nid}.beta",
                  "running_mean": f"{nid}.running_mean", "running_var": f"{nid}.running_var"}
        return self._emit(nid, BatchNorm(), [x], params)[0]

    def ln(self, x: str, name: str | None = None) -> str:
        nid = self._name(name, "ln")
        d = self.edges[x].dims[-1]
        self.weights.add(f"{nid}.gamma", np.ones(d, dtype=np.float32))
        self.weights.add(f"{nid}.beta", np.zeros(d, dtype=np.float32))
        return self._emit(nid, LayerNorm(), [x],
                          {"gamma": f"{nid}.gamma", "beta": f"{nid}.beta"})[0]

    def relu(self, x: str, name: str | None = None) -> str:
        return self._emit(self._name(name, "relu"), ReLU(), [x])[0]

    def maxpool(self, x: str, kernel: int, stride: int, padding: int = 0,
                name: str | None = None) -> str:
        return self._emit(self._name(name, "pool"), MaxPool(kernel, stride, padding), [x])[0]

    def avgpool(self, x: str, name: str | None = None) -> str:
        return self._emit(self._name(name, "gap"), AvgPoolGlobal(), [x])[0]

    def fc(self, x: str, out_features: int, bias: bool = True,
           name: str | None = None, attrs: dict | None = None) -> str:
        nid = self._name(name, "fc")
        in_f = self.edges[x].dims[-1]
        self.weights.add(f"{nid}.weight", he_init(self.rng, (out_features, in_f), in_f))
        params = {"weight": f"{nid}.weight"}
        if bias:
            self.weights.add(f"{nid}.bias", np.zeros(out_features, dtype=np.float32))
            params["bias"] = f"{nid}.bias"
        return self._emit(nid, FullyConnected(), [x], params, attrs)[0]

    def concat(self, xs: list[str], axis: int, name: str | None = None) -> str:
        return self._emit(self._name(name, "cat"), Concat(axis), xs)[0]

    def add(self, a: str, b: str, name: str | None = None) -> str:
        return self._emit(self._name(name, "addop"), Add(), [a, b])[0]

    def split(self, x: str, sections: tuple[int, ...], axis: int,
              name: str | None = None) -> list[str]:
        nid = self._name(name, "splitop")
        return self._emit(nid, Split(axis, tuple(sections)), [x], n_out=len(sections))

    def embedding(self, x: str, vocab_size: int, dim: int, positional: bool = False,
                  name: str | None = None) -> str:
        nid = self._name(name, "embed")
        table = (self.rng.standard_normal((vocab_size, dim)) * 0.1).astype(np.float32)
        self.weights.add(f"{nid}.table", table)
        attrs = {"positional": 1} if positional else {}
        return self._emit(nid, Embedding(vocab_size, dim), [x],
                          {"table": f"{nid}.table"}, attrs)[0]

    def onehot(self, x: str, vocab_size: int, name: str | None = None) -> str:
        return self._emit(self._name(name, "onehot"), OneHot(vocab_size), [x])[0]

    def softmax(self, x: str, axis: int = -1, causal: bool = False,
                name: str | None = None) -> str:
        attrs = {"causal": 1} if causal else {}
        return self._emit(self._name(name, "smax"), Softmax(axis), [x], attrs=attrs)[0]

    def matmul(self, a: str, b: str, scale: float | None = None,
               name: str | None = None) -> str:
        attrs = {} if scale is None else {"scale": float(scale)}
        return self._emit(self._name(name, "mm"), MatMul(), [a, b], attrs=attrs)[0]

    def permute(self, x: str, order: tuple[int, ...], name: str | None = None) -> str:
        return self._emit(self._name(name, "perm"), Permute(tuple(order)), [x])[0]

    def reshape(self, x: str, dims: tuple[int, ...], roles: tuple[str, ...] = (),
                name: str | None = None) -> str:
        return self._emit(self._name(name, "rsh"), Reshape(tuple(dims), tuple(roles)), [x])[0]

    def fakequant(self, x: str, bits: int, scheme: str = "dorefa",
                  name: str | None = None, attrs: dict | None = None) -> str:
        return self._emit(self._name(name, "fq"), FakeQuant(bits, scheme), [x], attrs=attrs)[0]

    def graph(self, outputs: list[str]) -> Graph:
        g = Graph(nodes=self.nodes, edges=self.edges, graph_inputs=self.graph_inputs,
                  graph_outputs=list(outputs), weights=self.weights)
        return g
