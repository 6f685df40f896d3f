"""Per-chip constraint tables as data, graph conformance checking, and the
multiply-accumulate cost model.

Profiles are pure data (JSON): adding a chip means adding a file, either in
the packaged profile directory, the directory named by the
CORELOWER_PROFILE_DIR environment variable, or any explicit path.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

from .ir import (
    BatchNorm, Conv2D, Embedding, FakeQuant, FullyConnected, Graph,
    LayerNorm, MatMul, MaxPool, Node, TensorSpec,
)

LEVELS = ("unsupported", "weak", "ok", "strong", "unknown")


class ProfileError(Exception):
    pass


class UnknownProfile(ProfileError):
    pass


@dataclass
class ChipProfile:
    name: str
    op_support: dict[str, str]
    max_channels: int | None = None
    conv_kernel_whitelist: list[tuple[int, int, int]] = field(default_factory=list)
    min_bits: int = 8
    notes: str = ""

    def __post_init__(self):
        for key, level in self.op_support.items():
            if level not in LEVELS:
                raise ProfileError(f"profile {self.name}: bad level {level!r} for {key!r}")
        for core_op in ("conv3x3", "batch_norm", "fc"):
            if self.op_support.get(core_op) != "strong":
                raise ProfileError(
                    f"profile {self.name}: {core_op} must be level 'strong' "
                    "(universally supported core operator)")

    def level_for(self, patterns: list[str]) -> tuple[str, str]:
        """First matching pattern's level; ('unknown', last pattern) if none."""
        for p in patterns:
            if p in self.op_support:
                return self.op_support[p], p
        return "unknown", patterns[-1]


def _profile_from_doc(doc: dict) -> ChipProfile:
    return ChipProfile(
        name=doc["name"],
        op_support=dict(doc.get("op_support", {})),
        max_channels=doc.get("max_channels"),
        conv_kernel_whitelist=[tuple(w) for w in doc.get("conv_kernel_whitelist", [])],
        min_bits=int(doc.get("min_bits", 8)),
        notes=doc.get("notes", ""),
    )


def builtin_profile_names() -> list[str]:
    files = resources.files("corelower").joinpath("profiles_data")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_profile(name_or_path: str) -> ChipProfile:
    """Resolve a profile by file path, by name in CORELOWER_PROFILE_DIR, or
    by built-in name."""
    if os.path.isfile(name_or_path):
        with open(name_or_path, "r", encoding="utf-8") as f:
            return _profile_from_doc(json.load(f))
    env_dir = os.environ.get("CORELOWER_PROFILE_DIR")
    if env_dir:
        candidate = os.path.join(env_dir, name_or_path + ".json")
        if os.path.isfile(candidate):
            with open(candidate, "r", encoding="utf-8") as f:
                return _profile_from_doc(json.load(f))
    builtin = resources.files("corelower").joinpath("profiles_data", name_or_path + ".json")
    if builtin.is_file():
        return _profile_from_doc(json.loads(builtin.read_text(encoding="utf-8")))
    raise UnknownProfile(f"no profile named {name_or_path!r} "
                         f"(built-ins: {', '.join(builtin_profile_names())})")


# --------------------------------------------------------------------------
# conformance checking
# --------------------------------------------------------------------------


@dataclass
class Violation:
    node_id: str
    rule: str
    message: str
    severity: str = "violation"  # "violation" | "warning"

    @property
    def blocking(self) -> bool:
        return self.severity == "violation"

    def __str__(self) -> str:
        return f"[{self.severity}] {self.node_id}: {self.rule}: {self.message}"


# Ops that are free data movement / ubiquitous activation on every surveyed
# chip; they never appear as support-table columns.
_FREE_KINDS = ("relu", "concat", "split", "avg_pool_global", "softmax",
               "permute", "reshape", "one_hot", "fake_quant", "add", "matmul")


def _op_patterns(node: Node) -> list[str] | None:
    """Support-table lookup keys for one node, most specific first.

    Returns None for glue ops that are never checked.
    """
    k = node.kind
    if isinstance(k, Conv2D):
        if k.groups > 1:
            return ["depthwise_conv", "grouped_conv", "conv"]
        kh, kw, s = k.kernel_h, k.kernel_w, k.stride
        return [f"conv{kh}x{kw}s{s}", f"conv{kh}x{kw}", "conv"]
    if isinstance(k, BatchNorm):
        return ["batch_norm"]
    if isinstance(k, LayerNorm):
        return ["layer_norm"]
    if isinstance(k, FullyConnected):
        return ["fc"]
    if isinstance(k, Embedding):
        return ["embedding"]
    if isinstance(k, MaxPool):
        if (k.kernel, k.stride, k.padding) == (2, 2, 0):
            return None  # 2x2/2 pooling is the universally supported form
        return [f"max_pool{k.kernel}x{k.kernel}s{k.stride}", "max_pool"]
    return None


def check_profile(graph: Graph, profile: ChipProfile) -> list[Violation]:
    """One entry per (node, rule) breach. Blocking violations mean the graph
    is not deployable; 'unknown' support levels surface as warnings only."""
    out: list[Violation] = []
    for node in graph.nodes:
        patterns = _op_patterns(node)
        if patterns is None:
            pass
        else:
            level, pattern = profile.level_for(patterns)
            if level == "unsupported":
                out.append(Violation(node.id, "op-support",
                                     f"{pattern} unsupported on {profile.name}"))
            elif level == "unknown":
                out.append(Violation(node.id, "op-support",
                                     f"{pattern} support unknown on {profile.name}",
                                     severity="warning"))

        k = node.kind
        if isinstance(k, Conv2D):
            if profile.conv_kernel_whitelist and \
                    (k.kernel_h, k.kernel_w, k.stride) not in profile.conv_kernel_whitelist:
                out.append(Violation(
                    node.id, "kernel-whitelist",
                    f"conv {k.kernel_h}x{k.kernel_w} stride {k.stride} outside whitelist"))
            if profile.max_channels is not None:
                in_spec = graph.edges.get(node.inputs[0])
                out_spec = graph.edges.get(node.outputs[0])
                for what, spec in (("input", in_spec), ("output", out_spec)):
                    if spec is not None and len(spec.dims) == 4 \
                            and spec.dims[1] > profile.max_channels:
                        out.append(Violation(
                            node.id, "channels",
                            f"{what} channels {spec.dims[1]} exceed "
                            f"limit {profile.max_channels}"))

        bits: list[int] = []
        if isinstance(k, FakeQuant) and k.bits < 32:
            bits.append(k.bits)
        w_bits = int(node.attrs.get("w_bits", 32))
        if w_bits < 32:
            bits.append(w_bits)
        for b in bits:
            if b < profile.min_bits:
                out.append(Violation(node.id, "bits",
                                     f"{b}-bit quantization below chip minimum "
                                     f"{profile.min_bits}"))
    return out


def blocking_violations(violations: list[Violation]) -> list[Violation]:
    return [v for v in violations if v.blocking]


def deployable(graph: Graph, profile: ChipProfile) -> bool:
    return not blocking_violations(check_profile(graph, profile))


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------


@dataclass
class CostReport:
    per_node_macs: dict[str, int]
    per_node_params: dict[str, int]

    @property
    def total_macs(self) -> int:
        return sum(self.per_node_macs.values())

    @property
    def total_params(self) -> int:
        return sum(self.per_node_params.values())


def _per_sample_elems(spec: TensorSpec) -> int:
    n = 1
    for d, r in zip(spec.dims, spec.roles):
        if r != "batch":
            n *= d
    return n


def count_macs(graph: Graph) -> CostReport:
    """Multiply-accumulate count per sample.

    Conv: out_h*out_w*out_c*in_c*k_h*k_w/groups; FC and MatMul count their
    inner products; normalization, pooling, concat and element-wise ops
    count zero.
    """
    macs: dict[str, int] = {}
    params: dict[str, int] = {}
    from .ir import TRAINABLE_ROLES
    for node in graph.nodes:
        k = node.kind
        n = 0
        if isinstance(k, Conv2D):
            out_spec = graph.edges[node.outputs[0]]
            in_spec = graph.edges[node.inputs[0]]
            _, out_c, oh, ow = out_spec.dims
            in_c = in_spec.dims[1]
            n = oh * ow * out_c * (in_c // k.groups) * k.kernel_h * k.kernel_w
        elif isinstance(k, FullyConnected):
            out_spec = graph.edges[node.outputs[0]]
            in_f = graph.edges[node.inputs[0]].dims[-1]
            n = _per_sample_elems(out_spec) * in_f
        elif isinstance(k, MatMul):
            out_spec = graph.edges[node.outputs[0]]
            inner = graph.edges[node.inputs[0]].dims[-1]
            n = _per_sample_elems(out_spec) * inner
        macs[node.id] = n
        p = 0
        for role, name in node.params.items():
            if role in TRAINABLE_ROLES and name in graph.weights:
                p += int(math.prod(graph.weights[name].shape))
        params[node.id] = p
    return CostReport(per_node_macs=macs, per_node_params=params)
