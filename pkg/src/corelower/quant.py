"""Fake quantization: uniform k-bit rounding, tanh-normalised weight and
clipped-activation quantizers, and learned-step-size quantization.

All quantizers operate in float32 and are paired with straight-through
gradient rules consumed by the reference engine. The *_with_grad variants
return the forward value together with whatever the backward pass needs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np


class QuantError(Exception):
    pass


class DomainError(QuantError):
    """Input outside the quantizer's documented domain."""


_NOTATION = re.compile(r"^(\d+)W(\d+)A$")


@dataclass
class BitWidthConfig:
    """Weight/activation bit widths plus per-node overrides.

    Notation "kWmA" means weight_bits=k, act_bits=m. Bits >= 32 mean
    full precision (quantizer becomes the identity / is not attached).
    """

    weight_bits: int = 2
    act_bits: int = 4
    scheme: str = "dorefa"
    per_node_overrides: dict[str, tuple[int, int]] = field(default_factory=dict)
    first_last_full_precision: bool = True

    def __post_init__(self):
        if self.weight_bits < 1 or self.act_bits < 1:
            raise QuantError("bit widths must be >= 1")
        if self.scheme not in ("dorefa", "lsq"):
            raise QuantError(f"unknown scheme {self.scheme!r}")

    @classmethod
    def from_notation(cls, notation: str, **kwargs) -> "BitWidthConfig":
        m = _NOTATION.match(notation.strip())
        if not m:
            raise QuantError(f"bad bit-width notation {notation!r}, expected e.g. 2W4A")
        return cls(weight_bits=int(m.group(1)), act_bits=int(m.group(2)), **kwargs)

    @property
    def notation(self) -> str:
        return f"{self.weight_bits}W{self.act_bits}A"

    def bits_for(self, node_id: str) -> tuple[int, int]:
        return self.per_node_overrides.get(node_id, (self.weight_bits, self.act_bits))


# --------------------------------------------------------------------------
# DoReFa-style quantizers
# --------------------------------------------------------------------------


def quantize_k(x: np.ndarray | float, k: int) -> np.ndarray:
    """Uniform k-bit quantization of values in [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if k >= 32:
        return x
    slack = 1e-6
    if np.any(x < -slack) or np.any(x > 1 + slack):
        raise DomainError(f"quantize_k input outside [0,1]: range "
                          f"[{float(x.min())}, {float(x.max())}]")
    levels = float(2 ** k - 1)
    return (np.round(np.clip(x, 0.0, 1.0) * levels) / levels).astype(np.float32)


def dorefa_weight(w: np.ndarray, k: int) -> np.ndarray:
    return dorefa_weight_with_grad(w, k)[0]


def dorefa_weight_with_grad(w: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Tanh-normalised weight quantizer.

    w_q = 2 * quantize_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1

    Returns (w_q, dwq_dw) where the gradient is the straight-through
    derivative of the pre-rounding transform, with max|tanh(w)| treated
    as a constant. An all-zero tensor maps to zeros by convention.
    """
    if k < 2:
        raise QuantError("1-bit weight quantization is not supported")
    w = np.asarray(w, dtype=np.float32)
    t = np.tanh(w)
    m = float(np.max(np.abs(t)))
    if m == 0.0:
        # degenerate tensor: documented convention, zero output and zero grad
        return np.zeros_like(w), np.zeros_like(w)
    if k >= 32:
        wq = (t / m).astype(np.float32)
    else:
        wq = (2.0 * quantize_k(t / (2.0 * m) + 0.5, k) - 1.0).astype(np.float32)
    grad = ((1.0 - t * t) / m).astype(np.float32)
    return wq, grad


def dorefa_activation(x: np.ndarray, k: int) -> np.ndarray:
    return dorefa_activation_with_grad(x, k)[0]


def dorefa_activation_with_grad(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Clip to [0,1] then quantize; straight-through gradient inside (0,1)."""
    x = np.asarray(x, dtype=np.float32)
    clipped = np.clip(x, 0.0, 1.0)
    if k >= 32:
        y = clipped
    else:
        levels = float(2 ** k - 1)
        y = (np.round(clipped * levels) / levels).astype(np.float32)
    mask = ((x > 0.0) & (x < 1.0)).astype(np.float32)
    return y, mask


# --------------------------------------------------------------------------
# Learned step size quantization
# --------------------------------------------------------------------------


@dataclass
class LsqState:
    """Step size plus clip bounds for one quantized tensor.

    Signed tensors (weights, zero-mean activations) use
    [-2^(b-1), 2^(b-1)-1]; unsigned activations use [0, 2^b - 1].
    """

    step: float
    bits: int
    signed: bool = False

    def __post_init__(self):
        if self.step <= 0:
            raise QuantError("LSQ step size must stay positive")

    @property
    def qn(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qp(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1


def lsq_init_step(v: np.ndarray, bits: int, signed: bool) -> float:
    """Conventional initial step: 2 * mean|v| / sqrt(Qp)."""
    qp = (2 ** (bits - 1) - 1) if signed else (2 ** bits - 1)
    m = float(np.mean(np.abs(v)))
    s0 = 2.0 * m / math.sqrt(qp)
    return max(s0, 1e-6)


def lsq_quantize(v: np.ndarray, state: LsqState) -> np.ndarray:
    return lsq_quantize_with_grad(v, state)[0]


def lsq_quantize_with_grad(
    v: np.ndarray, state: LsqState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize v with step s: v_q = round(clip(v/s, Qn, Qp)) * s.

    Returns (v_q, dv_mask, ds_elem):
      dv_mask  -- straight-through gradient w.r.t. v (1 inside clip range)
      ds_elem  -- per-element gradient w.r.t. s, already multiplied by the
                  1/sqrt(numel * Qp) gradient scale
    """
    v = np.asarray(v, dtype=np.float32)
    s = float(state.step)
    qn, qp = state.qn, state.qp
    u = v / s
    inside = (u > qn) & (u < qp)
    clipped = np.clip(u, qn, qp)
    rounded = np.round(clipped)
    vq = (rounded * s).astype(np.float32)

    gscale = 1.0 / math.sqrt(v.size * qp)
    ds = np.where(inside, rounded - u, clipped).astype(np.float32) * gscale
    return vq, inside.astype(np.float32), ds


# --------------------------------------------------------------------------
# graph instrumentation
# --------------------------------------------------------------------------


def attach_fakequant(graph, config: BitWidthConfig):
    """Attach fake quantization to a legalized graph.

    Weight quantizers become `w_bits`/`w_scheme` attributes on Conv2D and
    FullyConnected nodes; activation quantizers are FakeQuant nodes inserted
    after every ReLU, and the placeholder quantizer inside each rewritten
    layer-norm construct is armed with the configured activation bits
    (signed, since batch-norm outputs are zero-mean). Bits >= 32 leave the
    graph untouched. With ``first_last_full_precision`` the first and last
    Conv2D/FullyConnected keep float weights.

    Returns a new Graph; the input is not modified.
    """
    from .ir import FakeQuant, Node, ReLU, validate

    g = graph.copy()
    convfc = [n for n in g.nodes if type(n.kind).__name__ in
              ("Conv2D", "FullyConnected")]
    skip_weight: set[str] = set()
    if config.first_last_full_precision and convfc:
        skip_weight.add(convfc[0].id)
        skip_weight.add(convfc[-1].id)

    for node in convfc:
        w_bits, _ = config.bits_for(node.id)
        if w_bits >= 32 or node.id in skip_weight:
            continue
        node.attrs["w_bits"] = int(w_bits)
        node.attrs["w_scheme"] = config.scheme
        if config.scheme == "lsq":
            sname = f"{node.id}.w_step"
            if sname not in g.weights:
                g.weights.add(sname, np.zeros(1, dtype=np.float32))  # calibrated lazily
            node.params["w_step"] = sname

    consumers = {}
    for n in g.nodes:
        for e in n.inputs:
            consumers.setdefault(e, []).append(n)

    new_nodes = []
    for node in g.nodes:
        new_nodes.append(node)
        if isinstance(node.kind, ReLU) and not node.attrs.get("quantized"):
            _, a_bits = config.bits_for(node.id)
            if a_bits >= 32:
                continue
            edge = node.outputs[0]
            fq_id = f"{node.id}.fq"
            fq_edge = f"{fq_id}~out"
            params = {}
            if config.scheme == "lsq":
                sname = f"{fq_id}.step"
                g.weights.add(sname, np.zeros(1, dtype=np.float32))
                params["step"] = sname
            fq = Node(fq_id, FakeQuant(int(a_bits), config.scheme), [edge], [fq_edge],
                      params, {"post_relu": 1})
            node.attrs["quantized"] = 1
            for consumer in consumers.get(edge, []):
                consumer.inputs = [fq_edge if e == edge else e for e in consumer.inputs]
            g.graph_outputs = [fq_edge if e == edge else e for e in g.graph_outputs]
            g.edges[fq_edge] = g.edges[edge]
            new_nodes.append(fq)
        elif isinstance(node.kind, FakeQuant) and node.attrs.get("from_ln"):
            _, a_bits = config.bits_for(node.id)
            if a_bits >= 32 or node.kind.bits < 32:
                continue
            node.kind = FakeQuant(int(a_bits), config.scheme)
            if config.scheme == "lsq":
                sname = f"{node.id}.step"
                if sname not in g.weights:
                    g.weights.add(sname, np.zeros(1, dtype=np.float32))
                node.params["step"] = sname

    g.nodes = new_nodes
    report = validate(g)
    if not report.ok:
        raise QuantError(f"fake-quant attachment broke the graph:\n{report}")
    return g
