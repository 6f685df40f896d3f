"""Blockwise distillation: stage planning, teacher-weight initialisation,
training-time feature adapters, the stage-by-stage optimisation loop, and
metric evaluation.

The distillation path is label-free by construction: it consumes an
UnlabeledPool that holds model inputs only. Classification targets are the
teacher's logits; sequence targets are the teacher's own greedy decodes.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ExecutionContext, NonFiniteValue, _col2im, _conv_single, backward,
    cosine_distance, cosine_distance_grad, cross_entropy_hard,
    cross_entropy_hard_grad, forward, mse, mse_grad, stage_weight, staged_loss,
)
from .ir import (
    Add, Conv2D, Embedding, FakeQuant, Graph, LayerNorm, MaxPool, ReLU, Softmax,
)
from .legalize import PassTrace
from .optim import Adam, CosineWarmRestarts
from .quant import BitWidthConfig


class DistillError(Exception):
    pass


class UnmappableTap(DistillError):
    pass


class NonFiniteLoss(DistillError):
    pass


class DataExhausted(DistillError):
    pass


# --------------------------------------------------------------------------
# data sources
# --------------------------------------------------------------------------


class UnlabeledPool:
    """Inputs-only data source; the distiller can never read labels from it.

    `meta` carries task conventions (e.g. the begin-of-sequence token id),
    never targets.
    """

    def __init__(self, arrays: dict[str, np.ndarray], meta: dict | None = None):
        if not arrays:
            raise DistillError("empty pool")
        sizes = {k: len(v) for k, v in arrays.items()}
        if len(set(sizes.values())) != 1:
            raise DistillError(f"pool arrays disagree in length: {sizes}")
        self.arrays = {k: np.asarray(v) for k, v in arrays.items()}
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return len(next(iter(self.arrays.values())))

    def take(self, n: int, rng: np.random.Generator) -> "UnlabeledPool":
        if n > len(self):
            raise DataExhausted(f"requested {n} samples from a pool of {len(self)}")
        idx = rng.choice(len(self), size=n, replace=False)
        return UnlabeledPool({k: v[idx] for k, v in self.arrays.items()}, self.meta)

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.arrays.items()}


@dataclass
class ClassificationData:
    images: np.ndarray
    labels: np.ndarray

    def unlabeled(self) -> UnlabeledPool:
        return UnlabeledPool({"image": self.images})


@dataclass
class SequenceData:
    src: np.ndarray   # [N, W] token ids
    tgt: np.ndarray   # [N, W] gold output ids
    bos: int = 1

    def unlabeled(self) -> UnlabeledPool:
        return UnlabeledPool({"src": self.src}, meta={"bos": self.bos})


# --------------------------------------------------------------------------
# stage planning
# --------------------------------------------------------------------------


@dataclass
class Tap:
    name: str
    teacher_edge: str
    student_edge: str
    loss: str                # mse | cosine | ce
    adapter: str = "none"    # none | conv | fc
    channels: int = 0


@dataclass
class Stage:
    index: int               # 1-based
    name: str
    teacher_nodes: list[str]
    student_nodes: list[str]
    taps: list[Tap]


@dataclass
class StagePlan:
    family: str
    stages: list[Stage]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def taps_upto(self, stage: int) -> list[tuple[int, Tap]]:
        out = []
        for s in self.stages[:stage]:
            out.extend((s.index, t) for t in s.taps)
        return out


def _resolve_student_edge(student: Graph, edge: str) -> str:
    """Follow the edge through any attached activation quantizer so taps see
    what downstream student layers actually consume."""
    if edge not in student.edges:
        raise UnmappableTap(f"teacher edge {edge!r} has no counterpart in the student")
    consumers = student.consumer_map()
    cur = edge
    for _ in range(4):
        nxt = [n for n in consumers.get(cur, []) if isinstance(n.kind, FakeQuant)]
        if len(nxt) == 1 and len(consumers.get(cur, [])) == 1:
            cur = nxt[0].outputs[0]
        else:
            break
    return cur


def _ancestor_nodes(graph: Graph, edge: str) -> set[str]:
    producers = graph.producer_map()
    seen: set[str] = set()
    frontier = [edge]
    while frontier:
        e = frontier.pop()
        node = producers.get(e)
        if node is None or node.id in seen:
            continue
        seen.add(node.id)
        frontier.extend(node.inputs)
    return seen


def _assign_by_taps(graph: Graph, tap_edges: list[str]) -> list[list[str]]:
    """Partition nodes into len(tap_edges)+1 groups: the cone feeding each
    successive tap, then everything else (the head)."""
    assigned: set[str] = set()
    groups: list[list[str]] = []
    for e in tap_edges:
        cone = _ancestor_nodes(graph, e)
        groups.append(sorted(cone - assigned))
        assigned |= cone
    groups.append(sorted({n.id for n in graph.nodes} - assigned))
    return groups


def _tap_channels(graph: Graph, edge: str) -> int:
    spec = graph.edges[edge]
    return spec.dims[1] if spec.rank == 4 else spec.dims[-1]


def _plan_classification(teacher: Graph, student: Graph, family: str) -> StagePlan:
    consumers = teacher.consumer_map()
    tap_edges: list[str] = []

    if family == "resnet_like":
        pools = [n for n in teacher.nodes if isinstance(n.kind, MaxPool)]
        if not pools:
            raise DistillError("resnet_like planning expects a stem max-pool")
        tap_edges.append(pools[0].outputs[0])
    else:  # mobilenet_like: stem tap after the first conv's activation
        convs = [n for n in teacher.nodes if isinstance(n.kind, Conv2D)]
        if not convs:
            raise DistillError("no convolutions to plan around")
        e = convs[0].outputs[0]
        for _ in range(3):  # walk conv -> bn -> relu
            nxt = consumers.get(e, [])
            if len(nxt) == 1 and type(nxt[0].kind).__name__ in ("BatchNorm", "ReLU"):
                e = nxt[0].outputs[0]
            else:
                break
        tap_edges.append(e)

    adds = [n for n in teacher.nodes if isinstance(n.kind, Add)]
    if adds:
        for a in adds:
            relu = [n for n in consumers.get(a.outputs[0], []) if isinstance(n.kind, ReLU)]
            tap_edges.append(relu[0].outputs[0] if relu else a.outputs[0])
    else:
        # separable blocks: tap after each pointwise conv's activation
        for n in teacher.nodes:
            if isinstance(n.kind, Conv2D) and (n.kind.kernel_h, n.kind.kernel_w) == (1, 1):
                e = n.outputs[0]
                for _ in range(3):
                    nxt = consumers.get(e, [])
                    if len(nxt) == 1 and type(nxt[0].kind).__name__ in ("BatchNorm", "ReLU"):
                        e = nxt[0].outputs[0]
                    else:
                        break
                tap_edges.append(e)

    logits = teacher.graph_outputs[0]
    t_groups = _assign_by_taps(teacher, tap_edges)
    s_groups = _assign_by_taps(student, [_resolve_student_edge(student, e)
                                         for e in tap_edges])
    stages: list[Stage] = []
    n = len(tap_edges) + 1
    for i, e in enumerate(tap_edges):
        adapter = "none" if i == 0 else "conv"
        stages.append(Stage(
            index=i + 1, name=f"block{i}" if i else "stem",
            teacher_nodes=t_groups[i], student_nodes=s_groups[i],
            taps=[Tap(name=f"tap{i + 1}", teacher_edge=e,
                      student_edge=_resolve_student_edge(student, e),
                      loss="mse", adapter=adapter,
                      channels=_tap_channels(teacher, e))]))
    stages.append(Stage(
        index=n, name="head", teacher_nodes=t_groups[-1], student_nodes=s_groups[-1],
        taps=[Tap(name="logits", teacher_edge=logits,
                  student_edge=_resolve_student_edge(student, logits),
                  loss="cosine")]))
    return StagePlan(family=family, stages=stages)


def _plan_transformer(teacher: Graph, student: Graph) -> StagePlan:
    def prefix(node_id: str) -> str:
        return node_id.split("/")[0] if "/" in node_id else "head"

    prefixes = []
    for n in teacher.nodes:
        p = prefix(n.id)
        if p not in prefixes:
            prefixes.append(p)
    encs = sorted(p for p in prefixes if p.startswith("enc"))
    decs = sorted(p for p in prefixes if p.startswith("dec"))
    if not encs or not decs:
        raise DistillError("transformer planning expects enc{i}/ and dec{i}/ "
                           "node id prefixes")

    # stage key -> member prefixes; embeddings join their first consumer stage
    stage_prefixes: list[tuple[str, list[str]]] = []
    for i, p in enumerate(encs):
        members = [p, "src_embed"] if i == 0 else [p]
        stage_prefixes.append((p, members))
    for i, p in enumerate(decs):
        members = [p, "tgt_embed"] if i == 0 else [p]
        stage_prefixes.append((p, members))
    claimed = {m for _, ms in stage_prefixes for m in ms}
    head_prefixes = [p for p in prefixes if p not in claimed]
    stage_prefixes.append(("head", head_prefixes))

    def members_of(graph: Graph, wanted: list[str]) -> list[str]:
        return sorted(n.id for n in graph.nodes if prefix(n.id) in wanted)

    stages: list[Stage] = []
    for si, (name, members) in enumerate(stage_prefixes):
        taps: list[Tap] = []
        if name == "head":
            logits = teacher.graph_outputs[0]
            taps.append(Tap(name="logits", teacher_edge=logits,
                            student_edge=_resolve_student_edge(student, logits),
                            loss="ce"))
        else:
            for n in teacher.nodes:
                if prefix(n.id) not in members:
                    continue
                if isinstance(n.kind, LayerNorm):
                    e = n.outputs[0]
                    taps.append(Tap(name=n.id, teacher_edge=e,
                                    student_edge=_resolve_student_edge(student, e),
                                    loss="mse", adapter="fc",
                                    channels=_tap_channels(teacher, e)))
                elif isinstance(n.kind, Softmax):
                    e = n.outputs[0]
                    taps.append(Tap(name=n.id, teacher_edge=e,
                                    student_edge=_resolve_student_edge(student, e),
                                    loss="cosine"))
                elif isinstance(n.kind, Embedding):
                    e = n.outputs[0]
                    taps.append(Tap(name=n.id, teacher_edge=e,
                                    student_edge=_resolve_student_edge(student, e),
                                    loss="cosine"))
        stages.append(Stage(
            index=si + 1, name=name,
            teacher_nodes=members_of(teacher, members),
            student_nodes=members_of(student, members),
            taps=taps))
    return StagePlan(family="transformer_like", stages=stages)


def plan_stages(teacher: Graph, student: Graph, family: str,
                trace: PassTrace | None = None) -> StagePlan:
    """Partition teacher and student into aligned distillation stages.

    Rewrites preserve output edge ids, so taps resolve by edge identity;
    `trace` is accepted for callers that want to assert the student really
    is the teacher's legalized counterpart.
    """
    if family in ("resnet_like", "mobilenet_like"):
        plan = _plan_classification(teacher, student, family)
    elif family == "transformer_like":
        plan = _plan_transformer(teacher, student)
    else:
        raise DistillError(f"unknown family {family!r}")
    for s in plan.stages:
        for t in s.taps:
            if t.teacher_edge not in teacher.edges:
                raise UnmappableTap(f"tap {t.name}: teacher edge {t.teacher_edge!r} missing")
            if t.student_edge not in student.edges:
                raise UnmappableTap(f"tap {t.name}: student edge {t.student_edge!r} missing")
    return plan


def node_stage_map(plan: StagePlan, side: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in plan.stages:
        for nid in (s.student_nodes if side == "student" else s.teacher_nodes):
            out[nid] = s.index
    return out


def param_stage_map(graph: Graph, plan: StagePlan) -> dict[str, int]:
    """Stage index owning each trainable parameter of the student."""
    by_node = node_stage_map(plan, "student")
    out: dict[str, int] = {}
    for node in graph.nodes:
        stage = by_node.get(node.id)
        if stage is None:
            continue
        for role, name in node.params.items():
            out[name] = stage
    return out


# --------------------------------------------------------------------------
# teacher-weight initialisation
# --------------------------------------------------------------------------


def _he_for(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    elif len(shape) == 2:
        fan_in = shape[1]
    else:
        fan_in = shape[0]
    return (rng.standard_normal(shape) * math.sqrt(2.0 / max(fan_in, 1))).astype(np.float32, copy=False)


def _default_for(role: str, shape: tuple[int, ...]) -> np.ndarray | None:
    if role in ("bias", "beta", "running_mean"):
        return np.zeros(shape, dtype=np.float32)
    if role in ("gamma", "running_var"):
        return np.ones(shape, dtype=np.float32)
    if role in ("step", "w_step"):
        return np.zeros(shape, dtype=np.float32)  # sentinel: calibrate lazily
    return None


def init_from_teacher(student: Graph, teacher: Graph, trace: PassTrace,
                      seed: int = 0) -> Graph:
    """Deterministically re-derive every student parameter.

    Parameters shared with the teacher are copied bit-for-bit; parameters
    created by rewrites are rebuilt from their recorded origins (center-pad,
    slice, identity-merge, table transpose, affine copy); everything else is
    He-initialised (matrices) or gets its conventional default (vectors),
    all keyed on (seed, parameter name).
    """
    g = student.copy()
    origins = trace.origins()

    def resolve(name: str, depth: int = 0) -> np.ndarray | None:
        if depth > 8:
            raise DistillError(f"origin chain too deep at {name!r}")
        if name in teacher.weights:
            return teacher.weights[name].copy()
        o = origins.get(name)
        if o is None:
            return None
        if o.kind == "copy":
            return resolve(o.source, depth + 1)
        if o.kind == "ln_affine":
            return resolve(o.source, depth + 1)
        if o.kind == "pad_center":
            src = resolve(o.source, depth + 1)
            if src is None:
                return None
            out = np.zeros((src.shape[0], src.shape[1], 3, 3), dtype=np.float32)
            out[:, :, 1, 1] = src[:, :, 0, 0]
            return out
        if o.kind == "embedding_transpose":
            src = resolve(o.source, depth + 1)
            return None if src is None else np.ascontiguousarray(src.T)
        if o.kind == "slice":
            src = resolve(o.source, depth + 1)
            if src is None:
                return None
            lo, hi = o.detail["out"]
            src = src[lo:hi]
            if "in" in o.detail:
                lo, hi = o.detail["in"]
                src = src[:, lo:hi]
            return np.ascontiguousarray(src)
        if o.kind == "identity_concat":
            c = int(o.detail["channels"])
            w = np.zeros((c, 2 * c, 3, 3), dtype=np.float32)
            idx = np.arange(c)
            w[idx, idx, 1, 1] = 1.0
            w[idx, c + idx, 1, 1] = 1.0
            return w
        if o.kind == "zeros":
            return np.zeros(g.weights[name].shape, dtype=np.float32)
        if o.kind == "ones":
            return np.ones(g.weights[name].shape, dtype=np.float32)
        if o.kind == "eps_ones":
            return np.full(g.weights[name].shape, math.sqrt(1.0 + 1e-5),
                           dtype=np.float32)
        if o.kind == "bn_stat":
            role = name.rsplit(".", 1)[-1]
            return _default_for(role, g.weights[name].shape)
        return None  # "random" and anything unrecognised

    for node in g.nodes:
        for role, name in node.params.items():
            value = resolve(name)
            if value is None:
                shape = g.weights[name].shape
                if role in ("weight", "table") and len(shape) >= 2:
                    value = _he_for(name, shape, seed)
                else:
                    value = _default_for(role, shape)
                    if value is None:
                        value = _he_for(name, shape, seed)
            if value.shape != g.weights[name].shape:
                raise DistillError(f"init for {name!r}: shape {value.shape} vs "
                                   f"expected {g.weights[name].shape}")
            g.weights.add(name, value)
    return g


# --------------------------------------------------------------------------
# training-time adapters
# --------------------------------------------------------------------------


class RfaAdapter:
    """Three full-precision layers plus a residual add.

    Conv 3x3 layers for 4-D features, FC layers for sequence features; no
    normalisation, no nonlinearity. Training-time only: never serialized
    into the deployable graph.
    """

    def __init__(self, kind: str, channels: int, name: str, seed: int = 0,
                 residual: bool = True, enabled: bool = True):
        if kind not in ("conv", "fc"):
            raise DistillError(f"bad adapter kind {kind!r}")
        self.kind = kind
        self.channels = channels
        self.name = name
        self.residual = residual
        self.enabled = enabled
        self.params: dict[str, np.ndarray] = {}
        for i in range(3):
            wname = f"{name}/w{i}"
            if kind == "conv":
                self.params[wname] = _he_for(wname, (channels, channels, 3, 3), seed)
            else:
                self.params[wname] = _he_for(wname, (channels, channels), seed)
            self.params[f"{name}/b{i}"] = np.zeros(channels, dtype=np.float32)
        self._ctx: list | None = None

    def forward(self, s: np.ndarray) -> np.ndarray:
        if not self.enabled:
            self._ctx = None
            return s
        saves = []
        x = s
        for i in range(3):
            w = self.params[f"{self.name}/w{i}"]
            b = self.params[f"{self.name}/b{i}"]
            if self.kind == "conv":
                y, col, ho, wo = _conv_single(x, w, 1, 1)
                y = y + b[None, :, None, None]
                saves.append((x.shape, col, ho, wo))
            else:
                lead = x.shape
                x2 = x.reshape(-1, x.shape[-1])
                y = (x2 @ w.T + b).reshape(*lead[:-1], w.shape[0])
                saves.append((lead, x2))
            x = y.astype(np.float32, copy=False)
        self._ctx = saves
        return (x + s).astype(np.float32, copy=False) if self.residual else x

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if not self.enabled:
            return dout, {}
        grads: dict[str, np.ndarray] = {}
        dy = dout
        for i in reversed(range(3)):
            w = self.params[f"{self.name}/w{i}"]
            if self.kind == "conv":
                xshape, col, ho, wo = self._ctx[i]
                o = w.shape[0]
                dy_col = dy.transpose(0, 2, 3, 1).reshape(-1, o)
                grads[f"{self.name}/w{i}"] = (dy_col.T @ col).reshape(w.shape).astype(np.float32, copy=False)
                grads[f"{self.name}/b{i}"] = dy.sum(axis=(0, 2, 3)).astype(np.float32, copy=False)
                dcol = dy_col @ w.reshape(o, -1)
                dy = _col2im(dcol, xshape, 3, 3, 1, 1, ho, wo).astype(np.float32, copy=False)
            else:
                lead, x2 = self._ctx[i]
                dy2 = dy.reshape(-1, w.shape[0])
                grads[f"{self.name}/w{i}"] = (dy2.T @ x2).astype(np.float32, copy=False)
                grads[f"{self.name}/b{i}"] = dy2.sum(axis=0).astype(np.float32, copy=False)
                dy = (dy2 @ w).reshape(lead).astype(np.float32, copy=False)
        if self.residual:
            dy = dy + dout
        return dy.astype(np.float32, copy=False), grads


class TamAdapter:
    """Channel attention driven by the teacher: pooled teacher features pass
    through two FC layers and a sigmoid; the coefficients scale the student
    feature channel-wise. Training-time only."""

    def __init__(self, channels: int, name: str, seed: int = 0, reduction: int = 4):
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.name = name
        self.params = {
            f"{name}/w0": _he_for(f"{name}/w0", (hidden, channels), seed),
            f"{name}/b0": np.zeros(hidden, dtype=np.float32),
            f"{name}/w1": _he_for(f"{name}/w1", (channels, hidden), seed),
            f"{name}/b1": np.zeros(channels, dtype=np.float32),
        }
        self._ctx = None

    def coefficients(self, teacher_feat: np.ndarray) -> np.ndarray:
        if teacher_feat.ndim == 4:
            pooled = teacher_feat.mean(axis=(2, 3))
        else:  # [B, W, D] -> pool over sequence
            pooled = teacher_feat.mean(axis=1)
        w0, b0 = self.params[f"{self.name}/w0"], self.params[f"{self.name}/b0"]
        w1, b1 = self.params[f"{self.name}/w1"], self.params[f"{self.name}/b1"]
        pre = pooled @ w0.T + b0
        h = np.maximum(pre, 0.0)
        z = h @ w1.T + b1
        c = 1.0 / (1.0 + np.exp(-z))
        self._ctx = (pooled, pre, h, c)
        return c.astype(np.float32, copy=False)

    def forward(self, teacher_feat: np.ndarray, student_feat: np.ndarray) -> np.ndarray:
        c = self.coefficients(teacher_feat)
        self._student = student_feat
        if student_feat.ndim == 4:
            return (student_feat * c[:, :, None, None]).astype(np.float32, copy=False)
        return (student_feat * c[:, None, :]).astype(np.float32, copy=False)

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        pooled, pre, h, c = self._ctx
        s = self._student
        if s.ndim == 4:
            ds = dout * c[:, :, None, None]
            dc = (dout * s).sum(axis=(2, 3))
        else:
            ds = dout * c[:, None, :]
            dc = (dout * s).sum(axis=1)
        dz = dc * c * (1.0 - c)
        w1 = self.params[f"{self.name}/w1"]
        grads = {
            f"{self.name}/w1": (dz.T @ h).astype(np.float32, copy=False),
            f"{self.name}/b1": dz.sum(axis=0).astype(np.float32, copy=False),
        }
        dh = dz @ w1
        dh = dh * (pre > 0)
        grads[f"{self.name}/w0"] = (dh.T @ pooled).astype(np.float32, copy=False)
        grads[f"{self.name}/b0"] = dh.sum(axis=0).astype(np.float32, copy=False)
        return ds.astype(np.float32, copy=False), grads


def apply_adapters(student_feat: np.ndarray, teacher_feat: np.ndarray,
                   rfa: RfaAdapter | None, tam: TamAdapter | None) -> np.ndarray:
    """Forward-only adapter chain: TAM scaling, then RFA with residual."""
    s = tam.forward(teacher_feat, student_feat) if tam is not None else student_feat
    return rfa.forward(s) if rfa is not None else s


# --------------------------------------------------------------------------
# the distillation loop
# --------------------------------------------------------------------------


@dataclass
class DistillConfig:
    gamma: float = 0.5
    epochs_first: int = 50
    epochs_middle: int = 10
    epochs_last: int = 200
    p_total: int = 5000
    p_epoch: int = 1024
    batch_size: int = 128
    optimizer: str = "adam"          # adam | adamw
    lr: float = 1e-3
    weight_decay: float = 0.0
    sched_t0: int = 10
    sched_t_mult: int = 2
    seed: int = 0
    rfa: str = "full"                # off | no_residual | full
    tam: bool = True
    tam_reduction: int = 4
    bit_config: BitWidthConfig | None = None   # informational: how the student was quantized

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise DistillError("gamma must be in (0, 1)")
        if self.p_epoch > self.p_total:
            raise DistillError("p_epoch must be <= p_total")
        if self.rfa not in ("off", "no_residual", "full"):
            raise DistillError(f"bad rfa mode {self.rfa!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise DistillError(f"bad optimizer {self.optimizer!r}")

    def epochs_for(self, stage: int, n_stages: int) -> int:
        if stage == n_stages:
            return self.epochs_last
        if stage == 1:
            return self.epochs_first
        return self.epochs_middle


@dataclass
class MetricLog:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())


def make_adapters(plan: StagePlan, config: DistillConfig) -> dict[str, tuple]:
    """(rfa, tam) pair per tap name, honouring the config's ablation switches."""
    adapters: dict[str, tuple[RfaAdapter | None, TamAdapter | None]] = {}
    for stage in plan.stages:
        for tap in stage.taps:
            if tap.adapter == "none":
                continue
            rfa = None
            if config.rfa != "off":
                rfa = RfaAdapter(tap.adapter, tap.channels, f"rfa/{tap.name}",
                                 seed=config.seed,
                                 residual=(config.rfa == "full"))
            tam = None
            if config.tam:
                tam = TamAdapter(tap.channels, f"tam/{tap.name}", seed=config.seed,
                                 reduction=config.tam_reduction)
            adapters[tap.name] = (rfa, tam)
    return adapters


def greedy_decode(graph: Graph, src: np.ndarray, seq_len: int, bos: int,
                  batch_size: int = 256) -> np.ndarray:
    """Greedy autoregressive decode of a src->tgt graph with inputs named
    'src' and 'tgt'. Returns predicted token ids [N, seq_len]."""
    n = len(src)
    preds = np.zeros((n, seq_len), dtype=np.int64)
    ctx = ExecutionContext(mode="eval")
    for lo in range(0, n, batch_size):
        s = src[lo:lo + batch_size].astype(np.float32, copy=False)
        cur = np.zeros((len(s), seq_len), dtype=np.float32)
        cur[:, 0] = bos
        for t in range(seq_len):
            res = forward(graph, {"src": s, "tgt": cur}, ctx)
            logits = res.outputs[graph.graph_outputs[0]]
            nxt = logits[:, t].argmax(axis=-1)
            preds[lo:lo + len(s), t] = nxt
            if t + 1 < seq_len:
                cur[:, t + 1] = nxt
    return preds


def _tap_loss_and_grad(tap: Tap, adapted: np.ndarray, target, weight: float):
    if tap.loss == "mse":
        return mse(adapted, target), mse_grad(adapted, target) * weight
    if tap.loss == "cosine":
        return cosine_distance(adapted, target), cosine_distance_grad(adapted, target) * weight
    if tap.loss == "ce":
        return (cross_entropy_hard(adapted, target),
                cross_entropy_hard_grad(adapted, target) * weight)
    raise DistillError(f"unknown tap loss {tap.loss!r}")


def distill(teacher: Graph, student: Graph, plan: StagePlan, data: UnlabeledPool,
            config: DistillConfig,
            on_stage_start=None, on_stage_end=None) -> tuple[Graph, MetricLog]:
    """Stage-by-stage optimisation of the student against teacher features.

    At stage m the taps of stages 1..m contribute, geometrically
    down-weighted by gamma; parameters of stages 1..m plus their adapters
    train, later stages stay untouched (bit-identical). Weights carry over
    between stages. Labels are never read: classification targets are
    teacher logits, sequence targets the teacher's own decodes.
    """
    rng = np.random.default_rng([config.seed, 0xD15711])
    student = student.copy()
    n_stages = plan.n_stages
    pool = data.take(config.p_total, rng)

    is_seq = plan.family == "transformer_like"
    pool_inputs = dict(pool.arrays)
    ce_labels = None
    if is_seq:
        src = pool_inputs["src"]
        seq_len = src.shape[1]
        bos = int(pool.meta.get("bos", 1))
        teacher_pred = greedy_decode(teacher, src, seq_len, bos)
        dec_in = np.zeros_like(src, dtype=np.float32)
        dec_in[:, 0] = bos
        dec_in[:, 1:] = teacher_pred[:, :-1]
        pool_inputs["tgt"] = dec_in
        ce_labels = teacher_pred

    adapters = make_adapters(plan, config)
    params_by_stage = param_stage_map(student, plan)
    log = MetricLog(columns=["stage", "epoch", "lr", "loss"]
                    + [f"loss_s{i + 1}" for i in range(n_stages)])

    t_ctx = ExecutionContext(mode="eval")
    for stage in plan.stages:
        m = stage.index
        if on_stage_start is not None:
            on_stage_start(m, student, adapters)
        epochs = config.epochs_for(m, n_stages)
        active_taps = plan.taps_upto(m)
        t_edges = [t.teacher_edge for _, t in active_taps]
        s_edges = [t.student_edge for _, t in active_taps]

        trainable: dict[str, np.ndarray] = {
            name: student.weights[name]
            for name, si in params_by_stage.items() if si <= m
        }
        stage_tap_names = {t.name for si, t in active_taps}
        for tname, (rfa, tam) in adapters.items():
            if tname in stage_tap_names:
                if rfa is not None:
                    trainable.update(rfa.params)
                if tam is not None:
                    trainable.update(tam.params)
        opt = Adam(trainable, lr=config.lr,
                   weight_decay=config.weight_decay,
                   decoupled=(config.optimizer == "adamw"))
        sched = CosineWarmRestarts(config.lr, config.sched_t0, config.sched_t_mult)

        for epoch in range(epochs):
            opt.lr = sched.lr_at(epoch)
            order = rng.choice(len(pool), size=config.p_epoch, replace=False)
            epoch_loss = 0.0
            epoch_components = np.zeros(n_stages, dtype=np.float64)
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                inputs = {k: v[idx].astype(np.float32, copy=False) for k, v in pool_inputs.items()}
                try:
                    t_res = forward(teacher, inputs, t_ctx, taps=t_edges, outputs=[])
                    s_ctx = ExecutionContext(mode="train")
                    s_res = forward(student, inputs, s_ctx, taps=s_edges, outputs=[],
                                    record_tape=True)
                except NonFiniteValue as exc:
                    raise NonFiniteLoss(f"stage {m} epoch {epoch}: {exc}") from exc

                seeds: dict[str, np.ndarray] = {}
                adapter_grads: dict[str, np.ndarray] = {}
                components: list[tuple[int, float]] = []
                comp_by_stage: dict[int, float] = {}
                for si, tap in active_taps:
                    w = stage_weight(si, m, config.gamma)
                    sfeat = s_res.edges[tap.student_edge]
                    if tap.loss == "ce":
                        target = ce_labels[idx]
                    else:
                        target = t_res.edges[tap.teacher_edge]
                    rfa, tam = adapters.get(tap.name, (None, None))
                    adapted = sfeat
                    if tam is not None:
                        adapted = tam.forward(t_res.edges[tap.teacher_edge], adapted)
                    if rfa is not None:
                        adapted = rfa.forward(adapted)
                    value, grad = _tap_loss_and_grad(tap, adapted, target, w)
                    if rfa is not None:
                        grad, g1 = rfa.backward(grad)
                        for k, v in g1.items():
                            adapter_grads[k] = adapter_grads.get(k, 0) + v
                    if tam is not None:
                        grad, g2 = tam.backward(grad)
                        for k, v in g2.items():
                            adapter_grads[k] = adapter_grads.get(k, 0) + v
                    seeds[tap.student_edge] = seeds.get(tap.student_edge, 0) + grad
                    comp_by_stage[si] = comp_by_stage.get(si, 0.0) + value
                components = sorted(comp_by_stage.items())
                loss = staged_loss(components, m, config.gamma)
                if not math.isfinite(loss.scalar):
                    raise NonFiniteLoss(f"stage {m} epoch {epoch}: loss {loss.scalar}")
                grads = backward(s_res.tape, seeds)
                step_grads = {k: v for k, v in grads.params.items() if k in trainable}
                step_grads.update(adapter_grads)
                opt.step(step_grads)
                for name, arr in trainable.items():
                    if name.endswith(".step") or name.endswith(".w_step"):
                        np.maximum(arr, 1e-6, out=arr)
                epoch_loss += loss.scalar
                for si, v in components:
                    epoch_components[si - 1] += v
                n_batches += 1
            row = [m, epoch, opt.lr, epoch_loss / n_batches] + \
                [float(c / n_batches) for c in epoch_components]
            log.rows.append(row)
        if on_stage_end is not None:
            on_stage_end(m, student, adapters)
    return student, log


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate(graph: Graph, data, task: str, batch_size: int = 256) -> dict[str, float]:
    """Eval-mode metrics: classification top-1/top-5 or greedy-decode
    token accuracy."""
    ctx = ExecutionContext(mode="eval")
    if task == "top1_top5":
        images, labels = data.images, data.labels
        top1 = top5 = 0
        for lo in range(0, len(images), batch_size):
            x = images[lo:lo + batch_size].astype(np.float32, copy=False)
            y = labels[lo:lo + batch_size]
            logits = forward(graph, {"image": x}, ctx).outputs[graph.graph_outputs[0]]
            order = np.argsort(-logits, axis=1)
            top1 += int((order[:, 0] == y).sum())
            top5 += int((order[:, :5] == y[:, None]).any(axis=1).sum())
        n = len(images)
        return {"top1": top1 / n, "top5": top5 / n}
    if task == "sequence_accuracy":
        preds = greedy_decode(graph, data.src, data.tgt.shape[1], data.bos,
                              batch_size=batch_size)
        return {"token_accuracy": float((preds == data.tgt).mean()),
                "sequence_accuracy": float((preds == data.tgt).all(axis=1).mean())}
    raise DistillError(f"unknown task {task!r}")
