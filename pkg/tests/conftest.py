"""Shared test oracles and helpers.

The naive convolution and the finite-difference harness are deliberately
independent of the engine's fast paths: plain nested loops and central
differences only.
"""

from __future__ import annotations

import numpy as np
import pytest

from corelower.engine import ExecutionContext, backward, forward
from corelower.ir import Graph, GraphBuilder, image_spec


def naive_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, pad: int = 0, groups: int = 1) -> np.ndarray:
    """Reference convolution: explicit loops over every output element."""
    b, c, h, wid = x.shape
    o, cg, kh, kw = w.shape
    xp = np.zeros((b, c, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wid] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    og = o // groups
    y = np.zeros((b, o, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            g = oi // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (w[oi, ci, u, v]
                                        * xp[bi, g * cg + ci, i * stride + u, j * stride + v])
                    y[bi, oi, i, j] = acc
    if bias is not None:
        y += bias[None, :, None, None]
    return y.astype(np.float32)


def gradcheck(graph: Graph, inputs: dict[str, np.ndarray], rng: np.random.Generator,
              h: float = 1e-3, tol: float = 1e-3, n_probe: int = 4,
              check_params: bool = True, check_inputs: bool = True,
              train: bool = True) -> float:
    """Central finite differences of loss = sum(output * R) versus the tape.

    Accepts when |fd - analytic| <= tol * max(1, |fd|, |analytic|); returns
    the worst scaled error. Raises AssertionError listing mismatches.
    """
    mode = "train" if train else "eval"

    def run():
        return forward(graph, inputs, ExecutionContext(mode=mode, update_bn_stats=False),
                       record_tape=True)

    res = run()
    probes = {e: rng.standard_normal(res.outputs[e].shape).astype(np.float32)
              for e in graph.graph_outputs}

    def loss_of(r):
        return sum(float(np.sum(r.outputs[e].astype(np.float64) * probes[e]))
                   for e in graph.graph_outputs)

    grads = backward(res.tape, probes)

    targets = []
    if check_params:
        for name, arr in graph.trainable_params().items():
            picks = rng.permutation(arr.size)[:n_probe]
            targets += [("param", name, np.unravel_index(i, arr.shape)) for i in picks]
    if check_inputs:
        for name in graph.graph_inputs:
            arr = inputs[name]
            picks = rng.permutation(arr.size)[:n_probe]
            targets += [("input", name, np.unravel_index(i, arr.shape)) for i in picks]

    worst = 0.0
    failures = []
    for kind, name, idx in targets:
        arr = graph.weights[name] if kind == "param" else inputs[name]
        orig = arr[idx]
        arr[idx] = orig + h
        lp = loss_of(run())
        arr[idx] = orig - h
        lm = loss_of(run())
        arr[idx] = orig
        fd = (lp - lm) / (2 * h)
        source = grads.params if kind == "param" else grads.inputs
        an = float(source.get(name, np.zeros(1))[idx]) if name in source else 0.0
        err = abs(fd - an) / max(1.0, abs(fd), abs(an))
        worst = max(worst, err)
        if err > tol:
            failures.append(f"{kind} {name}{idx}: analytic={an:.6g} fd={fd:.6g} err={err:.2e}")
    assert not failures, "gradient mismatches:\n" + "\n".join(failures)
    return worst


def random_small_graph(seed: int) -> tuple[Graph, dict[str, np.ndarray]]:
    """A random valid conv/pool/concat graph for round-trip property tests."""
    rng = np.random.default_rng(seed)
    gb = GraphBuilder(seed)
    c = int(rng.integers(1, 5))
    hw = int(rng.choice([6, 8, 10]))
    x = gb.input("x", image_spec(2, c, hw, hw))
    edge = x
    for i in range(int(rng.integers(1, 5))):
        choice = rng.integers(0, 5)
        ch = gb.edges[edge].dims[1]
        if choice == 0:
            edge = gb.conv(edge, int(rng.integers(1, 7)), kernel=3,
                           stride=int(rng.choice([1, 2])), bias=bool(rng.integers(2)))
        elif choice == 1:
            edge = gb.bn(edge)
        elif choice == 2:
            edge = gb.relu(edge)
        elif choice == 3 and gb.edges[edge].dims[2] >= 4:
            edge = gb.maxpool(edge, 2, 2)
        else:
            other = gb.conv(edge, ch, kernel=3)
            edge = gb.concat([edge, other], axis=1)
        if gb.edges[edge].dims[2] < 2:
            break
    g = gb.graph([edge])
    x_arr = rng.standard_normal((2, c, hw, hw)).astype(np.float32)
    return g, {"x": x_arr}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
