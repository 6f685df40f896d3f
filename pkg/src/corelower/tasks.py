"""Desk-scale synthetic tasks and in-engine teacher training.

Classification: ten fixed low-frequency prototype images, each sample a
noisy shifted copy. Sequence: reverse (or copy) a short random token string.
Both are easy enough for a tiny teacher to master in seconds yet non-trivial
under heavy quantization.
"""

from __future__ import annotations

import numpy as np

from .distill import ClassificationData, SequenceData, evaluate
from .engine import (
    ExecutionContext, backward, cross_entropy_hard_grad, forward,
)
from .ir import Graph
from .optim import Adam


def make_classification_data(n: int, seed: int = 0, image_size: int = 32,
                             classes: int = 10, noise: float = 0.4,
                             max_shift: int = 2, class_seed: int = 0) -> ClassificationData:
    """`seed` drives sampling; `class_seed` fixes the class prototypes, so
    train/test splits share classes by default."""
    proto_rng = np.random.default_rng([class_seed, 0xC1A55])
    coarse = proto_rng.standard_normal((classes, 1, 4, 4)).astype(np.float32)
    protos = np.repeat(np.repeat(coarse, image_size // 4, axis=2),
                       image_size // 4, axis=3)
    rng = np.random.default_rng([seed, 0xDA7A])
    labels = rng.integers(0, classes, size=n)
    images = protos[labels].copy()
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        images[i] = np.roll(images[i], tuple(shifts[i]), axis=(1, 2))
    images += noise * rng.standard_normal(images.shape).astype(np.float32)
    return ClassificationData(images=images.astype(np.float32),
                              labels=labels.astype(np.int64))


def make_sequence_data(n: int, seed: int = 0, vocab: int = 32, seq_len: int = 8,
                       kind: str = "reverse") -> SequenceData:
    """Token ids 0..3 are reserved (0 pad, 1 bos); payload uses the rest."""
    rng = np.random.default_rng([seed, 0x5E0])
    src = rng.integers(4, vocab, size=(n, seq_len))
    if kind == "reverse":
        tgt = src[:, ::-1].copy()
    elif kind == "copy":
        tgt = src.copy()
    else:
        raise ValueError(f"unknown sequence task {kind!r}")
    return SequenceData(src=src.astype(np.float32), tgt=tgt.astype(np.int64), bos=1)


def _train_ce(graph: Graph, inputs_of, labels: np.ndarray, epochs: int,
              lr: float, batch_size: int, seed: int,
              weight_decay: float = 0.0, decoupled: bool = False) -> None:
    params = graph.trainable_params()
    opt = Adam(params, lr=lr, weight_decay=weight_decay, decoupled=decoupled)
    rng = np.random.default_rng([seed, 0x7EAC4])
    n = len(labels)
    logits_edge = graph.graph_outputs[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            ctx = ExecutionContext(mode="train")
            res = forward(graph, inputs_of(idx), ctx, record_tape=True)
            logits = res.outputs[logits_edge]
            seed_grad = cross_entropy_hard_grad(logits, labels[idx])
            grads = backward(res.tape, {logits_edge: seed_grad})
            opt.step(grads.params)


def train_classifier(graph: Graph, data: ClassificationData, epochs: int = 15,
                     lr: float = 1e-3, batch_size: int = 128, seed: int = 0) -> float:
    """Supervised teacher training; returns final eval-mode top-1 on the
    training set."""
    _train_ce(graph,
              lambda idx: {"image": data.images[idx]},
              data.labels, epochs, lr, batch_size, seed)
    return evaluate(graph, data, "top1_top5")["top1"]


def train_seq2seq(graph: Graph, data: SequenceData, epochs: int = 30,
                  lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> float:
    """Teacher-forced training of a src->tgt graph; returns greedy-decode
    token accuracy on the training set."""
    dec_in = np.zeros_like(data.src, dtype=np.float32)
    dec_in[:, 0] = data.bos
    dec_in[:, 1:] = data.tgt[:, :-1]

    def inputs_of(idx):
        return {"src": data.src[idx], "tgt": dec_in[idx]}

    _train_ce(graph, inputs_of, data.tgt, epochs, lr, batch_size, seed,
              weight_decay=1e-4, decoupled=True)
    return evaluate(graph, data, "sequence_accuracy")["token_accuracy"]
