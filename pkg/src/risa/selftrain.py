"""Vertical softmax classifier and confidence-gated pseudo-labelling."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TrainingDivergence
from .nn import SGD, DenseNet, softmax, softmax_cross_entropy


def build_encoder(in_dim, hidden, depth, rng):
    sizes = [in_dim] + [hidden] * depth
    return DenseNet.build(sizes, ["relu"] * depth, rng)


class VerticalClassifier:
    """Per-party encoders whose outputs are concatenated into a softmax head.

    This is the usual split-learning VFL model. With a single block it is a
    plain local MLP.
    """

    def __init__(self, dims, n_classes, hidden=64, depth=2, seed=0):
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.encoders = [build_encoder(d, hidden, depth, rng) for d in dims]
        head_in = sum(e.output_dim for e in self.encoders)
        self.head = DenseNet.build([head_in, n_classes], ["linear"], rng)

    @property
    def nets(self):
        return self.encoders + [self.head]

    def logits(self, blocks):
        if len(blocks) != len(self.encoders):
            raise ContractViolation(f"expected {len(self.encoders)} blocks, got {len(blocks)}")
        feats = [enc.forward(x) for enc, x in zip(self.encoders, blocks)]
        return self.head.forward(np.hstack(feats))

    def predict_proba(self, blocks):
        return softmax(self.logits(blocks))

    def predict(self, blocks):
        return self.predict_proba(blocks).argmax(axis=1)

    def _backward(self, grad_logits):
        tapes = [self.head.backward(grad_logits)]
        splits = np.cumsum([e.output_dim for e in self.encoders])[:-1]
        for enc, g in zip(self.encoders, np.split(tapes[0].inputs, splits, axis=1)):
            tapes.insert(-1, enc.backward(g))
        return tapes  # same order as self.nets

    def fit(self, blocks, labels, epochs=100, lr=0.05, momentum=0.9, batch_size=32, seed=0,
            on_epoch=None):
        """Minimise mean cross-entropy with minibatch SGD; returns per-epoch losses."""
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        if n == 0:
            raise ContractViolation("no training samples")
        missing = sorted(set(range(self.n_classes)) - set(labels.tolist()))
        if missing:
            warnings.warn(f"classes {missing} have no training samples", stacklevel=2)
        opts = [SGD(net, lr, momentum) for net in self.nets]
        rng = np.random.default_rng(seed)
        history = []
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                loss, grad = softmax_cross_entropy(self.logits([b[idx] for b in blocks]), labels[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergence(
                        "cross-entropy became non-finite", {"epoch": epoch, "batch_start": lo}
                    )
                for opt, tape in zip(opts, self._backward(grad)):
                    opt.step(tape)
                total += loss * len(idx)
            history.append(total / n)
            if on_epoch is not None:
                on_epoch(epoch + 1, history[-1])
        return history


SelfTrainModel = VerticalClassifier


def imputation_views(blocks, labels):
    """Overlap rows plus, per party, a copy with every other block set to its mean.

    The copies look like mean-imputed non-overlap rows owned by that party,
    which is what the self-training model is later asked to label.
    """
    means = [b.mean(axis=0) for b in blocks]
    out = [list(blocks)]
    for owner in range(len(blocks)):
        out.append([b if p == owner else np.tile(means[p], (len(b), 1))
                    for p, b in enumerate(blocks)])
    views = [np.vstack(parts) for parts in zip(*out)]
    return views, np.tile(np.asarray(labels), len(out))


def train_fst(blocks, labels, n_classes, epochs=200, lr=0.05, momentum=0.9, batch_size=32,
              hidden=64, depth=2, seed=0, imputed_views=True):
    """Train the self-training model by cross-entropy on the overlapping samples.

    With ``imputed_views`` each overlap row also appears in its mean-imputed
    forms (see :func:`imputation_views`).
    """
    if imputed_views:
        blocks, labels = imputation_views(blocks, labels)
    model = VerticalClassifier([b.shape[1] for b in blocks], n_classes, hidden, depth, seed)
    model.history = model.fit(blocks, labels, epochs, lr, momentum, batch_size, seed)
    return model


@dataclass(frozen=True)
class PseudoLabel:
    sample_id: int
    label: int
    confidence: float


def assign_pseudo_labels(model, sample_ids, blocks, tau_p):
    """Label sample ``j`` with ``argmax p_j`` when ``max p_j >= tau_p``.

    ``blocks`` hold the imputed attributes of the candidate samples.
    """
    sample_ids = np.asarray(sample_ids)
    if len(sample_ids) == 0:
        return []
    probs = model.predict_proba(blocks)
    label = probs.argmax(axis=1)
    conf = probs[np.arange(len(label)), label]
    keep = conf >= tau_p
    return [PseudoLabel(int(s), int(c), float(p))
            for s, c, p in zip(sample_ids[keep], label[keep], conf[keep])]


def write_pseudo_labels(path, labels):
    with open(path, "w") as fh:
        for pl in labels:
            fh.write(json.dumps({"sample_id": pl.sample_id, "class": pl.label,
                                 "confidence": pl.confidence}) + "\n")


def read_pseudo_labels(path):
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [PseudoLabel(r["sample_id"], r["class"], r["confidence"]) for r in rows]
