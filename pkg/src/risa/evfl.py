"""Evidential VFL training, uncertainty filtering and the full pipeline.

Each party owns one network mapping its attribute block to K evidence
values. Per batch the passive parties send their evidence to the active
party, which fuses all opinions, evaluates the evidential loss and sends
every passive party the gradient of the loss w.r.t. its evidence. Nothing
else crosses a party boundary.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import evidence as ev
from .dataops import UNLABELED, compute_means, impute_nonoverlap, overlap_blocks
from .errors import ConfigError, ContractViolation, EmptyTrainingSet, TrainingDivergence
from .metrics import accuracy, compute_auc
from .nn import SGD, DenseNet
from .selftrain import VerticalClassifier, assign_pseudo_labels, train_fst

METHODS = ("risa", "imp", "imp_st", "imp_evfl", "local", "vfl", "local_vfl", "random_match")
BASELINES = ("local", "vfl", "local_vfl", "random_match")


@dataclass
class VflConfig:
    n_parties: int = 2
    n_classes: int = 2
    epochs: int = 40
    filter_every: int = 5
    tau_0: float = 0.5
    tau_p: float = 0.7
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    activation: str = "softplus"
    method: str = "risa"
    hidden: int = 64
    depth: int = 2
    fst_epochs: int = 10
    prior: float = 1.0
    filter_overlap: bool = False
    label_nonoverlap: bool = True
    pseudo_label_active: bool = True
    fst_imputed_views: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_parties < 2:
            raise ConfigError("need at least two parties")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0 < self.tau_0 < 1:
            raise ConfigError("tau_0 must lie strictly between 0 and 1")
        if not 1 <= self.filter_every <= self.epochs:
            raise ConfigError("filter interval must satisfy 1 <= E <= T")
        if not 0 <= self.tau_p <= 1:
            raise ConfigError("tau_p must lie in [0, 1]")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size at least 1")
        if self.activation not in ("softplus", "exp", "relu"):
            raise ConfigError(f"unknown evidence activation {self.activation!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")

    def replace(self, **changes):
        return VflConfig(**{**asdict(self), **changes})

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def uncertainty_threshold(t, total, tau_0):
    """Filtering threshold ``tau_0 ** (t / T)``, falling from 1 to ``tau_0``."""
    if not 0 <= t <= total:
        raise ContractViolation("epoch must lie in [0, T]")
    if not 0 < tau_0 < 1:
        raise ContractViolation("tau_0 must lie in (0, 1)")
    return tau_0 ** (t / total)


@dataclass
class PartyMessage:
    direction: str  # "forward" | "backward"
    party: int
    sample_ids: np.ndarray
    payload: np.ndarray
    epoch: int

    def header(self):
        return {
            "direction": self.direction,
            "party": self.party,
            "epoch": self.epoch,
            "n_samples": len(self.sample_ids),
            "payload_shape": list(self.payload.shape),
        }


class MessageBus:
    """In-process channel; optionally keeps every message for auditing."""

    def __init__(self, keep_payloads=False, trace_path=None):
        self.keep_payloads = keep_payloads
        self.messages = []
        self.counts = {}
        self._trace = open(trace_path, "w") if trace_path else None

    def send(self, msg):
        key = (msg.epoch, msg.direction)
        self.counts[key] = self.counts.get(key, 0) + 1
        if self.keep_payloads:
            self.messages.append(msg)
        if self._trace:
            self._trace.write(json.dumps(msg.header()) + "\n")
        return msg

    def close(self):
        if self._trace:
            self._trace.close()
            self._trace = None


def build_evidence_net(in_dim, n_classes, hidden, depth, activation, rng):
    sizes = [in_dim] + [hidden] * depth + [n_classes]
    return DenseNet.build(sizes, ["relu"] * depth + [activation], rng)


class Party:
    """A passive party: attribute block and evidence network, no labels."""

    def __init__(self, party_id, sample_ids, block, net, lr, momentum):
        self.party_id = party_id
        self.block = np.asarray(block, dtype=np.float64)
        self.net = net
        self.opt = SGD(net, lr, momentum)
        self._pos = {int(s): i for i, s in enumerate(sample_ids)}
        self.inbox = []

    def rows(self, ids):
        return self.block[[self._pos[int(s)] for s in ids]]

    def evidence(self, ids, epoch):
        e = self.net.forward(self.rows(ids))
        if not np.all(np.isfinite(e)):
            raise TrainingDivergence(
                f"party {self.party_id} produced non-finite evidence",
                {"epoch": epoch, "party": self.party_id,
                 "max_weight": max(float(np.max(np.abs(p))) for p in self.net.parameters())},
            )
        return e

    def forward(self, ids, epoch):
        return PartyMessage("forward", self.party_id, np.asarray(ids), self.evidence(ids, epoch),
                            epoch)

    def receive(self, msg):
        self.inbox.append(msg)
        if msg.direction != "backward" or msg.party != self.party_id:
            raise ContractViolation("passive parties only accept their own evidence gradients")
        self.opt.step(self.net.backward(msg.payload))


class ActiveParty(Party):
    """Holds labels; fuses opinions and drives the backward pass."""

    def __init__(self, sample_ids, block, labels, net, lr, momentum, prior=1.0):
        super().__init__(0, sample_ids, block, net, lr, momentum)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.prior = prior

    def step(self, ids, forward_msgs, epoch):
        """One batch: fuse, compute loss, update self, return backward messages."""
        own = self.evidence(ids, epoch)
        evidences = [own] + [m.payload for m in forward_msgs]
        y = self.labels[[self._pos[int(s)] for s in ids]]
        loss, fused, grads = ev.fused_evidential_loss(evidences, y, self.prior)
        mean_loss = float(loss.mean())
        if not np.isfinite(mean_loss):
            raise TrainingDivergence(
                "evidential loss became non-finite",
                {"epoch": epoch, "max_evidence": [float(np.max(e)) for e in evidences]},
            )
        n = len(ids)
        self.opt.step(self.net.backward(grads[0] / n))
        replies = [PartyMessage("backward", m.party, np.asarray(ids), g / n, epoch)
                   for m, g in zip(forward_msgs, grads[1:])]
        return mean_loss, fused.u, replies


@dataclass
class TrainingSet:
    """Stage-2 samples: one block per party slot plus labels."""

    sample_ids: np.ndarray
    blocks: list
    labels: np.ndarray
    filterable: np.ndarray  # samples the uncertainty filter may remove
    flipped: np.ndarray | None = None

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, mask):
        return TrainingSet(self.sample_ids[mask], [b[mask] for b in self.blocks],
                           self.labels[mask], self.filterable[mask],
                           None if self.flipped is None else self.flipped[mask])


@dataclass
class TrainState:
    n_samples: int
    epoch: int = 0
    active: np.ndarray = None
    u_sum: np.ndarray = None
    u_count: np.ndarray = None
    removed_at: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.n_samples, dtype=bool)
        self.u_sum = np.zeros(self.n_samples)
        self.u_count = np.zeros(self.n_samples, dtype=np.int64)

    def record(self, positions, u):
        np.add.at(self.u_sum, positions, u)
        np.add.at(self.u_count, positions, 1)

    def mean_uncertainty(self):
        return np.divide(self.u_sum, self.u_count, out=np.full(self.n_samples, np.nan),
                         where=self.u_count > 0)


class EvidentialModel:
    """Inference over the parties' evidence networks."""

    def __init__(self, nets, prior=1.0):
        self.nets = nets
        self.prior = prior

    def opinions(self, blocks):
        out = [ev.evidence_to_opinion(net.forward(x), prior=self.prior)
               for net, x in zip(self.nets, blocks)]
        params, ops = zip(*out)
        fused, _ = ev.fuse_all(ops)
        return list(params), list(ops), fused

    def predict_proba(self, blocks):
        _, _, fused = self.opinions(blocks)
        probs, u = ev.predict(ev.opinion_to_dirichlet(fused, prior=self.prior))
        return probs, u

    def predict(self, blocks):
        return self.predict_proba(blocks)[0].argmax(axis=1)


def make_parties(train, config, rng, nets=None):
    n_parties = len(train.blocks)
    if nets is None:
        nets = [build_evidence_net(b.shape[1], config.n_classes, config.hidden, config.depth,
                                   config.activation, rng) for b in train.blocks]
    active = ActiveParty(train.sample_ids, train.blocks[0], train.labels, nets[0],
                         config.lr, config.momentum, config.prior)
    passive = [Party(m, train.sample_ids, train.blocks[m], nets[m], config.lr, config.momentum)
               for m in range(1, n_parties)]
    return active, passive


def evaluate(model, test_blocks, test_labels, n_classes):
    if test_blocks is None:
        return None, None
    probs = model.predict_proba(test_blocks)
    if isinstance(probs, tuple):
        probs = probs[0]
    acc = accuracy(probs.argmax(axis=1), test_labels)
    auc = None
    if n_classes == 2 and len(np.unique(test_labels)) == 2:
        auc = compute_auc(probs[:, 1], test_labels)
    return acc, auc


def train_epoch(active, passive, train, state, config, bus, test=None):
    """Run one epoch of the message protocol over the active samples."""
    state.epoch += 1
    t = state.epoch
    rng = np.random.default_rng([config.seed, t])
    positions = rng.permutation(np.flatnonzero(state.active))
    losses = []
    for lo in range(0, len(positions), config.batch_size):
        pos = positions[lo:lo + config.batch_size]
        ids = train.sample_ids[pos]
        fwd = [bus.send(p.forward(ids, t)) for p in passive]
        loss, u, replies = active.step(ids, fwd, t)
        for p, msg in zip(passive, replies):
            p.receive(bus.send(msg))
        state.record(pos, u)
        losses.append(loss * len(pos))
    model = EvidentialModel([active.net] + [p.net for p in passive], config.prior)
    test_acc, test_auc = evaluate(model, *(test or (None, None)), config.n_classes)
    return {
        "epoch": t,
        "train_loss": float(np.sum(losses) / len(positions)),
        "test_acc": test_acc,
        "test_auc": test_auc,
        "active_samples": int(state.active.sum()),
        "tau_t": uncertainty_threshold(t, config.epochs, config.tau_0),
        "filtered_count": len(state.removed_at),
    }


def filter_samples(state, tau_t, filterable=None):
    """Drop active, filterable samples whose mean fused uncertainty exceeds ``tau_t``.

    Removed samples stay removed; the uncertainty window is reset.
    """
    if filterable is None:
        filterable = np.ones(state.n_samples, dtype=bool)
    mean_u = state.mean_uncertainty()
    candidates = state.active & filterable
    if np.any(candidates & (state.u_count == 0)):
        raise ContractViolation("some active samples have no uncertainty observations")
    drop = candidates & (mean_u > tau_t)
    remaining = state.active & ~drop
    if not remaining.any():
        raise EmptyTrainingSet(
            "uncertainty filtering would remove every training sample",
            {"epoch": state.epoch, "tau_t": tau_t,
             "mean_uncertainty_min": float(np.nanmin(mean_u[state.active]))},
        )
    for i in np.flatnonzero(drop):
        state.removed_at[int(i)] = state.epoch
    state.active = remaining
    state.u_sum[:] = 0.0
    state.u_count[:] = 0
    return state.active


def train_evfl(train, config, test=None, bus=None, filtering=True, metrics_path=None, nets=None):
    """Train the evidential VFL model; returns ``(model, state)``."""
    if len(train) == 0:
        raise EmptyTrainingSet("no training samples")
    rng = np.random.default_rng(config.seed)
    active, passive = make_parties(train, config, rng, nets)
    bus = bus or MessageBus()
    state = TrainState(len(train))
    out = open(metrics_path, "w") if metrics_path else None
    try:
        for _ in range(config.epochs):
            row = train_epoch(active, passive, train, state, config, bus, test)
            t = state.epoch
            if filtering and t % config.filter_every == 0 and t < config.epochs:
                filter_samples(state, row["tau_t"], train.filterable)
                row["filtered_count"] = len(state.removed_at)
                row["active_samples"] = int(state.active.sum())
            state.log.append(row)
            if out:
                out.write(json.dumps(row) + "\n")
    finally:
        if out:
            out.close()
    model = EvidentialModel([active.net] + [p.net for p in passive], config.prior)
    return model, state


def fit_softmax(train, config, test=None, metrics_path=None):
    """Cross-entropy split-learning model on the same kind of training set."""
    model = VerticalClassifier([b.shape[1] for b in train.blocks], config.n_classes,
                               config.hidden, config.depth, config.seed)
    out = open(metrics_path, "w") if metrics_path else None
    log = []

    def on_epoch(epoch, loss):
        acc, auc = evaluate(model, *(test or (None, None)), config.n_classes)
        row = {"epoch": epoch, "train_loss": loss, "test_acc": acc, "test_auc": auc,
               "active_samples": len(train), "tau_t": None, "filtered_count": 0}
        log.append(row)
        if out:
            out.write(json.dumps(row) + "\n")

    try:
        model.fit(train.blocks, train.labels, config.epochs, config.lr, config.momentum,
                  config.batch_size, config.seed, on_epoch=on_epoch)
    finally:
        if out:
            out.close()
    return model, log


# assembling stage-2 training sets


def overlap_set(parties, filterable=False):
    ids = parties[0].overlap_ids
    return TrainingSet(ids, overlap_blocks(parties), parties[0].labels_of(ids),
                       np.full(len(ids), filterable))


def concat_sets(*sets):
    sets = [s for s in sets if s is not None and len(s)]
    flipped = None
    if any(s.flipped is not None for s in sets):
        flipped = np.concatenate([s.flipped if s.flipped is not None
                                  else np.zeros(len(s), dtype=bool) for s in sets])
    return TrainingSet(
        np.concatenate([s.sample_ids for s in sets]),
        [np.vstack(bs) for bs in zip(*(s.blocks for s in sets))],
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.filterable for s in sets]),
        flipped,
    )


@dataclass
class StageOne:
    """Imputed non-overlap samples together with the labels Stage 1 assigned."""

    train: TrainingSet
    n_true_labeled: int
    n_pseudo: int
    n_candidates: int
    pseudo_labels: list


def stage_one(parties, config, self_train=True):
    """Impute non-overlap rows and label them (ground truth or pseudo-label).

    Active-party rows keep their true labels when the split recorded them;
    the rest are pseudo-labelled by the self-training model if
    ``self_train``, and dropped otherwise.
    """
    ids, owners, blocks = impute_nonoverlap(parties, compute_means(parties))
    labels = np.full(len(ids), UNLABELED, dtype=np.int64)
    from_active = owners == 0
    if from_active.any():
        labels[from_active] = parties[0].labels_of(ids[from_active])
    n_true = int((labels != UNLABELED).sum())
    candidates = labels == UNLABELED
    if not config.pseudo_label_active:
        candidates &= ~from_active
    pseudo = []
    if self_train and candidates.any():
        ov = overlap_set(parties)
        fst = train_fst(ov.blocks, ov.labels, config.n_classes, config.fst_epochs, config.lr,
                        config.momentum, config.batch_size, config.hidden, config.depth,
                        config.seed, config.fst_imputed_views)
        cand = np.flatnonzero(candidates)
        pseudo = assign_pseudo_labels(fst, ids[cand], [b[cand] for b in blocks], config.tau_p)
        by_id = {pl.sample_id: pl.label for pl in pseudo}
        for i in cand:
            labels[i] = by_id.get(int(ids[i]), UNLABELED)
    keep = labels != UNLABELED
    train = TrainingSet(ids[keep], [b[keep] for b in blocks], labels[keep],
                        np.ones(int(keep.sum()), dtype=bool))
    return StageOne(train, n_true, len(pseudo), int(candidates.sum()), pseudo)


def zero_impute_active(parties):
    """Active-party non-overlap rows with every other block set to zero."""
    p0 = parties[0]
    ids = p0.nonoverlap_ids
    lab = p0.labels_of(ids)
    keep = lab != UNLABELED
    ids = ids[keep]
    blocks = [p0.rows(ids)] + [np.zeros((len(ids), p.dim)) for p in parties[1:]]
    return TrainingSet(ids, blocks, lab[keep], np.zeros(len(ids), dtype=bool))


def random_match(parties, seed):
    """Pair active-party non-overlap rows with random passive non-overlap rows.

    Each passive party contributes a random permutation of its rows; the
    number of pairs is the smallest non-overlap count, so no row is reused.
    """
    p0 = parties[0]
    lab = p0.labels_of(p0.nonoverlap_ids)
    base = p0.nonoverlap_ids[lab != UNLABELED]
    n_pairs = min([len(base)] + [p.n_nonoverlap for p in parties[1:]])
    rng = np.random.default_rng(seed)
    base = rng.permutation(base)[:n_pairs]
    blocks = [p0.rows(base)]
    partners = [base]
    for p in parties[1:]:
        chosen = rng.permutation(p.nonoverlap_ids)[:n_pairs]
        partners.append(chosen)
        blocks.append(p.rows(chosen))
    ts = TrainingSet(base, blocks, p0.labels_of(base), np.zeros(n_pairs, dtype=bool))
    ts.partners = partners
    return ts


def _report(method, config, train, acc, auc, **extra):
    return {"method": method, "seed": config.seed, "test_acc": acc, "test_auc": auc,
            "n_train": len(train), **extra}


def run_risa(parties, config, test=None, self_train=True, evidential=True, impute=True,
             bus=None, metrics_path=None, dump_path=None, filtering=True):
    """Stage 1 (impute, self-train, pseudo-label) then Stage 2 training.

    ``test`` is ``(blocks, labels)`` of fully observed held-out samples.
    The switches reproduce the ablation variants: ``impute=False`` trains
    on the overlap alone, ``self_train=False`` skips pseudo-labelling and
    ``evidential=False`` replaces Stage 2 by the softmax split model.
    """
    if len(parties) != config.n_parties:
        raise ConfigError(f"config expects {config.n_parties} parties, got {len(parties)}")
    start = time.perf_counter()
    ov = overlap_set(parties, filterable=config.filter_overlap)
    s1 = stage_one(parties, config, self_train) if impute else None
    train = concat_sets(ov, s1.train if s1 else None)
    extra = {
        "n_overlap": len(ov),
        "n_imputed": len(s1.train) if s1 else 0,
        "n_pseudo": s1.n_pseudo if s1 else 0,
    }
    if evidential:
        model, state = train_evfl(train, config, test, bus, filtering, metrics_path)
        extra["n_filtered"] = len(state.removed_at)
        extra["final_active"] = int(state.active.sum())
        if dump_path and test is not None:
            params, ops, fused = model.opinions(test[0])
            dp = ev.opinion_to_dirichlet(fused, prior=config.prior)
            ev.dump_opinions(dump_path, ops, fused, dp, np.arange(len(test[1])))
    else:
        model, _ = fit_softmax(train, config, test, metrics_path)
        state = None
    acc, auc = evaluate(model, *(test or (None, None)), config.n_classes)
    report = _report(config.method, config, train, acc, auc, **extra)
    report["seconds"] = time.perf_counter() - start
    return model, state, report


def run_baseline(parties, config, mode, test=None, metrics_path=None):
    """Softmax baselines under the same split: local, vfl, local_vfl, random_match."""
    if mode not in BASELINES:
        raise ConfigError(f"unknown baseline {mode!r}")
    start = time.perf_counter()
    ov = overlap_set(parties)
    extra = {"n_overlap": len(ov)}
    if mode == "local":
        p0 = parties[0]
        lab = p0.labels
        keep = lab != UNLABELED
        train = TrainingSet(p0.row_ids[keep], [p0.data[keep]], lab[keep],
                            np.zeros(int(keep.sum()), dtype=bool))
        test = None if test is None else ([test[0][0]], test[1])
    elif mode == "vfl":
        train = ov
    elif mode == "local_vfl":
        train = concat_sets(ov, zero_impute_active(parties))
    else:
        matched = random_match(parties, config.seed)
        extra["n_matched"] = len(matched)
        train = concat_sets(ov, matched)
    model, _ = fit_softmax(train, config, test, metrics_path)
    acc, auc = evaluate(model, *(test or (None, None)), config.n_classes)
    report = _report(mode, config, train, acc, auc, **extra)
    report["seconds"] = time.perf_counter() - start
    return model, report


def run_method(method, parties, config, test=None, **kwargs):
    """Dispatch a method name to :func:`run_risa` or :func:`run_baseline`."""
    config = config.replace(method=method)
    if method in BASELINES:
        kwargs.pop("bus", None)
        kwargs.pop("dump_path", None)
        _, report = run_baseline(parties, config, method, test, kwargs.get("metrics_path"))
        return report
    flags = {
        "risa": dict(self_train=True, evidential=True),
        "imp": dict(self_train=False, evidential=False),
        "imp_st": dict(self_train=True, evidential=False),
        "imp_evfl": dict(self_train=False, evidential=True),
    }[method]
    _, _, report = run_risa(parties, config, test, **flags, **kwargs)
    return report
