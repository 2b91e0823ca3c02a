"""Evidence, Dirichlet parameters and subjective opinions.

All functions are vectorised: a trailing axis of length K holds the classes
and any leading axes are treated as a batch. Gradients are written out by
hand so that the whole chain

    evidence -> opinion -> reduced Yager fusion -> Dirichlet -> loss

can be back-propagated without an autodiff framework.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, StateError

MASS_TOL = 1e-9
MIN_UNCERTAINTY = 1e-12


def _prior_vector(prior, k):
    a = np.broadcast_to(np.asarray(prior, dtype=np.float64), (k,)).copy()
    if np.any(a <= 0):
        raise ContractViolation("class prior must be strictly positive")
    return a


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray  # (..., K)
    strength: np.ndarray  # (...)
    prior: np.ndarray  # (K,)

    @property
    def n_classes(self):
        return self.alpha.shape[-1]

    @property
    def evidence(self):
        return self.alpha - self.prior

    def to_json(self):
        return {"alpha": np.asarray(self.alpha).tolist(), "S": np.asarray(self.strength).tolist()}


@dataclass(frozen=True)
class Opinion:
    """Belief masses ``b`` over K classes plus one uncertainty mass ``u``."""

    b: np.ndarray  # (..., K)
    u: np.ndarray  # (...)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "u", u)
        if b.ndim < 1 or b.shape[:-1] != u.shape:
            raise ContractViolation(f"belief shape {b.shape} does not match uncertainty {u.shape}")
        if b.shape[-1] < 2:
            raise ContractViolation("an opinion needs at least two classes")
        if np.any(b < 0) or np.any(u < 0):
            raise ContractViolation("belief and uncertainty masses must be non-negative")

    @classmethod
    def vacuous(cls, k, batch_shape=()):
        return cls(np.zeros(batch_shape + (k,)), np.ones(batch_shape))

    @property
    def n_classes(self):
        return self.b.shape[-1]

    def mass(self):
        return self.u + self.b.sum(axis=-1)

    def check_mass(self, tol=MASS_TOL):
        err = np.max(np.abs(self.mass() - 1.0)) if self.u.size else 0.0
        if err > tol:
            raise ContractViolation(f"opinion masses sum to 1 +/- {err:.3g}, outside {tol}")

    def to_json(self):
        return {"b": self.b.tolist(), "u": self.u.tolist()}

    def __getitem__(self, idx):
        return Opinion(self.b[idx], self.u[idx])


def evidence_to_opinion(e, k=None, prior=1.0):
    """Map non-negative evidence to Dirichlet parameters and an opinion.

    ``alpha = e + a``, ``S = sum(alpha)``, ``b = e / S`` and ``u = sum(a) / S``.
    With the unit prior this is the usual ``u = K / S``.
    """
    e = np.asarray(e, dtype=np.float64)
    if k is None:
        k = e.shape[-1]
    if k < 2:
        raise ContractViolation("need at least two classes")
    if e.shape[-1] != k:
        raise ContractViolation(f"evidence has {e.shape[-1]} entries, expected {k}")
    if not np.all(np.isfinite(e)):
        raise ContractViolation("evidence must be finite")
    if np.any(e < 0):
        raise ContractViolation("evidence must be non-negative")
    a = _prior_vector(prior, k)
    alpha = e + a
    s = alpha.sum(axis=-1)
    b = e / s[..., None]
    u = a.sum() / s
    return DirichletParams(alpha, s, a), Opinion(b, u)


def opinion_backward(params, grad_b, grad_u):
    """Gradient w.r.t. evidence given gradients w.r.t. the opinion it produced."""
    s = params.strength[..., None]
    b = params.evidence / s
    u = params.prior.sum() / params.strength
    inner = (grad_b * b).sum(axis=-1) + grad_u * u
    return (grad_b - inner[..., None]) / s


@dataclass
class FusionTape:
    """Inputs of one pairwise fusion, kept for the backward pass."""

    b1: np.ndarray
    u1: np.ndarray
    b2: np.ndarray
    u2: np.ndarray
    consumed: bool = field(default=False)

    def backward(self, grad_b, grad_u):
        """Return ``((db1, du1), (db2, du2))`` given gradients of the fused opinion."""
        if self.consumed:
            raise StateError("fusion tape has already been back-propagated")
        self.consumed = True
        gu = np.asarray(grad_u, dtype=np.float64)[..., None]
        gb = np.asarray(grad_b, dtype=np.float64)
        b1, u1, b2, u2 = self.b1, self.u1[..., None], self.b2, self.u2[..., None]
        sum1 = b1.sum(axis=-1, keepdims=True)
        sum2 = b2.sum(axis=-1, keepdims=True)
        # C = sum1 * sum2 - <b1, b2>
        db1 = gb * (b2 + u2) + gu * (sum2 - b2)
        db2 = gb * (b1 + u1) + gu * (sum1 - b1)
        du1 = (gb * b2).sum(axis=-1) + gu[..., 0] * u2[..., 0]
        du2 = (gb * b1).sum(axis=-1) + gu[..., 0] * u1[..., 0]
        return (db1, du1), (db2, du2)


def conflict(m1, m2):
    """Mass assigned to mismatched class pairs, ``sum_{i != j} b1_i b2_j``."""
    c = m1.b.sum(axis=-1) * m2.b.sum(axis=-1) - (m1.b * m2.b).sum(axis=-1)
    return np.maximum(c, 0.0)


def fuse_pair(m1, m2):
    """Reduced Yager combination of two opinions.

    Agreeing mass and mass backed by the other side's ignorance stay on the
    class; conflicting mass moves to uncertainty::

        b_k = b1_k b2_k + b1_k u2 + b2_k u1
        u   = u1 u2 + C

    No renormalisation is needed since the result sums to
    ``(sum(b1) + u1) * (sum(b2) + u2) = 1``.
    """
    if m1.b.shape != m2.b.shape:
        raise ContractViolation(f"cannot fuse opinions of shapes {m1.b.shape} and {m2.b.shape}")
    b = m1.b * m2.b + m1.b * m2.u[..., None] + m2.b * m1.u[..., None]
    u = m1.u * m2.u + conflict(m1, m2)
    fused = Opinion(b, u)
    expected = m1.mass() * m2.mass()
    if np.any(np.abs(fused.mass() - expected) > MASS_TOL):
        raise AssertionError("reduced Yager fusion lost mass")
    return fused, FusionTape(m1.b, m1.u, m2.b, m2.u)


def fuse_all(opinions):
    """Fold :func:`fuse_pair` left to right in party order.

    The rule is not associative in general, so the order is fixed:
    ``((m1 + m2) + m3) + ... + mM``.
    """
    opinions = list(opinions)
    if not opinions:
        raise ContractViolation("need at least one opinion to fuse")
    acc = opinions[0]
    tapes = []
    for op in opinions[1:]:
        acc, tape = fuse_pair(acc, op)
        tapes.append(tape)
    return acc, tapes


def opinion_to_dirichlet(op, k=None, prior=1.0, min_uncertainty=MIN_UNCERTAINTY):
    """``S = sum(a) / u`` and ``alpha_k = b_k S + a_k``.

    ``u`` is clamped from below at ``min_uncertainty``; a fully certain
    opinion has no finite Dirichlet counterpart.
    """
    k = op.n_classes if k is None else k
    if op.n_classes != k:
        raise ContractViolation(f"opinion has {op.n_classes} classes, expected {k}")
    a = _prior_vector(prior, k)
    u = np.maximum(op.u, min_uncertainty)
    s = a.sum() / u
    alpha = op.b * s[..., None] + a
    return DirichletParams(alpha, alpha.sum(axis=-1), a)


def dirichlet_backward(op, grad_alpha, prior=1.0, min_uncertainty=MIN_UNCERTAINTY):
    """Gradients w.r.t. ``(b, u)`` of :func:`opinion_to_dirichlet`."""
    a_sum = _prior_vector(prior, op.n_classes).sum()
    clamped = op.u < min_uncertainty
    u = np.maximum(op.u, min_uncertainty)
    s = a_sum / u
    grad_b = grad_alpha * s[..., None]
    grad_u = -(grad_alpha * op.b).sum(axis=-1) * s / u
    grad_u = np.where(clamped, 0.0, grad_u)
    return grad_b, grad_u


def predict(params):
    """Dirichlet mean ``alpha / S`` and uncertainty ``sum(a) / S``."""
    probs = params.alpha / params.strength[..., None]
    return probs, params.prior.sum() / params.strength


def evidential_loss(params, y):
    """Per-sample ``sum_k y_k (log S - log alpha_k)`` and its gradient in alpha.

    ``y`` is one-hot with the same shape as ``alpha``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != params.alpha.shape:
        raise ContractViolation(f"label shape {y.shape} != alpha shape {params.alpha.shape}")
    s = params.alpha.sum(axis=-1)
    y_sum = y.sum(axis=-1)
    loss = y_sum * np.log(s) - (y * np.log(params.alpha)).sum(axis=-1)
    grad = y_sum[..., None] / s[..., None] - y / params.alpha
    return loss, grad


def backprop_fusion(tapes, grad_b, grad_u, params):
    """Chain the fused-opinion gradient back to every party's evidence.

    ``tapes`` must come from the :func:`fuse_all` call that combined the
    opinions derived from ``params`` (one :class:`DirichletParams` per
    party, in party order). Each tape can be used once.
    """
    params = list(params)
    if len(tapes) != len(params) - 1:
        raise ContractViolation(f"{len(tapes)} tapes do not match {len(params)} parties")
    if any(t.consumed for t in tapes):
        raise StateError("stale fusion tape")
    per_party = [None] * len(params)
    gb, gu = grad_b, grad_u
    for m in range(len(params) - 1, 0, -1):
        (gb, gu), per_party[m] = tapes[m - 1].backward(gb, gu)
    per_party[0] = (gb, gu)
    return [opinion_backward(p, g_b, g_u) for p, (g_b, g_u) in zip(params, per_party)]


def fused_evidential_loss(evidences, labels, prior=1.0):
    """Forward and backward of the full evidence-to-loss chain.

    ``evidences`` is a list of ``(N, K)`` arrays (one per party) and
    ``labels`` integer classes. Returns per-sample losses, the fused
    opinion and one ``(N, K)`` evidence gradient per party.
    """
    k = evidences[0].shape[-1]
    params, opinions = zip(*(evidence_to_opinion(e, k, prior) for e in evidences))
    fused, tapes = fuse_all(opinions)
    dp = opinion_to_dirichlet(fused, k, prior)
    y = np.eye(k)[np.asarray(labels)]
    loss, g_alpha = evidential_loss(dp, y)
    g_b, g_u = dirichlet_backward(fused, g_alpha, prior)
    grads = backprop_fusion(tapes, g_b, g_u, params)
    return loss, fused, grads


def dempster_combine(m1, m2):
    """Dempster's normalised rule on the same frame, kept as a comparator."""
    c = conflict(m1, m2)
    if np.any(c >= 1.0):
        raise ContractViolation("Dempster's rule is undefined under total conflict")
    norm = (1.0 - c)
    b = (m1.b * m2.b + m1.b * m2.u[..., None] + m2.b * m1.u[..., None]) / norm[..., None]
    return Opinion(b, m1.u * m2.u / norm)


def dump_opinions(path, party_opinions, fused, params, sample_ids):
    """Write one JSON line per sample with every party's opinion and the fusion."""
    with open(path, "w") as fh:
        for i, sid in enumerate(sample_ids):
            row = {
                "sample_id": int(sid),
                "parties": [op[i].to_json() for op in party_opinions],
                "fused": fused[i].to_json(),
                "alpha": params.alpha[i].tolist(),
                "S": float(params.strength[i]),
            }
            fh.write(json.dumps(row) + "\n")
