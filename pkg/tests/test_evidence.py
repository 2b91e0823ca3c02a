import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from risa import evidence as ev
from risa.errors import ContractViolation, StateError
from risa.evidence import Opinion


def yager_oracle(b1, u1, b2, u2):
    """Classic Yager combination on explicit focal sets, written as nested loops.

    Focal elements are the singletons and the whole frame; mass of an empty
    intersection goes to the frame.
    """
    k = len(b1)
    frame = frozenset(range(k))
    m1 = {frozenset([i]): b1[i] for i in range(k)}
    m1[frame] = u1
    m2 = {frozenset([i]): b2[i] for i in range(k)}
    m2[frame] = u2
    out = {}
    for a, ma in m1.items():
        for b, mb in m2.items():
            inter = a & b
            key = inter if inter else frame
            out[key] = out.get(key, 0.0) + ma * mb
    beliefs = [out.get(frozenset([i]), 0.0) for i in range(k)]
    return beliefs, out.get(frame, 0.0)


def random_opinion(rng, k, batch=()):
    w = rng.dirichlet(np.ones(k + 1), size=batch or None)
    return Opinion(w[..., :k], w[..., k])


@st.composite
def opinion_pairs(draw):
    k = draw(st.integers(2, 10))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_opinion(rng, k), random_opinion(rng, k)


class TestEvidenceToOpinion:
    def test_zero_evidence_is_vacuous(self):
        params, op = ev.evidence_to_opinion(np.zeros(5))
        np.testing.assert_array_equal(params.alpha, np.ones(5))
        assert params.strength == 5
        np.testing.assert_array_equal(op.b, np.zeros(5))
        assert op.u == 1.0

    def test_worked_example(self):
        params, op = ev.evidence_to_opinion([3.0, 1.0])
        np.testing.assert_allclose(params.alpha, [4.0, 2.0])
        assert params.strength == pytest.approx(6.0)
        np.testing.assert_allclose(op.b, [0.5, 1 / 6], atol=1e-12)
        assert op.u == pytest.approx(1 / 3, abs=1e-12)

    def test_masses_sum_to_one(self):
        rng = np.random.default_rng(0)
        e = rng.exponential(3.0, size=(1000, 7))
        _, op = ev.evidence_to_opinion(e)
        np.testing.assert_allclose(op.mass(), 1.0, atol=1e-12)

    def test_negative_evidence_rejected(self):
        with pytest.raises(ContractViolation):
            ev.evidence_to_opinion([1.0, -0.1])

    def test_needs_two_classes(self):
        with pytest.raises(ContractViolation):
            ev.evidence_to_opinion([1.0])

    def test_more_evidence_less_uncertainty(self):
        rng = np.random.default_rng(3)
        e = rng.exponential(2.0, size=(500, 4)) + 1e-3
        for lam in (1.5, 2.0, 10.0):
            _, a = ev.evidence_to_opinion(e)
            _, b = ev.evidence_to_opinion(lam * e)
            assert np.all(b.u < a.u)


class TestFusePair:
    def test_vacuous_identity_is_exact(self):
        rng = np.random.default_rng(1)
        m = random_opinion(rng, 6, (50,))
        fused, _ = ev.fuse_pair(m, Opinion.vacuous(6, (50,)))
        np.testing.assert_array_equal(fused.b, m.b)
        np.testing.assert_array_equal(fused.u, m.u)

    def test_total_conflict_gives_total_uncertainty(self):
        m1 = Opinion([1.0, 0.0], 0.0)
        m2 = Opinion([0.0, 1.0], 0.0)
        fused, _ = ev.fuse_pair(m1, m2)
        np.testing.assert_array_equal(fused.b, [0.0, 0.0])
        assert fused.u == 1.0
        assert ev.conflict(m1, m2) == 1.0

    def test_worked_example(self):
        m1 = Opinion([0.6, 0.2], 0.2)
        m2 = Opinion([0.4, 0.4], 0.2)
        # straight-line evaluation of the combination formulas
        b0 = 0.6 * 0.4 + 0.6 * 0.2 + 0.4 * 0.2
        b1 = 0.2 * 0.4 + 0.2 * 0.2 + 0.4 * 0.2
        c = 0.6 * 0.4 + 0.2 * 0.4
        u = 0.2 * 0.2 + c
        assert (b0, b1, c, u) == pytest.approx((0.44, 0.20, 0.32, 0.36), abs=1e-15)
        fused, _ = ev.fuse_pair(m1, m2)
        np.testing.assert_allclose(fused.b, [b0, b1], atol=1e-15)
        assert fused.u == pytest.approx(u, abs=1e-15)
        assert ev.conflict(m1, m2) == pytest.approx(c, abs=1e-15)

    @pytest.mark.parametrize("k", [2, 3, 5, 9])
    def test_matches_set_based_yager(self, k):
        rng = np.random.default_rng(k)
        for _ in range(20):
            m1, m2 = random_opinion(rng, k), random_opinion(rng, k)
            fused, _ = ev.fuse_pair(m1, m2)
            b, u = yager_oracle(m1.b, float(m1.u), m2.b, float(m2.u))
            np.testing.assert_allclose(fused.b, b, atol=1e-14)
            assert fused.u == pytest.approx(u, abs=1e-14)

    @settings(max_examples=300, deadline=None)
    @given(opinion_pairs())
    def test_mass_conservation(self, pair):
        fused, _ = ev.fuse_pair(*pair)
        assert abs(fused.mass() - 1.0) < 1e-9
        assert np.all(fused.b >= 0) and fused.u >= 0

    @settings(max_examples=300, deadline=None)
    @given(opinion_pairs())
    def test_commutative(self, pair):
        a, _ = ev.fuse_pair(*pair)
        b, _ = ev.fuse_pair(*reversed(pair))
        np.testing.assert_allclose(a.b, b.b, atol=1e-12)
        assert abs(a.u - b.u) < 1e-12

    def test_certain_disagreeing_opinions(self):
        for k in range(2, 8):
            for i in range(k):
                for j in range(k):
                    if i == j:
                        continue
                    fused, _ = ev.fuse_pair(Opinion(np.eye(k)[i], 0.0), Opinion(np.eye(k)[j], 0.0))
                    assert fused.u == 1.0

    def test_mismatched_classes(self):
        with pytest.raises(ContractViolation):
            ev.fuse_pair(Opinion.vacuous(2), Opinion.vacuous(3))

    def test_dempster_differs_under_conflict(self):
        m1 = Opinion([0.9, 0.0], 0.1)
        m2 = Opinion([0.0, 0.9], 0.1)
        yager, _ = ev.fuse_pair(m1, m2)
        dempster = ev.dempster_combine(m1, m2)
        assert yager.u > 0.8
        assert dempster.u < 0.1


class TestFuseAll:
    def test_single_opinion_unchanged(self):
        m = Opinion([0.3, 0.5], 0.2)
        fused, tapes = ev.fuse_all([m])
        assert fused is m and tapes == []

    def test_vacuous_folds(self):
        m = Opinion([0.3, 0.1, 0.4], 0.2)
        fused, _ = ev.fuse_all([m, Opinion.vacuous(3), Opinion.vacuous(3)])
        np.testing.assert_array_equal(fused.b, m.b)
        assert fused.u == m.u

    def test_left_fold(self):
        rng = np.random.default_rng(5)
        m1, m2, m3 = (random_opinion(rng, 4, (10,)) for _ in range(3))
        fused, tapes = ev.fuse_all([m1, m2, m3])
        manual = ev.fuse_pair(ev.fuse_pair(m1, m2)[0], m3)[0]
        np.testing.assert_array_equal(fused.b, manual.b)
        np.testing.assert_array_equal(fused.u, manual.u)
        assert len(tapes) == 2

    def test_empty(self):
        with pytest.raises(ContractViolation):
            ev.fuse_all([])


class TestDirichlet:
    def test_vacuous_is_uniform(self):
        dp = ev.opinion_to_dirichlet(Opinion.vacuous(2))
        assert dp.strength == pytest.approx(2.0)
        np.testing.assert_allclose(dp.alpha, [1.0, 1.0])
        np.testing.assert_allclose(ev.predict(dp)[0], [0.5, 0.5])

    def test_worked_example(self):
        dp = ev.opinion_to_dirichlet(Opinion([0.3, 0.2], 0.5))
        assert dp.strength == pytest.approx(4.0, abs=1e-12)
        np.testing.assert_allclose(dp.alpha, [2.2, 1.8], atol=1e-12)
        np.testing.assert_allclose(ev.predict(dp)[0], [0.55, 0.45], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(8)
        e = rng.exponential(5.0, size=(200, 6))
        params, op = ev.evidence_to_opinion(e)
        back = ev.opinion_to_dirichlet(op)
        np.testing.assert_allclose(back.alpha, params.alpha, rtol=1e-9)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(2)
        fused, _ = ev.fuse_all([random_opinion(rng, 5, (100,)) for _ in range(3)])
        dp = ev.opinion_to_dirichlet(fused)
        probs, _ = ev.predict(dp)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(dp.alpha >= 1.0)

    def test_zero_uncertainty_is_clamped(self):
        dp = ev.opinion_to_dirichlet(Opinion([1.0, 0.0], 0.0))
        assert np.all(np.isfinite(dp.alpha))
        assert dp.strength == pytest.approx(2e12 + 2.0, rel=1e-9)


class TestPredict:
    def test_worked_example(self):
        params, _ = ev.evidence_to_opinion([3.0, 1.0])
        probs, u = ev.predict(params)
        np.testing.assert_allclose(probs, [2 / 3, 1 / 3], atol=1e-12)
        assert u == pytest.approx(1 / 3, abs=1e-12)

    def test_uniform(self):
        params, _ = ev.evidence_to_opinion(np.zeros(3))
        probs, u = ev.predict(params)
        np.testing.assert_allclose(probs, np.full(3, 1 / 3))
        assert u == 1.0


class TestEvidentialLoss:
    def test_worked_example(self):
        params, _ = ev.evidence_to_opinion([3.0, 1.0])
        loss, _ = ev.evidential_loss(params, [1.0, 0.0])
        assert loss == pytest.approx(math.log(6 / 4), abs=1e-12)
        assert loss == pytest.approx(0.4054651, abs=1e-7)

    @pytest.mark.parametrize("k", [2, 3, 7, 10])
    def test_uniform_is_log_k(self, k):
        params, _ = ev.evidence_to_opinion(np.zeros(k))
        loss, _ = ev.evidential_loss(params, np.eye(k)[0])
        assert loss == pytest.approx(math.log(k), abs=1e-12)

    def test_concentrated_evidence_limit(self):
        k = 4
        for s in (10.0, 1e3, 1e6):
            alpha = np.array([s - (k - 1), 1.0, 1.0, 1.0])
            params = ev.DirichletParams(alpha, alpha.sum(), np.ones(k))
            loss, _ = ev.evidential_loss(params, np.eye(k)[0])
            assert loss == pytest.approx(math.log(s / (s - (k - 1))), rel=1e-9)
        assert loss < 1e-5

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        params, _ = ev.evidence_to_opinion(rng.exponential(3.0, size=(1000, 5)))
        y = np.eye(5)[rng.integers(0, 5, 1000)]
        loss, _ = ev.evidential_loss(params, y)
        assert np.all(loss >= 0)

    def test_gradient_formula(self):
        alpha = np.array([4.0, 2.0, 3.0])
        params = ev.DirichletParams(alpha, alpha.sum(), np.ones(3))
        _, g = ev.evidential_loss(params, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(g, [1 / 9, 1 / 9 - 1 / 2, 1 / 9])


def chain_loss(evidences, labels):
    loss, _, _ = ev.fused_evidential_loss(evidences, labels)
    return loss.sum()


def fd_evidence_grad(evidences, labels, h=1e-6):
    grads = []
    for e in evidences:
        g = np.zeros_like(e)
        for idx in np.ndindex(e.shape):
            old = e[idx]
            e[idx] = old + h
            up = chain_loss(evidences, labels)
            e[idx] = old - h
            down = chain_loss(evidences, labels)
            e[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


class TestBackpropFusion:
    def test_single_party_closed_form(self):
        e = np.array([[3.0, 1.0, 0.5]])
        _, _, grads = ev.fused_evidential_loss([e], [0])
        s = e.sum() + 3
        # d/de_j [log S - log(e_0 + 1)] = 1/S - [j == 0] / alpha_0
        np.testing.assert_allclose(grads[0], [[1 / s - 1 / 4.0, 1 / s, 1 / s]], atol=1e-12)

    @pytest.mark.parametrize("m", [1, 2, 3, 5])
    def test_matches_finite_differences(self, m):
        rng = np.random.default_rng(10 + m)
        evidences = [rng.exponential(2.0, size=(6, 4)) + 0.05 for _ in range(m)]
        labels = rng.integers(0, 4, 6)
        _, _, grads = ev.fused_evidential_loss(evidences, labels)
        numeric = fd_evidence_grad(evidences, labels)
        a = np.concatenate([g.ravel() for g in grads])
        n = np.concatenate([g.ravel() for g in numeric])
        assert np.linalg.norm(a - n) / np.linalg.norm(n) < 1e-4

    def test_vacuous_coparty(self):
        rng = np.random.default_rng(0)
        e = rng.exponential(2.0, size=(5, 3))
        y = rng.integers(0, 3, 5)
        _, _, alone = ev.fused_evidential_loss([e], y)
        _, _, pair = ev.fused_evidential_loss([e, np.zeros((5, 3))], y)
        np.testing.assert_allclose(pair[0], alone[0], atol=1e-12)

    def test_stale_tape(self):
        rng = np.random.default_rng(1)
        ops = [random_opinion(rng, 3, (2,)) for _ in range(2)]
        params = [ev.evidence_to_opinion(np.ones((2, 3)))[0]] * 2
        _, tapes = ev.fuse_all(ops)
        g = (np.ones((2, 3)), np.ones(2))
        ev.backprop_fusion(tapes, *g, params)
        with pytest.raises(StateError):
            ev.backprop_fusion(tapes, *g, params)


def test_opinion_validation():
    with pytest.raises(ContractViolation):
        Opinion([0.5, -0.1], 0.6)
    with pytest.raises(ContractViolation):
        Opinion([[0.5, 0.1]], [0.4, 0.4])
    with pytest.raises(ContractViolation):
        Opinion([0.5, 0.3], 0.4).check_mass()


def test_dump_opinions(tmp_path):
    import json

    rng = np.random.default_rng(0)
    e = [rng.exponential(size=(3, 2)) for _ in range(2)]
    params, ops = zip(*(ev.evidence_to_opinion(x) for x in e))
    fused, _ = ev.fuse_all(ops)
    dp = ev.opinion_to_dirichlet(fused)
    path = tmp_path / "ops.jsonl"
    ev.dump_opinions(path, ops, fused, dp, [7, 8, 9])
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["sample_id"] for r in rows] == [7, 8, 9]
    assert rows[0]["fused"]["u"] == pytest.approx(float(fused.u[0]))
    assert len(rows[0]["parties"]) == 2
