"""Tests for the EM common-object localizer: E-step, M-step, kappa updates,
likelihood ascent, ablation models, and query scoring."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.special import expit, logsumexp

from conftest import random_unit, unit
from vmfmil.background import ObjectnessBackground, UniformBackground, VmfBackground
from vmfmil.col import (
    KAPPA_MIN,
    ColConfig,
    Gaussian,
    Prototypical,
    RandomInit,
    TukeyGaussian,
    Vmf,
    e_step,
    init_direction,
    m_step,
    marginal_log_likelihood,
    run_col,
    score_query,
    update_kappa,
)
from vmfmil.dataio import ProposalSet
from vmfmil.directional import ORDER0, EXACT, KappaRule, VmfParams
from vmfmil.errors import (
    DegenerateResultantError,
    DimensionMismatchError,
    ValidationError,
)


def make_pset(features, image_id="img", objectness=None):
    features = np.asarray(features, dtype=np.float64)
    p = features.shape[0]
    boxes = np.stack([[float(i), float(i), float(i + 2), float(i + 2)] for i in range(p)])
    return ProposalSet(image_id=image_id, boxes=boxes, features=features,
                       objectness=objectness)


def random_pset(rng, p, d, image_id="img"):
    feats = rng.standard_normal((p, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return make_pset(feats, image_id=image_id)


class TestEStep:
    def test_uniform_when_indifferent(self):
        # kappa=0 and a uniform background: every proposal equally likely.
        pset = random_pset(np.random.default_rng(0), 4, 3)
        w = e_step(unit([1.0, 0.0, 0.0]), 0.0, UniformBackground(), pset)
        assert np.allclose(w, 0.25)

    def test_two_proposal_hand_case(self):
        # Logits (ln 2, 0) must produce posteriors (2/3, 1/3).
        ln2 = math.log(2.0)
        x1 = np.array([ln2, math.sqrt(1.0 - ln2 * ln2)])
        pset = make_pset([x1, [0.0, 1.0]])
        w = e_step(np.array([1.0, 0.0]), 1.0, UniformBackground(), pset)
        assert np.allclose(w, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_matches_enumerated_bayes_posterior(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d, p = int(rng.integers(2, 7)), int(rng.integers(2, 9))
            pset = random_pset(rng, p, d)
            theta = random_unit(d, rng)
            kappa = float(rng.uniform(0.1, 30.0))
            bg = VmfBackground(VmfParams(random_unit(d, rng), float(rng.uniform(0, 10))))
            feats = pset.features.astype(np.float64)
            # Direct Bayes: posterior over which proposal is foreground.
            joint = np.exp(
                kappa * (feats @ theta)
                - bg.params.kappa * (feats @ bg.params.theta)
            )
            expected = joint / joint.sum()
            assert np.allclose(e_step(theta, kappa, bg, pset), expected, atol=1e-12)

    def test_background_shift_invariance(self):
        # Adding a constant to every background score leaves posteriors
        # unchanged: the softmax only sees score differences.
        rng = np.random.default_rng(2)
        pset = random_pset(rng, 6, 4)
        theta = random_unit(4, rng)
        base = e_step(theta, 5.0, UniformBackground(), pset)
        logits = 5.0 * (pset.features.astype(np.float64) @ theta) - 7.3
        shifted = np.exp(logits - logits.max())
        assert np.allclose(base, shifted / shifted.sum(), atol=1e-14)

    def test_gaussian_matches_vmf_at_matched_scale(self):
        # sigma^2 = 1/kappa makes the Gaussian logits an additive shift of the
        # vMF logits on unit-norm inputs, so the E-steps coincide.
        rng = np.random.default_rng(3)
        for _ in range(10):
            d, p = int(rng.integers(2, 8)), int(rng.integers(2, 8))
            pset = random_pset(rng, p, d)
            theta = random_unit(d, rng)
            kappa = float(rng.uniform(0.5, 40.0))
            w_vmf = e_step(theta, kappa, UniformBackground(), pset)
            w_gauss = e_step(
                theta, kappa, UniformBackground(), pset,
                model=Gaussian(sigma=1.0 / math.sqrt(kappa)),
            )
            assert np.allclose(w_vmf, w_gauss, atol=1e-12)

    def test_dimension_mismatch(self):
        pset = random_pset(np.random.default_rng(0), 3, 4)
        with pytest.raises(DimensionMismatchError):
            e_step(unit([1.0, 0.0]), 1.0, UniformBackground(), pset)


class TestMStep:
    def test_one_hot_axes(self):
        psets = [make_pset(np.eye(2), "a"), make_pset(np.eye(2)[::-1].copy(), "b")]
        weights = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
        # Selected features are (1,0) and (0,1).
        theta = m_step(weights, psets)
        assert np.allclose(theta, unit([1.0, 1.0]))
        mean = m_step(weights, psets, model=Gaussian())
        assert np.allclose(mean, [0.5, 0.5])

    def test_gaussian_vmf_disagree(self):
        psets = [make_pset(np.eye(2), "a"), make_pset(np.eye(2)[::-1].copy(), "b")]
        weights = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
        v = m_step(weights, psets)
        g = m_step(weights, psets, model=Gaussian())
        assert not np.allclose(v, g)
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert np.linalg.norm(g) == pytest.approx(1.0 / math.sqrt(2.0))

    def test_beats_random_directions(self):
        rng = np.random.default_rng(4)
        psets = [random_pset(rng, 5, 3, f"i{k}") for k in range(4)]
        weights = [np.abs(rng.dirichlet(np.ones(5))) for _ in psets]
        theta = m_step(weights, psets)
        resultant = sum(w @ p.features.astype(np.float64) for w, p in zip(weights, psets))

        def surrogate(direction):
            return float(resultant @ direction)

        best = surrogate(theta)
        dirs = rng.standard_normal((10_000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        assert best >= float(np.max(dirs @ resultant))

    def test_degenerate_resultant(self):
        psets = [make_pset(np.array([[1.0, 0.0], [-1.0, 0.0]]))]
        with pytest.raises(DegenerateResultantError):
            m_step([np.array([0.5, 0.5])], psets)


class TestKappaUpdate:
    def test_order0_hand_value(self):
        d = 512
        x = np.zeros(d)
        x[0] = 1.0
        pset = make_pset(np.stack([x, -x]))
        # Soft labels (0.535, 0.465) give resultant length 0.07 with M=1.
        kappa = update_kappa([np.array([0.535, 0.465])], [pset], ORDER0)
        assert kappa == pytest.approx(512 * 0.07, rel=1e-12)
        assert kappa == pytest.approx(35.84, rel=1e-12)

    def test_clamped_below(self):
        x = np.array([1.0, 0.0])
        pset = make_pset(np.stack([x, -x]))
        kappa = update_kappa([np.array([0.5, 0.5])], [pset], ORDER0)
        assert kappa == KAPPA_MIN

    def test_constant_rule_rejected(self):
        pset = make_pset(np.eye(2))
        with pytest.raises(ValidationError):
            update_kappa([np.array([1.0, 0.0])], [pset], KappaRule.constant(5.0))

    def test_exact_rule_round_trip(self):
        rng = np.random.default_rng(5)
        psets = [random_pset(rng, 4, 8, f"i{k}") for k in range(6)]
        weights = [rng.dirichlet(np.ones(4)) for _ in psets]
        kappa = update_kappa(weights, psets, EXACT)
        from vmfmil.directional import bessel_ratio

        r = sum(w @ p.features.astype(np.float64) for w, p in zip(weights, psets))
        rbar = float(np.linalg.norm(r)) / len(psets)
        assert bessel_ratio(8, kappa) == pytest.approx(rbar, abs=1e-8)


class TestLikelihood:
    def test_single_proposal_value(self):
        x = unit([0.6, 0.8])
        pset = make_pset([x])
        val = marginal_log_likelihood(x, 3.5, UniformBackground(), [pset])
        # Proposal features are stored in float32, so exactness is ~1e-7.
        assert val == pytest.approx(3.5, abs=1e-6)

    def test_matches_direct_logsumexp(self):
        rng = np.random.default_rng(6)
        psets = [random_pset(rng, 5, 4, f"i{k}") for k in range(3)]
        theta = random_unit(4, rng)

        def rows(p):
            f = p.features.astype(np.float64)
            # The model projects stored single-precision rows back to the
            # sphere; the oracle must score the same unit vectors.
            return f / np.linalg.norm(f, axis=1, keepdims=True)

        expected = sum(float(logsumexp(8.0 * (rows(p) @ theta))) for p in psets)
        got = marginal_log_likelihood(theta, 8.0, UniformBackground(), psets)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_em_ascent_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m, p, d = int(rng.integers(1, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
            psets = [random_pset(rng, p, d, f"i{k}") for k in range(m)]
            bg = VmfBackground(
                VmfParams(random_unit(d, rng), float(rng.uniform(0, 5)))
            )
            kappa = float(rng.uniform(0.5, 20.0))
            theta = random_unit(d, rng)
            prev = marginal_log_likelihood(theta, kappa, bg, psets)
            for _ in range(5):
                weights = [e_step(theta, kappa, bg, ps) for ps in psets]
                theta = m_step(weights, psets)
                cur = marginal_log_likelihood(theta, kappa, bg, psets)
                assert cur >= prev - 1e-9
                prev = cur


class TestInit:
    def test_prototypical_hand_case(self):
        a = make_pset(np.array([[1.0, 0.0], [0.0, 1.0]]), "a")
        b = make_pset(np.array([[0.0, 1.0], [1.0, 0.0]]), "b")
        assert np.allclose(init_direction([a, b], Prototypical()), unit([1.0, 1.0]))

    def test_antipodal_degenerate(self):
        a = make_pset(np.array([[1.0, 0.0]]), "a")
        b = make_pset(np.array([[-1.0, 0.0]]), "b")
        with pytest.raises(DegenerateResultantError):
            init_direction([a, b], Prototypical())

    def test_random_init_seeded(self):
        a = make_pset(np.eye(3))
        v1 = init_direction([a], RandomInit(seed=4))
        v2 = init_direction([a], RandomInit(seed=4))
        assert np.array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)

    def test_empty_support(self):
        with pytest.raises(ValidationError):
            init_direction([], Prototypical())


class TestRunCol:
    def test_zero_iters_returns_init(self):
        rng = np.random.default_rng(8)
        psets = [random_pset(rng, 4, 5, f"i{k}") for k in range(3)]
        config = ColConfig(max_iters=0, kappa_init=2.0)
        result = run_col(config, psets)
        assert np.allclose(result.theta, init_direction(psets, Prototypical()))
        assert len(result.loglik_trace) == 1
        assert len(result.soft_labels) == 3
        assert result.image_ids == ["i0", "i1", "i2"]

    def test_trace_is_nondecreasing(self):
        rng = np.random.default_rng(9)
        psets = [random_pset(rng, 6, 4, f"i{k}") for k in range(4)]
        result = run_col(ColConfig(kappa_init=5.0, max_iters=8), psets)
        trace = result.loglik_trace
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))
        assert len(result.theta_trace) == len(trace)

    def test_default_kappa_is_tenth_of_d(self):
        rng = np.random.default_rng(10)
        psets = [random_pset(rng, 4, 30, f"i{k}") for k in range(2)]
        result = run_col(ColConfig(max_iters=0), psets)
        assert result.kappa_final == pytest.approx(3.0)

    def test_adaptive_kappa_rule_runs(self):
        rng = np.random.default_rng(11)
        theta = random_unit(6, rng)
        draws = np.stack([theta] * 3) + 0.05 * rng.standard_normal((3, 6))
        draws /= np.linalg.norm(draws, axis=1, keepdims=True)
        psets = [make_pset(np.stack([draws[k], random_unit(6, rng)]), f"i{k}")
                 for k in range(3)]
        result = run_col(ColConfig(kappa_rule=EXACT, kappa_init=1.0), psets)
        assert result.kappa_final > KAPPA_MIN
        assert np.isfinite(result.kappa_final)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ColConfig(max_iters=-1)
        with pytest.raises(ValidationError):
            ColConfig(lam=0.0)
        with pytest.raises(ValidationError):
            ColConfig(kappa_init=-2.0)

    def test_tukey_model_runs(self):
        rng = np.random.default_rng(12)
        feats = np.abs(rng.standard_normal((4, 5)))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        psets = [make_pset(feats, "i0")]
        result = run_col(ColConfig(model=TukeyGaussian(beta=0.5), kappa_init=1.0), psets)
        assert np.isfinite(result.loglik_trace[-1])

    def test_result_json(self):
        rng = np.random.default_rng(13)
        psets = [random_pset(rng, 3, 4, "i0")]
        obj = run_col(ColConfig(kappa_init=1.0), psets).to_json()
        assert set(obj) >= {"theta", "kappa_final", "top_index", "soft_labels"}


class TestScoreQuery:
    def test_logit_hand_value(self):
        theta = np.array([1.0, 0.0])
        x = np.array([0.9, math.sqrt(1 - 0.81)])
        obj = 1.0 - math.exp(-2.0)  # log background score == -2
        pset = make_pset([x], objectness=np.array([obj]))
        probs, logits = score_query(theta, 10.0, ObjectnessBackground(), 1.0, pset)
        # Feature/objectness rows are stored in float32: exactness ~1e-6.
        assert logits[0] == pytest.approx(11.0, abs=1e-5)
        assert probs[0] == pytest.approx(expit(11.0), abs=1e-5)

    def test_lambda_invariant_ranking(self):
        rng = np.random.default_rng(14)
        pset = random_pset(rng, 12, 6)
        theta = random_unit(6, rng)
        orders = []
        for lam in (0.01, 1.0, 100.0):
            probs, logits = score_query(theta, 4.0, UniformBackground(), lam, pset)
            orders.append(np.argsort(-logits, kind="stable"))
            # Probabilities shift with lambda but stay order-consistent.
            assert np.array_equal(np.argsort(-probs, kind="stable"), orders[-1])
        assert np.array_equal(orders[0], orders[1])
        assert np.array_equal(orders[1], orders[2])
