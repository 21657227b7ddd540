"""Domain types and exact moment-propagation primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentsyn.core import (
    AffinePolicy,
    DimensionMismatchError,
    Dimensions,
    MomentMatrix,
    QuadraticForm,
    StateMoment,
    SynthesisProblem,
    SystemStage,
    propagate_moment,
    propagation_residual,
    quad_expectation,
)


def scalar_stage(f=0.0, a=0.0, b=0.0, w=0.0):
    return SystemStage(
        f=np.array([f]),
        A=np.array([[a]]),
        B=np.array([[b]]),
        sigma_w=np.array([[w]]),
    )


def moment_from(data, n, m):
    return MomentMatrix(np.asarray(data, dtype=float), n, m)


class TestTypes:
    def test_dimensions_validation(self):
        with pytest.raises(ValueError):
            Dimensions(n=0, m=1, N=1)
        with pytest.raises(ValueError):
            Dimensions(n=1, m=0, N=1)
        with pytest.raises(ValueError):
            Dimensions(n=1, m=1, N=-1)
        d = Dimensions(n=2, m=2, N=60, s=3)
        assert d.d == 5

    def test_stage_requires_psd_noise(self):
        with pytest.raises(ValueError):
            scalar_stage(w=-1.0)

    def test_stage_asymmetric_noise_warns_and_symmetrizes(self):
        with pytest.warns(UserWarning):
            stage = SystemStage(
                f=np.zeros(2),
                A=np.eye(2),
                B=np.eye(2),
                sigma_w=np.array([[1.0, 0.5], [0.0, 1.0]]),
            )
        np.testing.assert_allclose(stage.sigma_w, [[1.0, 0.25], [0.25, 1.0]])

    def test_moment_blocks(self):
        data = np.arange(16, dtype=float).reshape(4, 4)
        data = 0.5 * (data + data.T)
        S = moment_from(data, 2, 1)
        assert S.sigma11 == data[0, 0]
        np.testing.assert_allclose(S.sigma12, data[0, 1:3])
        np.testing.assert_allclose(S.sigma13, data[0, 3:])
        np.testing.assert_allclose(S.Sigma22, data[1:3, 1:3])
        np.testing.assert_allclose(S.Sigma23, data[1:3, 3:])
        np.testing.assert_allclose(S.Sigma33, data[3:, 3:])
        np.testing.assert_allclose(S.Sigma32, S.Sigma23.T)
        np.testing.assert_allclose(S.state_marginal().data, data[:3, :3])

    def test_state_moment_dirac(self):
        sm = StateMoment.dirac([2.0, -1.0])
        np.testing.assert_allclose(sm.mean, [2.0, -1.0])
        np.testing.assert_allclose(sm.cov, np.zeros((2, 2)), atol=1e-12)
        assert sm.sigma11 == 1.0

    def test_state_moment_mean_cov(self):
        sm = StateMoment.from_mean_cov([1.0], [[0.25]])
        np.testing.assert_allclose(sm.Sigma22, [[1.25]])

    def test_affine_policy_clips_small_negative(self):
        pol = AffinePolicy(
            k1=np.zeros(1), K2=np.zeros((1, 1)), sigma_v=np.array([[-1e-10]])
        )
        assert pol.sigma_v[0, 0] >= 0.0

    def test_affine_policy_rejects_indefinite(self):
        with pytest.raises(ValueError):
            AffinePolicy(
                k1=np.zeros(1), K2=np.zeros((1, 1)), sigma_v=np.array([[-1e-3]])
            )


class TestPropagationResidual:
    def test_zero_system_zero_moments(self):
        stage = scalar_stage()
        sigma = moment_from(np.diag([1.0, 0.0, 0.0]), 1, 1)
        plus = StateMoment(np.diag([1.0, 0.0]), 1)
        R = propagation_residual(sigma, plus, stage)
        np.testing.assert_allclose(R, np.zeros((2, 2)), atol=1e-14)

    def test_identity_dynamics_copies_state(self):
        stage = scalar_stage(a=1.0)
        corner = np.array([[1.0, 0.3], [0.3, 2.0]])
        data = np.zeros((3, 3))
        data[:2, :2] = corner
        sigma = moment_from(data, 1, 1)
        plus = StateMoment(corner, 1)
        R = propagation_residual(sigma, plus, stage)
        np.testing.assert_allclose(R, np.zeros((2, 2)), atol=1e-14)

    def test_hand_expanded_scalar_instance(self):
        # E x+^2 = a^2 E x^2 + 2ab E xu + b^2 E u^2 + w
        #        = 0.25 + 0 + 1 + 0.2 = 1.45 for identity second moments.
        stage = scalar_stage(a=0.5, b=1.0, w=0.2)
        sigma = moment_from(np.eye(3), 1, 1)
        plus = StateMoment(np.diag([1.0, 1.45]), 1)
        R = propagation_residual(sigma, plus, stage)
        np.testing.assert_allclose(R, np.zeros((2, 2)), atol=1e-14)

    def test_dimension_mismatch_is_structured(self):
        stage = SystemStage(
            f=np.zeros(2), A=np.eye(2), B=np.ones((2, 1)), sigma_w=np.eye(2)
        )
        sigma = moment_from(np.eye(3), 1, 1)
        plus = StateMoment(np.eye(3), 2)
        with pytest.raises(DimensionMismatchError):
            propagation_residual(sigma, plus, stage)


class TestPropagateMoment:
    def test_matches_hand_expansion(self):
        stage = scalar_stage(a=0.5, b=1.0, w=0.2)
        sigma = moment_from(np.eye(3), 1, 1)
        out = propagate_moment(sigma, stage)
        np.testing.assert_allclose(out.data, np.diag([1.0, 1.45]), atol=1e-14)

    def test_constant_dynamics_gives_dirac_at_shift(self):
        stage = scalar_stage(f=3.0)
        sigma = moment_from(np.eye(3), 1, 1)
        out = propagate_moment(sigma, stage)
        np.testing.assert_allclose(out.mean, [3.0])
        np.testing.assert_allclose(out.cov, [[0.0]], atol=1e-12)

    def test_deterministic_propagation_of_dirac(self):
        stage = SystemStage(
            f=np.array([1.0, -1.0]),
            A=np.array([[0.5, 0.1], [0.0, 0.8]]),
            B=np.zeros((2, 1)),
            sigma_w=np.zeros((2, 2)),
        )
        xbar = np.array([2.0, 4.0])
        z = np.concatenate([[1.0], xbar, [0.0]])
        sigma = moment_from(np.outer(z, z), 2, 1)
        out = propagate_moment(sigma, stage)
        np.testing.assert_allclose(out.mean, stage.f + stage.A @ xbar, atol=1e-12)
        np.testing.assert_allclose(out.cov, np.zeros((2, 2)), atol=1e-12)

    def test_residual_of_propagated_moment_vanishes(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n, m = rng.integers(1, 4), rng.integers(1, 3)
            G = rng.standard_normal((1 + n + m, 1 + n + m))
            S = G @ G.T
            S /= S[0, 0]
            sigma = moment_from(S, n, m)
            stage = SystemStage(
                f=rng.standard_normal(n),
                A=rng.standard_normal((n, n)),
                B=rng.standard_normal((n, m)),
                sigma_w=np.eye(n),
            )
            out = propagate_moment(sigma, stage)
            R = propagation_residual(sigma, out, stage)
            scale = max(1.0, np.linalg.norm(out.data))
            assert np.linalg.norm(R) <= 1e-12 * scale
            # Closure: the propagated marginal is PSD with unit corner.
            assert out.sigma11 == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.eigvalsh(out.data)[0] >= -1e-10 * scale


class TestQuadExpectation:
    def test_identity_pair(self):
        sigma = moment_from(np.eye(3), 1, 1)
        assert quad_expectation(sigma, QuadraticForm(np.eye(3))) == pytest.approx(3.0)

    def test_picks_second_state_moment(self):
        sigma = moment_from(np.diag([1.0, 4.0, 0.0]), 1, 1)
        form = QuadraticForm(np.diag([0.0, 1.0, 0.0]))
        assert quad_expectation(sigma, form) == pytest.approx(4.0)

    def test_initial_dirac_squared_norm(self):
        xbar = np.array([-10.0, 0.0])
        z = np.concatenate([[1.0], xbar, [0.0, 0.0]])
        sigma = moment_from(np.outer(z, z), 2, 2)
        form = QuadraticForm(np.diag([0.0, 1.0, 1.0, 0.0, 0.0]))
        assert quad_expectation(sigma, form) == pytest.approx(100.0)

    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=-5.0, max_value=5.0),
        st.floats(min_value=-5.0, max_value=5.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        d = 4

        def sym():
            G = rng.standard_normal((d, d))
            return 0.5 * (G + G.T)

        S1, S2, M = sym(), sym(), sym()
        S1[0, 0] = S2[0, 0] = 1.0
        a = quad_expectation(moment_from(alpha * S1 + beta * S2, 2, 1), QuadraticForm(M))
        b = alpha * quad_expectation(moment_from(S1, 2, 1), QuadraticForm(M)) + beta * quad_expectation(
            moment_from(S2, 2, 1), QuadraticForm(M)
        )
        assert a == pytest.approx(b, abs=1e-9 * max(1.0, abs(b)))


class TestSynthesisProblem:
    def test_gamma_only_in_tail_mode(self):
        stage = scalar_stage(a=0.5, b=1.0, w=1.0)
        cost = QuadraticForm(np.diag([0.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            SynthesisProblem(
                dims=Dimensions(n=1, m=1, N=1),
                stages=[stage],
                costs=[cost, cost],
                constraints=[],
                initial=StateMoment.dirac([0.0]),
                mode="finite",
                gamma=0.5,
            )
        with pytest.raises(ValueError):
            SynthesisProblem(
                dims=Dimensions(n=1, m=1, N=1),
                stages=[stage],
                costs=[cost, cost],
                constraints=[],
                initial=StateMoment.dirac([0.0]),
                mode="stationary_tail",
            )

    def test_stage_count_checked(self):
        stage = scalar_stage(a=0.5, b=1.0, w=1.0)
        cost = QuadraticForm(np.diag([0.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            SynthesisProblem(
                dims=Dimensions(n=1, m=1, N=2),
                stages=[stage],
                costs=[cost, cost, cost],
                constraints=[],
                initial=StateMoment.dirac([0.0]),
                mode="finite",
            )
