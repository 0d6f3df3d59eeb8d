import numpy as np
import pytest

from conftest import finite_diff_vjp, rel_err
from sdenoise.scores import (
    AnalyticGaussianScore,
    GaussianMixtureScore,
    MlpScoreNet,
    score_at,
    vjp_at,
)


@pytest.fixture
def gaussian_full(schedule, rng):
    d = 5
    raw = rng.standard_normal((d, d))
    cov = raw @ raw.T + 0.5 * np.eye(d)
    return AnalyticGaussianScore(rng.standard_normal(d), cov, schedule)


class TestAnalyticGaussian:
    def test_isotropic_score_near_t_zero(self, schedule):
        model = AnalyticGaussianScore(np.zeros(2), 1.0, schedule)
        t_eps = 1e-3
        beta2 = schedule.beta_sq(t_eps)
        out = model.score(np.array([1.0, 2.0]), t_eps)
        np.testing.assert_allclose(out, -np.array([1.0, 2.0]) / (1.0 + beta2))

    def test_matches_precision_formula(self, gaussian_full, schedule, rng):
        x = rng.standard_normal(5)
        t = 0.4
        cov_t = gaussian_full.covariance + schedule.beta_sq(t) * np.eye(5)
        expected = -np.linalg.solve(cov_t, x - gaussian_full.mean)
        np.testing.assert_allclose(gaussian_full.score(x, t), expected, atol=1e-12)

    def test_vjp_is_constant_precision_apply(self, gaussian_full, schedule, rng):
        v = rng.standard_normal(5)
        t = 0.7
        cov_t = gaussian_full.covariance + schedule.beta_sq(t) * np.eye(5)
        np.testing.assert_allclose(
            gaussian_full.vjp(np.zeros(5), t, v), -np.linalg.solve(cov_t, v), atol=1e-12
        )

    def test_score_dim_matches_input(self, gaussian_full, rng):
        batch = rng.standard_normal((3, 5))
        assert gaussian_full.score(batch, 0.5).shape == (3, 5)

    def test_log_concavity_at_samples(self, gaussian_full, schedule, rng):
        # -score dotted with (x - alpha*mean) is nonnegative everywhere
        x = gaussian_full.mean + rng.standard_normal((50, 5)) * 3
        s = gaussian_full.score(x, 0.3)
        assert np.all(np.sum(-s * (x - gaussian_full.mean), axis=1) >= 0)

    def test_rejects_non_spd(self, schedule):
        with pytest.raises(ValueError):
            AnalyticGaussianScore(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), schedule)


class TestGaussianMixture:
    @pytest.fixture
    def mixture(self, schedule):
        return GaussianMixtureScore(
            [0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], 0.25, schedule
        )

    def test_zero_score_at_symmetry_point(self, mixture):
        np.testing.assert_allclose(mixture.score(np.zeros(2), 0.3), 0.0, atol=1e-12)

    def test_score_is_gradient_of_logpdf(self, mixture, rng):
        x = rng.standard_normal(2)
        t = 0.2
        h = 1e-5
        fd = np.array(
            [
                (mixture.logpdf(x + h * e, t) - mixture.logpdf(x - h * e, t)) / (2 * h)
                for e in np.eye(2)
            ]
        )
        assert rel_err(mixture.score(x, t), fd) < 1e-7

    def test_weights_validated(self, schedule):
        with pytest.raises(ValueError):
            GaussianMixtureScore([0.7, 0.7], [[0.0], [1.0]], 1.0, schedule)


class TestMlp:
    def test_forward_shapes(self, schedule, rng):
        net = MlpScoreNet(3, hidden=(8,), schedule=schedule, rng=rng)
        assert net.score(np.zeros(3), 0.5).shape == (3,)
        assert net.score(np.zeros((4, 3)), 0.5).shape == (4, 3)

    def test_rejects_t_zero(self, schedule, rng):
        net = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
        with pytest.raises(ValueError):
            net.score(np.zeros(2), 0.0)

    def test_non_finite_input_rejected(self, schedule, rng):
        net = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
        with pytest.raises(ValueError):
            score_at(net, np.array([np.nan, 0.0]), 0.5)
        with pytest.raises(ValueError):
            vjp_at(net, np.zeros(2), 0.5, np.array([np.inf, 0.0]))


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_mlp_vjp_matches_finite_differences(schedule, rng, activation):
    net = MlpScoreNet(4, hidden=(16, 16), activation=activation, schedule=schedule, rng=rng)
    for _ in range(10):
        x = rng.standard_normal(4)
        v = rng.standard_normal(4)
        t = rng.uniform(0.05, 1.0)
        fd = finite_diff_vjp(net.score, x, t, v)
        assert rel_err(net.vjp(x, t, v), fd) < 1e-4


def test_gaussian_vjp_matches_finite_differences(gaussian_full, rng):
    for _ in range(10):
        x = rng.standard_normal(5)
        v = rng.standard_normal(5)
        t = rng.uniform(0.05, 1.0)
        fd = finite_diff_vjp(gaussian_full.score, x, t, v)
        assert rel_err(gaussian_full.vjp(x, t, v), fd) < 1e-4


def test_mixture_vjp_matches_finite_differences(schedule, rng):
    mixture = GaussianMixtureScore(
        [0.3, 0.7], [[-1.0, 0.5], [1.2, -0.4]], [[0.3, 0.5], [0.4, 0.2]], schedule
    )
    for _ in range(10):
        x = rng.standard_normal(2)
        v = rng.standard_normal(2)
        t = rng.uniform(0.05, 1.0)
        fd = finite_diff_vjp(mixture.score, x, t, v)
        assert rel_err(mixture.vjp(x, t, v), fd) < 1e-4


def test_score_with_times_agrees_with_scalar_calls(schedule, rng):
    for model in (
        AnalyticGaussianScore(rng.standard_normal(3), np.array([0.5, 1.0, 2.0]), schedule),
        MlpScoreNet(3, hidden=(8,), schedule=schedule, rng=rng),
    ):
        x = rng.standard_normal((4, 3))
        t = rng.uniform(0.05, 1.0, size=4)
        batched = model.score_with_times(x, t)
        rows = np.stack([model.score(x[i], t[i]) for i in range(4)])
        np.testing.assert_allclose(batched, rows, atol=1e-12)
