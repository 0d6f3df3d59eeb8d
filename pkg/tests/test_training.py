import numpy as np
import pytest

from sdenoise.errors import TrainingDivergedError
from sdenoise.scores import (
    AnalyticGaussianScore,
    GaussianMixtureScore,
    MlpScoreNet,
    TrainConfig,
    dsm_loss,
    load_model,
    save_model,
    train_dsm,
)


class DeltaAtZeroScore:
    """Exact conditional score for data pinned at the origin."""

    def __init__(self, schedule):
        self.schedule = schedule

    def score_with_times(self, x, t):
        beta2 = np.array([self.schedule.beta_sq(ti) for ti in t])
        return -x / beta2[:, None]


def test_exact_conditional_score_gives_zero_loss(schedule, rng):
    batch = np.zeros((32, 3))
    loss = dsm_loss(DeltaAtZeroScore(schedule), batch, schedule, rng)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_loss_nonnegative(schedule, rng):
    model = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
    batch = rng.standard_normal((16, 2))
    assert dsm_loss(model, batch, schedule, rng) >= 0.0


def test_loss_rejects_empty_batch_and_t_zero(schedule, rng):
    model = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
    with pytest.raises(ValueError):
        dsm_loss(model, np.empty((0, 2)), schedule, rng)
    with pytest.raises(ValueError):
        dsm_loss(model, rng.standard_normal((4, 2)), schedule, rng, t_min=0.0)


def test_zero_steps_leaves_parameters_unchanged(schedule, rng):
    model = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
    before_w, before_b = model.get_params()
    train_dsm(model, rng.standard_normal((64, 2)), TrainConfig(steps=0), schedule)
    for a, b in zip(before_w, model.weights):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(before_b, model.biases):
        np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_raises_with_step_index(schedule, rng):
    model = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=rng)
    config = TrainConfig(steps=200, lr=1e6, seed=0)
    with pytest.raises(TrainingDivergedError) as exc:
        train_dsm(model, rng.standard_normal((64, 2)), config, schedule)
    assert exc.value.step >= 0


def test_trainconfig_validation():
    with pytest.raises(ValueError):
        TrainConfig(t_min=0.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.mark.slow
def test_training_reduces_loss_on_gaussian_toy(schedule):
    rng = np.random.default_rng(0)
    data = 0.3 + 0.8 * rng.standard_normal((2000, 2))
    model = MlpScoreNet(2, hidden=(32, 32), schedule=schedule, rng=np.random.default_rng(1))
    config = TrainConfig(batch_size=128, steps=1500, lr=2e-3, t_min=0.05, seed=2)
    _, trace = train_dsm(model, data, config, schedule)
    assert trace.step_loss[-200:].mean() < trace.step_loss[:200].mean()
    assert trace.epoch_mean.size >= 1


@pytest.mark.slow
def test_delta_dataset_learns_conditional_score(schedule):
    # all x0 = mu: the DSM minimizer is -(x_t - mu) / beta_t^2
    mu = np.array([0.5, -0.25])
    data = np.tile(mu, (512, 1))
    model = MlpScoreNet(2, hidden=(48, 48), schedule=schedule, rng=np.random.default_rng(3))
    config = TrainConfig(batch_size=256, steps=4000, lr=2e-3, t_min=0.05, seed=4)
    model, _ = train_dsm(model, data, config, schedule)
    rng = np.random.default_rng(5)
    for t in (0.2, 0.5):
        beta2 = schedule.beta_sq(t)
        probes = mu + np.sqrt(beta2) * rng.standard_normal((64, 2))
        want = -(probes - mu) / beta2
        got = model.score(probes, t)
        cos = np.sum(got * want, axis=1) / (
            np.linalg.norm(got, axis=1) * np.linalg.norm(want, axis=1) + 1e-12
        )
        assert cos.mean() > 0.95


@pytest.mark.slow
def test_mixture_training_matches_analytic_sign_structure(schedule):
    # two well-separated modes on the x-axis; the score component along the
    # inter-mode axis must flip sign at each mode like the analytic score
    rng = np.random.default_rng(6)
    comp = rng.integers(0, 2, size=3000)
    centers = np.array([[-1.5, 0.0], [1.5, 0.0]])
    data = centers[comp] + 0.3 * rng.standard_normal((3000, 2))
    model = MlpScoreNet(2, hidden=(64, 64), schedule=schedule, rng=np.random.default_rng(7))
    config = TrainConfig(batch_size=256, steps=5000, lr=2e-3, t_min=0.05, seed=8)
    model, _ = train_dsm(model, data, config, schedule)
    analytic = GaussianMixtureScore([0.5, 0.5], centers, 0.09, schedule)
    t = 0.1
    line = np.stack([np.linspace(-2.5, 2.5, 41), np.zeros(41)], axis=1)
    got = model.score(line, t)[:, 0]
    want = analytic.score(line, t)[:, 0]
    mask = np.abs(want) > 0.5  # skip near-zero crossings
    assert np.all(np.sign(got[mask]) == np.sign(want[mask]))


def test_model_serialization_roundtrip(tmp_path, schedule, rng):
    model = MlpScoreNet(3, hidden=(8, 8), activation="tanh", schedule=schedule, rng=rng)
    path = tmp_path / "model.bin"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.schedule.sigma == schedule.sigma
    assert loaded.activation == "tanh"
    x = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(model.score(x, 0.4), loaded.score(x, 0.4))


def test_model_file_bytes_deterministic(tmp_path, schedule):
    for name in ("a.bin", "b.bin"):
        model = MlpScoreNet(2, hidden=(8,), schedule=schedule, rng=np.random.default_rng(11))
        save_model(tmp_path / name, model)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_analytic_gaussian_score_usable_in_dsm_loss(schedule, rng):
    # exact prior score is not the conditional score, so loss > 0 but finite
    model = AnalyticGaussianScore(np.zeros(2), 1.0, schedule)
    loss = dsm_loss(model, rng.standard_normal((64, 2)), schedule, rng)
    assert np.isfinite(loss) and loss > 0
