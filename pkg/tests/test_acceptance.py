"""End-to-end acceptance criteria.

One test per criterion; each prints a single PASS/FAIL line (run with
``pytest tests/test_acceptance.py -v -s`` to see them all). Tolerances are
pinned here and nowhere else.
"""

import json
import time

import numpy as np
import pytest
import scipy.integrate

from conftest import finite_diff_vjp, rel_err
from test_guidance import dense_pigdm_reference
from sdenoise import cli
from sdenoise.guidance import GuidanceParams, LinearOperator, pigdm_scores, tweedie_denoise, tweedie_vjp
from sdenoise.metrics import psnr
from sdenoise.oracle import gaussian_posterior, grid_posterior
from sdenoise.problems import (
    InverseProblem,
    default_sprite_library,
    fit_gaussian,
    gen_sprite_noise,
    sample_gaussian,
    sine_std_profile,
    smooth_image_prior,
)
from sdenoise.sampler import SamplerConfig, sample_posterior
from sdenoise.scores import (
    AnalyticGaussianScore,
    GaussianMixtureScore,
    MlpScoreNet,
    TrainConfig,
    train_dsm,
)
from sdenoise.sde import DiffusionSchedule

RULES = ("pigdm", "dps", "projection")

# Guidance strengths tuned once on the linear-Gaussian benchmark; frozen.
TUNED_LAMBDA = {"pigdm": 0.1, "dps": 0.1, "projection": 0.1}


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] acceptance {criterion}: {detail}")
    assert ok, f"acceptance {criterion}: {detail}"


@pytest.fixture(scope="module")
def sched():
    return DiffusionSchedule(sigma=25.0)


@pytest.mark.acceptance
def test_criterion_1_gaussian_posterior_recovery(sched):
    d = 8
    rng = np.random.default_rng(7)
    mu_x, mu_n = 0.5 * np.ones(d), 0.2 * np.ones(d)
    a = LinearOperator.identity(d)
    y = (mu_x + rng.standard_normal(d)) + (mu_n + rng.standard_normal(d))
    problem = InverseProblem(A=a, y=y)
    post = gaussian_posterior(a, y, (mu_x, 1.0), (mu_n, 1.0))
    s_x = AnalyticGaussianScore(mu_x, 1.0, sched)
    s_n = AnalyticGaussianScore(mu_n, 1.0, sched)
    details = []
    ok = True
    for rule in RULES:
        lam = TUNED_LAMBDA[rule]
        config = SamplerConfig(
            steps=600, chains=2000, seed=11, schedule=sched,
            guidance=GuidanceParams(rule=rule, lambda_prime=lam, kappa_prime=lam),
        )
        start = time.perf_counter()
        run = sample_posterior(problem, s_x, s_n, config)
        elapsed = time.perf_counter() - start
        mean_err = rel_err(run.x0_hat.mean(axis=0), post.mean)
        cov_err = rel_err(np.cov(run.x0_hat.T), post.covariance)
        ok &= mean_err < 0.05 and cov_err < 0.15 and elapsed < 60.0
        details.append(f"{rule}: mean {mean_err:.3f}<0.05 cov {cov_err:.3f}<0.15 {elapsed:.1f}s<60s")
    report("criterion 1 (gaussian posterior, all rules)", ok, "; ".join(details))


@pytest.mark.acceptance
def test_criterion_2_compressed_sensing_oracle(sched):
    rng = np.random.default_rng(42)
    d, m = 32, 16
    a_mat = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, d))
    a = LinearOperator.dense(a_mat, kind="random-gaussian")
    mu_x = 0.5 * np.ones(d)
    var_n = sine_std_profile((1, m), avg_std=0.2) ** 2
    x_star = mu_x + rng.standard_normal(d)
    y = a.apply(x_star) + np.sqrt(var_n) * rng.standard_normal(m)
    problem = InverseProblem(A=a, y=y)
    post = gaussian_posterior(a, y, (mu_x, 1.0), (np.zeros(m), var_n))
    s_x = AnalyticGaussianScore(mu_x, 1.0, sched)
    s_n = AnalyticGaussianScore(np.zeros(m), var_n, sched)

    # non-identity AA^T solve path against the dense reference
    params = GuidanceParams(rule="pigdm", lambda_prime=0.1, kappa_prime=0.1)
    t_probe = 0.35
    x_t, n_t = rng.standard_normal(d), rng.standard_normal(m)
    pair = pigdm_scores(a, y, x_t, n_t, t_probe, s_x, s_n, params, sched)
    ref_x, ref_n = dense_pigdm_reference(
        a_mat, y, x_t, n_t, t_probe, s_x, s_n,
        params.r_squared(t_probe, sched), params.q_squared(t_probe, sched), sched,
    )
    solve_err = max(rel_err(pair.grad_x, ref_x), rel_err(pair.grad_n, ref_n))

    config = SamplerConfig(steps=600, chains=2000, seed=3, schedule=sched, guidance=params)
    start = time.perf_counter()
    run = sample_posterior(problem, s_x, s_n, config)
    elapsed = time.perf_counter() - start
    mean_err = rel_err(run.x0_hat.mean(axis=0), post.mean)
    cov_err = rel_err(np.cov(run.x0_hat.T), post.covariance)
    ok = mean_err < 0.05 and cov_err < 0.15 and solve_err < 1e-8 and elapsed < 60.0
    report(
        "criterion 2 (compressed sensing oracle)",
        ok,
        f"mean {mean_err:.3f}<0.05 cov {cov_err:.3f}<0.15 "
        f"dense-ref {solve_err:.2e}<1e-8 {elapsed:.1f}s<60s",
    )


@pytest.mark.acceptance
def test_criterion_3_bimodal_posterior(sched):
    a = LinearOperator.identity(1)
    y = np.array([0.6])
    problem = InverseProblem(A=a, y=y)
    prior_x = GaussianMixtureScore([0.5, 0.5], [[-1.5], [1.5]], 0.09, sched)
    prior_n = AnalyticGaussianScore(np.zeros(1), 1.0, sched)
    grid = grid_posterior(problem, prior_x, prior_n, [(-4.0, 4.0, 801)])

    config = SamplerConfig(
        steps=600, chains=5000, seed=5, schedule=sched,
        guidance=GuidanceParams(rule="dps", lambda_prime=0.1, kappa_prime=0.1),
    )
    run = sample_posterior(problem, prior_x, prior_n, config)
    samples = run.x0_hat[:, 0]

    edges = np.linspace(-4.0, 4.0, 33)
    hist, _ = np.histogram(samples, bins=edges)
    p_hat = hist / samples.size
    idx = np.clip(np.searchsorted(edges, grid.points[:, 0], side="right") - 1, 0, 31)
    p_grid = np.zeros(32)
    np.add.at(p_grid, idx, grid.probs)
    tv = 0.5 * np.abs(p_hat - p_grid).sum()

    # bimodality: both modes carry mass (no MAP collapse)
    left = np.mean(samples < 0)
    ok = tv < 0.1 and 0.02 < left < 0.98
    report(
        "criterion 3 (bimodal posterior)",
        ok,
        f"TV {tv:.3f}<0.1, left-mode mass {left:.3f} (both modes populated)",
    )


@pytest.mark.acceptance
def test_criterion_4_dsm_training(sched):
    rng = np.random.default_rng(0)
    mean = np.array([0.3, -0.2])
    cov = np.array([[1.0, 0.4], [0.4, 0.7]])
    chol = np.linalg.cholesky(cov)
    data = mean + rng.standard_normal((4000, 2)) @ chol.T
    analytic = AnalyticGaussianScore(mean, cov, sched)
    model = MlpScoreNet(2, hidden=(64, 64), activation="silu", schedule=sched,
                        rng=np.random.default_rng(1))
    config = TrainConfig(batch_size=256, steps=5000, lr=2e-3, momentum=0.9,
                         t_min=0.05, seed=2)
    start = time.perf_counter()
    model, _ = train_dsm(model, data, config, sched)
    elapsed = time.perf_counter() - start

    prec = np.linalg.inv(cov)
    probe_rng = np.random.default_rng(123)
    pts = mean + probe_rng.standard_normal((400, 2)) @ chol.T
    mahal = np.einsum("bi,ij,bj->b", pts - mean, prec, pts - mean)
    pts = pts[mahal <= 4.0]  # inside the 2-sigma region
    ok = elapsed < 300.0
    details = [f"{elapsed:.0f}s<300s"]
    for t in (0.1, 0.5):
        want = analytic.score(pts, t)
        got = model.score(pts, t)
        cos = np.sum(want * got, axis=1) / (
            np.linalg.norm(want, axis=1) * np.linalg.norm(got, axis=1) + 1e-12
        )
        ok &= cos.mean() >= 0.95
        details.append(f"t={t}: cos {cos.mean():.3f}>=0.95")
    report("criterion 4 (DSM training)", ok, "; ".join(details))


@pytest.mark.acceptance
def test_criterion_5_derivative_correctness(sched):
    rng = np.random.default_rng(31)
    full_cov = np.array([[1.0, 0.3, 0.0], [0.3, 0.8, 0.2], [0.0, 0.2, 1.2]])
    models = {
        "gaussian-diag": AnalyticGaussianScore(rng.standard_normal(3),
                                               np.array([0.5, 1.0, 2.0]), sched),
        "gaussian-full": AnalyticGaussianScore(rng.standard_normal(3), full_cov, sched),
        "mixture": GaussianMixtureScore([0.4, 0.6], [[-1.0, 0.0, 0.5], [1.0, 0.2, -0.5]],
                                        [[0.3, 0.5, 0.4], [0.6, 0.2, 0.8]], sched),
        "mlp": MlpScoreNet(3, hidden=(24, 24), schedule=sched,
                           rng=np.random.default_rng(8)),
    }
    ok = True
    details = []
    for name, model in models.items():
        worst_vjp = 0.0
        worst_tweedie = 0.0
        for _ in range(10):
            x = rng.standard_normal(3)
            v = rng.standard_normal(3)
            t = rng.uniform(0.05, 1.0)
            fd = finite_diff_vjp(model.score, x, t, v)
            worst_vjp = max(worst_vjp, rel_err(model.vjp(x, t, v), fd))
            fd_tw = finite_diff_vjp(
                lambda xx, tt: tweedie_denoise(model, xx, tt, sched), x, t, v
            )
            worst_tweedie = max(
                worst_tweedie, rel_err(tweedie_vjp(model, x, t, sched, v), fd_tw)
            )
        ok &= worst_vjp < 1e-3 and worst_tweedie < 1e-3
        details.append(f"{name}: vjp {worst_vjp:.1e}, tweedie {worst_tweedie:.1e}")
    report("criterion 5 (derivative correctness, all < 1e-3)", ok, "; ".join(details))


@pytest.mark.acceptance
def test_criterion_6_schedule_correctness(sched):
    beta0 = sched.beta(0.0)
    rng = np.random.default_rng(17)
    worst = 0.0
    for t in rng.uniform(1e-4, 1.0, size=20):
        quad, _ = scipy.integrate.quad(lambda s: sched.diffusion_coeff(s) ** 2, 0.0, t)
        worst = max(worst, abs(sched.beta_sq(t) - quad) / quad)
    ok = beta0 == 0.0 and worst < 1e-6
    report(
        "criterion 6 (schedule correctness)",
        ok,
        f"beta(0)={beta0} (exact zero), worst quadrature rel err {worst:.2e}<1e-6",
    )


@pytest.mark.acceptance
def test_criterion_7_guidance_monotonicity(sched):
    from sdenoise.guidance import consistency_weights, dps_scores, projection_scores

    rng = np.random.default_rng(99)
    d = 6
    a = LinearOperator.identity(d)
    prior = AnalyticGaussianScore(np.zeros(d), 1.0, sched)
    y = rng.standard_normal(d)
    lam = 1e-3
    t = 0.5
    ok = True
    details = []
    for rule in RULES:
        params = GuidanceParams(rule=rule, lambda_prime=lam, kappa_prime=lam)
        descents = 0
        for _ in range(10):
            x_t, n_t = 3 * rng.standard_normal(d), 3 * rng.standard_normal(d)
            if rule == "projection":
                z = rng.standard_normal(d)
                pair = projection_scores(a, y, x_t, n_t, t, sched, params, None, z=z)
                w_x, w_n = consistency_weights(rule, params, t, sched, pair.residual_norm)
                x2, n2 = x_t + w_x * pair.grad_x, n_t + w_n * pair.grad_n
                alpha, beta = sched.kernel_params(t)
                y_hat = alpha * y + beta * a.apply(z)
                before = np.linalg.norm(y_hat - a.apply(x_t) - n_t)
                after = np.linalg.norm(y_hat - a.apply(x2) - n2)
            else:
                fn = pigdm_scores if rule == "pigdm" else dps_scores
                pair = fn(a, y, x_t, n_t, t, prior, prior, params, sched)
                w_x, w_n = consistency_weights(rule, params, t, sched, pair.residual_norm)
                x2, n2 = x_t + w_x * pair.grad_x, n_t + w_n * pair.grad_n

                def resid(xv, nv):
                    return np.linalg.norm(
                        y
                        - a.apply(tweedie_denoise(prior, xv, t, sched))
                        - tweedie_denoise(prior, nv, t, sched)
                    )

                before, after = resid(x_t, n_t), resid(x2, n2)
            descents += after < before
        ok &= descents == 10
        details.append(f"{rule}: {descents}/10 states descend")
    report("criterion 7 (guidance monotonicity)", ok, "; ".join(details))


@pytest.mark.acceptance
def test_criterion_8_timing_ordering(sched):
    d, steps, repeats = 256, 600, 5
    rng = np.random.default_rng(0)
    problem = InverseProblem(A=LinearOperator.identity(d), y=rng.standard_normal(d))
    s_x = MlpScoreNet(d, hidden=(256, 256), schedule=sched, rng=np.random.default_rng(1))
    s_n = MlpScoreNet(d, hidden=(256, 256), schedule=sched, rng=np.random.default_rng(2))
    per_step = {}
    totals = {}
    for rule in RULES:
        config = SamplerConfig(
            steps=steps, chains=1, seed=5, schedule=sched,
            guidance=GuidanceParams(rule=rule, lambda_prime=0.01, kappa_prime=0.01),
        )
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            sample_posterior(problem, s_x, s_n, config)
            times.append(time.perf_counter() - start)
        totals[rule] = float(np.median(times))
        per_step[rule] = totals[rule] / steps
    ordering = (
        per_step["projection"] < per_step["dps"]
        and per_step["projection"] < per_step["pigdm"]
    )
    ratio_dps = totals["dps"] / totals["projection"]
    ratio_pigdm = totals["pigdm"] / totals["projection"]
    ok = ordering and ratio_dps > 1.5 and ratio_pigdm > 1.5
    report(
        "criterion 8 (timing ordering)",
        ok,
        f"per-step ms: projection {per_step['projection']*1e3:.2f} < "
        f"dps {per_step['dps']*1e3:.2f}, pigdm {per_step['pigdm']*1e3:.2f}; "
        f"ratios {ratio_dps:.1f}x/{ratio_pigdm:.1f}x > 1.5x",
    )


@pytest.mark.acceptance
def test_criterion_9_structured_noise_win(sched):
    shape, d = (16, 16), 256
    n_problems = 50
    rng = np.random.default_rng(2024)
    library = default_sprite_library(16)
    mu_x, cov_x = smooth_image_prior(shape, mean=0.5, amplitude=0.15, length_scale=3.0)
    xs = sample_gaussian(mu_x, cov_x, rng, size=n_problems)
    noises = np.stack([gen_sprite_noise(shape, library, rng, 1.0) for _ in range(n_problems)])
    a = LinearOperator.scaled_identity(d, 0.5)  # y = 0.5 x + 0.5 n
    ys = 0.5 * xs + 0.5 * noises
    problem = InverseProblem(A=a, y=ys)  # one observation per chain row

    fit_draws = 0.5 * np.stack(
        [gen_sprite_noise(shape, library, np.random.default_rng(10_000 + i), 1.0)
         for i in range(2000)]
    )
    mu_n, cov_n = fit_gaussian(fit_draws, shrinkage=1e-3)
    iso_var = float(np.mean(np.sum((fit_draws - fit_draws.mean()) ** 2, axis=1)) / d)
    s_x = AnalyticGaussianScore(mu_x, cov_x, sched)
    arms = {
        "structured": AnalyticGaussianScore(mu_n, cov_n, sched),
        "iid-ablation": AnalyticGaussianScore(np.full(d, fit_draws.mean()), iso_var, sched),
    }
    medians = {}
    for tag, s_n in arms.items():
        config = SamplerConfig(
            steps=300, chains=n_problems, seed=77, schedule=sched,
            guidance=GuidanceParams(rule="pigdm", lambda_prime=0.3, kappa_prime=0.3),
        )
        run = sample_posterior(problem, s_x, s_n, config)
        values = [
            psnr(xs[i].reshape(shape), run.x0_hat[i].reshape(shape))
            for i in range(n_problems)
        ]
        medians[tag] = float(np.median(values))
    gap = medians["structured"] - medians["iid-ablation"]
    ok = gap >= 2.0
    report(
        "criterion 9 (structured-noise win)",
        ok,
        f"median PSNR structured {medians['structured']:.2f} dB vs "
        f"iid {medians['iid-ablation']:.2f} dB, gap {gap:.2f} dB >= 2 dB",
    )


@pytest.mark.acceptance
def test_criterion_10_determinism(tmp_path):
    config = {
        "experiment": "determinism",
        "seed": 123,
        "signal_prior": {"kind": "gaussian", "dim": 8, "mean": 0.5, "cov": 1.0},
        "noise_prior": {"kind": "gaussian", "dim": 8, "mean": 0.0, "cov": 1.0},
        "problem": {"kind": "identity", "d": 8,
                    "noise": {"kind": "gaussian-iid", "avg_std": 1.0}, "seed": 4},
        "guidance": {"rule": "pigdm", "lambda_prime": 0.1, "kappa_prime": 0.1},
        "sampler": {"steps": 120, "chains": 3},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    outputs = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        code = cli.main(["sample", "--config", str(config_path), "--out", str(out)])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same_names = set(outputs[0]) == set(outputs[1])
    same_bytes = same_names and all(outputs[0][k] == outputs[1][k] for k in outputs[0])
    resolved = json.loads(outputs[0]["resolved_config.json"].decode())
    report(
        "criterion 10 (determinism)",
        same_bytes,
        f"{len(outputs[0])} files bit-identical across reruns "
        f"(backend={resolved['kernels']}, seed={resolved['seed']})",
    )
