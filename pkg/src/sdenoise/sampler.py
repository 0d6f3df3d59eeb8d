"""Joint conditional reverse diffusion for (signal, noise) chains.

One iteration per time-grid point ``t_i = (i+1)/T``, from i = T-1 down to
0: a data-consistency step (the configured guidance rule, applied to both
chains with its step weights) followed by an unconditional Euler-Maruyama
reverse step for each chain. Four deterministic RNG substreams (init,
signal noise, noise-chain noise, projection draws) are spawned from the
seed so that swapping the guidance rule never perturbs the unconditional
randomness.

Chains are vectorized: all posterior samples advance together as rows of
(chains, dim) arrays. Score models are only read.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from . import guidance as gd
from .errors import SamplingDivergedError
from .sde import DiffusionSchedule

DIVERGENCE_FACTOR = 1e6


@dataclass
class SamplerConfig:
    steps: int = 600
    chains: int = 1
    seed: int = 0
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    guidance: gd.GuidanceParams = field(default_factory=gd.GuidanceParams)
    record_trajectory: bool = False
    # skip the noise injection on the final unconditional step
    denoise_last: bool = True
    # "before": data consistency then unconditional (published order)
    dc_order: str = "before"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.dc_order not in ("before", "after"):
            raise ValueError("dc_order must be 'before' or 'after'")


@dataclass
class PosteriorRun:
    """Final estimates plus per-step diagnostics (arrays of length steps)."""

    x0_hat: np.ndarray
    n0_hat: np.ndarray
    residual_norm: np.ndarray  # (steps, chains)
    dc_norm_x: np.ndarray
    dc_norm_n: np.ndarray
    init_x: np.ndarray
    init_n: np.ndarray
    trajectory_x: Optional[np.ndarray] = None
    trajectory_n: Optional[np.ndarray] = None


def unconditional_reverse_step(state, t, dt, score_model, schedule, rng, add_noise=True):
    """One Euler-Maruyama step of the reverse SDE.

    state - f(t) state dt + g(t)^2 s(state, t) dt + g(t) sqrt(dt) z.
    A standard-normal z is drawn even when ``add_noise`` is off so stream
    consumption is independent of the final-step convention.
    """
    state2, single = _as_batch(state)
    s = score_model.score(state2, t)
    f = schedule.drift_coeff(t)
    g = schedule.diffusion_coeff(t)
    z = rng.standard_normal(state2.shape)
    noise_scale = g * np.sqrt(dt) if add_noise else 0.0
    out = K.em_update(
        np.ascontiguousarray(state2), np.ascontiguousarray(s), z, f, g, dt, noise_scale
    )
    if not np.all(np.isfinite(out)):
        raise SamplingDivergedError(step=None, message=f"non-finite state after reverse step at t={t}")
    return out[0] if single else out


def data_consistency_step(x_t, n_t, t, A, y, s_x, s_n, params, schedule, rng, frozen_z=None):
    """Apply one guidance update to both chains (likelihood-ascent direction).

    Returns (x', n', pair) where pair carries the gradients and residual
    norm used, for diagnostics. ``frozen_z`` feeds the projection rule's
    frozen-corruption ablation.
    """
    if params.rule == "pigdm":
        pair = gd.pigdm_scores(A, y, x_t, n_t, t, s_x, s_n, params, schedule)
    elif params.rule == "dps":
        pair = gd.dps_scores(A, y, x_t, n_t, t, s_x, s_n, params, schedule)
    else:
        pair = gd.projection_scores(A, y, x_t, n_t, t, schedule, params, rng, z=frozen_z)
    w_x, w_n = gd.consistency_weights(params.rule, params, t, schedule, pair.residual_norm)
    w_x = np.asarray(w_x)
    w_n = np.asarray(w_n)
    if w_x.ndim == 1:
        w_x = w_x[:, None]
    if w_n.ndim == 1:
        w_n = w_n[:, None]
    return x_t + w_x * pair.grad_x, n_t + w_n * pair.grad_n, pair


def sample_posterior(problem, s_x, s_n, config):
    """Run joint posterior sampling for all chains.

    ``problem`` provides the forward operator ``A`` and observation ``y``;
    ``s_x``/``s_n`` are the signal and noise score models. Returns a
    :class:`PosteriorRun` with (chains, dim) estimates.
    """
    A, y = problem.A, np.asarray(problem.y, dtype=float)
    schedule = config.schedule
    params = config.guidance
    T = config.steps
    dt = 1.0 / T
    chains = config.chains
    if y.ndim == 2 and y.shape[0] != chains:
        raise ValueError(
            f"per-chain observations: y has {y.shape[0]} rows but chains={chains}"
        )

    root = np.random.SeedSequence(config.seed)
    rng_init, rng_x, rng_n, rng_proj = (np.random.default_rng(s) for s in root.spawn(4))

    x = schedule.prior_sample(A.d, rng_init, size=chains)
    n = schedule.prior_sample(A.m, rng_init, size=chains)
    init_x, init_n = x.copy(), n.copy()

    frozen_z = None
    if params.rule == "projection" and not params.fresh_projection_noise:
        frozen_z = rng_proj.standard_normal((chains, A.d))

    residual_norm = np.zeros((T, chains))
    dc_norm_x = np.zeros((T, chains))
    dc_norm_n = np.zeros((T, chains))
    traj_x = [x.copy()] if config.record_trajectory else None
    traj_n = [n.copy()] if config.record_trajectory else None

    guard = DIVERGENCE_FACTOR * schedule.beta(1.0)

    for step_idx, i in enumerate(range(T - 1, -1, -1)):
        t = (i + 1) / T
        add_noise = not (config.denoise_last and i == 0)

        def _dc(x, n):
            x_new, n_new, pair = data_consistency_step(
                x, n, t, A, y, s_x, s_n, params, schedule, rng_proj, frozen_z=frozen_z
            )
            residual_norm[step_idx] = pair.residual_norm
            dc_norm_x[step_idx] = np.linalg.norm(x_new - x, axis=1)
            dc_norm_n[step_idx] = np.linalg.norm(n_new - n, axis=1)
            return x_new, n_new

        def _uncond(x, n):
            x_new = unconditional_reverse_step(x, t, dt, s_x, schedule, rng_x, add_noise)
            n_new = unconditional_reverse_step(n, t, dt, s_n, schedule, rng_n, add_noise)
            return x_new, n_new

        try:
            if config.dc_order == "before":
                x, n = _dc(x, n)
                x, n = _uncond(x, n)
            else:
                x, n = _uncond(x, n)
                x, n = _dc(x, n)
        except SamplingDivergedError as exc:
            raise SamplingDivergedError(
                step=step_idx,
                diagnostics=_partial_diag(residual_norm, dc_norm_x, dc_norm_n, step_idx),
            ) from exc

        if max(np.max(np.abs(x)), np.max(np.abs(n))) > guard:
            raise SamplingDivergedError(
                step=step_idx,
                diagnostics=_partial_diag(residual_norm, dc_norm_x, dc_norm_n, step_idx + 1),
            )
        if config.record_trajectory:
            traj_x.append(x.copy())
            traj_n.append(n.copy())

    return PosteriorRun(
        x0_hat=x,
        n0_hat=n,
        residual_norm=residual_norm,
        dc_norm_x=dc_norm_x,
        dc_norm_n=dc_norm_n,
        init_x=init_x,
        init_n=init_n,
        trajectory_x=np.array(traj_x) if traj_x is not None else None,
        trajectory_n=np.array(traj_n) if traj_n is not None else None,
    )


def _partial_diag(residual_norm, dc_norm_x, dc_norm_n, n_done):
    return {
        "residual_norm": residual_norm[:n_done].copy(),
        "dc_norm_x": dc_norm_x[:n_done].copy(),
        "dc_norm_n": dc_norm_n[:n_done].copy(),
    }


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False
