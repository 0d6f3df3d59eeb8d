"""Score functions for diffusion priors.

A score function evaluates ``s(x, t) ~= grad_x log p_t(x)`` for the
noise-perturbed marginal of a prior under a :class:`~sdenoise.sde.DiffusionSchedule`,
and exposes an exact vector-Jacobian product ``vjp(x, t, v) = v^T ds/dx``,
which the ΠGDM/DPS guidance rules consume through Tweedie denoising.

Three families:

* :class:`AnalyticGaussianScore` — closed-form score of a Gaussian prior
  convolved with the perturbation kernel: ``-(a^2 Sigma + b^2 I)^{-1} (x - a mu)``.
* :class:`GaussianMixtureScore` — same time-convolution applied per mixture
  component; multimodal verification prior.
* :class:`MlpScoreNet` — small fully connected net trained with denoising
  score matching; vjp by reverse-mode accumulation through the same graph.

Arrays are float64 throughout; ``x`` may be a single vector ``(d,)`` or a
batch ``(B, d)``, and outputs match the input shape.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from . import arrayio
from .errors import TrainingDivergedError

ACTIVATIONS = {"tanh": K.ACT_TANH, "silu": K.ACT_SILU}
MODEL_FORMAT_VERSION = 1


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected vector or batch of vectors, got shape {x.shape}")


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {what}")


class ScoreFunction:
    """Interface: ``score(x, t)`` and its exact vjp ``v^T (d score / d x)``."""

    dim = None

    def score(self, x, t):
        raise NotImplementedError

    def vjp(self, x, t, v):
        raise NotImplementedError

    def score_with_times(self, x, t):
        """Batched score with one time per row; default loops over rows."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return np.stack([self.score(xi, ti) for xi, ti in zip(x, t)])


def score_at(model, x, t):
    """Evaluate ``model.score`` after input validation."""
    _check_finite(np.asarray(x, dtype=float), "x")
    return model.score(x, t)


def vjp_at(model, x, t, v):
    """Evaluate ``model.vjp`` after input validation."""
    _check_finite(np.asarray(x, dtype=float), "x")
    _check_finite(np.asarray(v, dtype=float), "v")
    return model.vjp(x, t, v)


class AnalyticGaussianScore(ScoreFunction):
    """Exact score of a Gaussian prior N(mean, cov) diffused to time t.

    ``cov`` may be a scalar, a (d,) variance vector, or a full SPD (d, d)
    matrix. The full case is eigendecomposed once so each evaluation is two
    matrix products. Valid at t = 0, where the score is the prior's own.
    """

    def __init__(self, mean, cov, schedule):
        self.schedule = schedule
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        self.dim = self.mean.size
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(self.dim, float(cov))
        if cov.ndim == 1:
            if cov.size != self.dim:
                raise ValueError("variance vector length does not match mean")
            if np.any(cov <= 0):
                raise ValueError("variances must be positive")
            self.var = cov.copy()
            self._eigvecs = None
            self._eigvals = None
        elif cov.ndim == 2:
            if cov.shape != (self.dim, self.dim):
                raise ValueError("covariance shape does not match mean")
            sym = 0.5 * (cov + cov.T)
            vals, vecs = np.linalg.eigh(sym)
            if np.any(vals <= 0):
                raise ValueError("covariance must be positive definite")
            self.var = None
            self._eigvals = vals
            self._eigvecs = np.ascontiguousarray(vecs)
        else:
            raise ValueError(f"covariance must be scalar, vector or matrix, got ndim={cov.ndim}")

    @property
    def covariance(self):
        if self.var is not None:
            return np.diag(self.var)
        return (self._eigvecs * self._eigvals) @ self._eigvecs.T

    def _precision_apply(self, y, t):
        """(alpha^2 Sigma + beta^2 I)^{-1} y for a batch y."""
        alpha = self.schedule.alpha(t)
        beta2 = self.schedule.beta_sq(t)
        if self.var is not None:
            return y / (alpha * alpha * self.var + beta2)
        w = y @ self._eigvecs
        w /= alpha * alpha * self._eigvals + beta2
        return w @ self._eigvecs.T

    def score(self, x, t):
        x2, single = _as_batch(x)
        alpha = self.schedule.alpha(t)
        if self.var is not None:
            beta2 = self.schedule.beta_sq(t)
            inv = 1.0 / (alpha * alpha * self.var + beta2)
            out = K.diag_gaussian_score(
                np.ascontiguousarray(x2), alpha * self.mean, inv
            )
        else:
            out = -self._precision_apply(x2 - alpha * self.mean, t)
        return out[0] if single else out

    def vjp(self, x, t, v):
        v2, single = _as_batch(v)
        out = -self._precision_apply(v2, t)
        return out[0] if single else out

    def score_with_times(self, x, t):
        x2 = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        alpha = np.array([self.schedule.alpha(ti) for ti in t])
        beta2 = self.schedule.beta_batch(t) ** 2
        shift = x2 - alpha[:, None] * self.mean
        if self.var is not None:
            return -shift / (alpha[:, None] ** 2 * self.var + beta2[:, None])
        w = shift @ self._eigvecs
        w /= alpha[:, None] ** 2 * self._eigvals + beta2[:, None]
        return -(w @ self._eigvecs.T)

    def logpdf(self, x, t):
        """Log density of the diffused prior; supports t = 0."""
        x2, single = _as_batch(x)
        alpha = self.schedule.alpha(t)
        beta2 = self.schedule.beta_sq(t)
        shift = x2 - alpha * self.mean
        if self.var is not None:
            var_t = alpha * alpha * self.var + beta2
            quad = np.sum(shift * shift / var_t, axis=1)
            logdet = np.sum(np.log(var_t))
        else:
            var_t = alpha * alpha * self._eigvals + beta2
            w = shift @ self._eigvecs
            quad = np.sum(w * w / var_t, axis=1)
            logdet = np.sum(np.log(var_t))
        out = -0.5 * (quad + logdet + self.dim * math.log(2.0 * math.pi))
        return out[0] if single else out


class GaussianMixtureScore(ScoreFunction):
    """Score of a Gaussian mixture prior diffused to time t.

    Component covariances are scalar or diagonal. The score is the
    responsibility-weighted sum of component scores; the vjp applies the
    exact Hessian of the mixture log density.
    """

    def __init__(self, weights, means, variances, schedule):
        self.schedule = schedule
        self.weights = np.asarray(weights, dtype=float).copy()
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("mixture weights must sum to 1")
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        self.means = means.copy()
        self.n_components, self.dim = self.means.shape
        if self.weights.size != self.n_components:
            raise ValueError("weights/means size mismatch")
        var = np.asarray(variances, dtype=float)
        if var.ndim == 0:
            var = np.full((self.n_components, self.dim), float(var))
        elif var.ndim == 1:
            if var.size != self.n_components:
                raise ValueError("per-component variance vector has wrong length")
            var = np.repeat(var[:, None], self.dim, axis=1)
        if var.shape != (self.n_components, self.dim):
            raise ValueError("variances must be scalar, per-component, or (k, d)")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        self.variances = var.copy()

    def _log_resp_and_scores(self, x2, t):
        alpha = self.schedule.alpha(t)
        beta2 = self.schedule.beta_sq(t)
        var_t = alpha * alpha * self.variances + beta2  # (k, d)
        shift = x2[:, None, :] - alpha * self.means[None, :, :]  # (B, k, d)
        comp_log = -0.5 * (
            np.sum(shift * shift / var_t[None], axis=2)
            + np.sum(np.log(var_t), axis=1)[None]
            + self.dim * math.log(2.0 * math.pi)
        )
        logits = np.log(self.weights)[None] + comp_log  # (B, k)
        comp_scores = -shift / var_t[None]  # (B, k, d)
        return logits, comp_scores, var_t

    def score(self, x, t):
        x2, single = _as_batch(x)
        logits, comp_scores, _ = self._log_resp_and_scores(x2, t)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        out = np.einsum("bk,bkd->bd", resp, comp_scores)
        return out[0] if single else out

    def vjp(self, x, t, v):
        x2, single = _as_batch(x)
        v2, _ = _as_batch(v)
        logits, comp_scores, var_t = self._log_resp_and_scores(x2, t)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        s = np.einsum("bk,bkd->bd", resp, comp_scores)
        # Hessian of log p: sum_k r_k (g_k g_k^T - diag(1/var_k)) - s s^T
        dots = np.einsum("bkd,bd->bk", comp_scores, v2)
        term1 = np.einsum("bk,bk,bkd->bd", resp, dots, comp_scores)
        term2 = np.einsum("bk,kd,bd->bd", resp, 1.0 / var_t, v2)
        term3 = np.sum(s * v2, axis=1, keepdims=True) * s
        out = term1 - term2 - term3
        return out[0] if single else out

    def logpdf(self, x, t):
        x2, single = _as_batch(x)
        logits, _, _ = self._log_resp_and_scores(x2, t)
        out = logsumexp(logits, axis=1)
        return out[0] if single else out


class MlpScoreNet(ScoreFunction):
    """Small fully connected score network.

    Input features are ``[x, t, beta_t]``; the raw net output is divided by
    ``beta_t`` so the net itself learns the well-scaled noise direction.
    Hidden layers share one activation, the final layer is linear. The vjp
    with respect to ``x`` is exact reverse-mode through the same forward
    graph (the two time features are constants for that derivative). An MLP
    score is only defined for t > 0.
    """

    def __init__(self, dim, hidden=(64, 64), activation="silu", schedule=None, rng=None):
        if schedule is None:
            raise ValueError("MlpScoreNet requires a schedule")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; options: {sorted(ACTIVATIONS)}")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        if self.dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        self.schedule = schedule
        rng = rng or np.random.default_rng(0)
        widths = (self.dim + 2,) + self.hidden + (self.dim,)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / (n_in + n_out))
            self.weights.append(np.ascontiguousarray(rng.normal(0.0, scale, (n_out, n_in))))
            self.biases.append(np.zeros(n_out))

    def _check_t(self, t):
        if not 0.0 < t <= 1.0:
            raise ValueError(f"MLP score requires t in (0, 1], got {t}")

    def _features(self, x2, t_col, beta_col):
        feats = np.empty((x2.shape[0], self.dim + 2))
        feats[:, : self.dim] = x2
        feats[:, self.dim] = t_col
        feats[:, self.dim + 1] = beta_col
        return feats

    def score(self, x, t):
        self._check_t(t)
        x2, single = _as_batch(x)
        beta = self.schedule.beta(t)
        feats = self._features(x2, t, beta)
        raw, _, _ = K.mlp_forward(feats, self.weights, self.biases, self._act)
        out = raw / beta
        return out[0] if single else out

    def vjp(self, x, t, v):
        self._check_t(t)
        x2, single = _as_batch(x)
        v2, _ = _as_batch(v)
        beta = self.schedule.beta(t)
        feats = self._features(x2, t, beta)
        _, hs, zs = K.mlp_forward(feats, self.weights, self.biases, self._act)
        d = K.mlp_input_vjp(np.ascontiguousarray(v2), self.weights, hs, zs, self._act)
        out = d[:, : self.dim] / beta
        return out[0] if single else out

    def score_with_times(self, x, t):
        x2 = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        beta = self.schedule.beta_batch(t)
        feats = self._features(x2, t, beta)
        raw, _, _ = K.mlp_forward(feats, self.weights, self.biases, self._act)
        return raw / beta[:, None]

    # -- training hooks -------------------------------------------------

    def loss_and_grads(self, x0, t, z):
        """DSM loss on one batch and its parameter gradients.

        x0, z are (B, d); t is (B,). The loss is the batch mean of
        ``|| s(x_t, t) + z / beta_t ||^2`` with x_t = alpha x0 + beta z.
        """
        b = x0.shape[0]
        alpha = np.ones_like(t)
        beta = self.schedule.beta_batch(t)
        if np.any(beta <= 0.0):
            raise ValueError("DSM requires t > 0 (beta_t must be positive)")
        x_t = alpha[:, None] * x0 + beta[:, None] * z
        feats = self._features(x_t, t, beta)
        raw, hs, zs = K.mlp_forward(feats, self.weights, self.biases, self._act)
        # score - target = raw/beta + z/beta = (raw + z)/beta
        resid = (raw + z) / beta[:, None]
        loss = float(np.sum(resid * resid)) / b
        dout = np.ascontiguousarray(2.0 * resid / beta[:, None] / b)
        dws, dbs = K.mlp_param_grads(dout, self.weights, hs, zs, self._act)
        return loss, dws, dbs

    def get_params(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def set_params(self, weights, biases):
        self.weights = [np.ascontiguousarray(np.asarray(w, dtype=float)) for w in weights]
        self.biases = [np.asarray(b, dtype=float).copy() for b in biases]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for DSM training."""

    batch_size: int = 128
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    t_min: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.t_min <= 0.1:
            raise ValueError("t_min must lie in (0, 0.1]")


@dataclass
class LossTrace:
    step_loss: np.ndarray
    epoch_mean: np.ndarray
    epoch_size: int


def dsm_loss(model, batch, schedule, rng, t_min=1e-3):
    """Denoising score matching loss on one batch of clean vectors.

    Draws t ~ U[t_min, 1] and z ~ N(0, I) per sample, perturbs with the
    transition kernel, and returns the batch mean of
    ``|| s(x_t, t) - (-z / beta_t) ||^2``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if t_min <= 0.0:
        raise ValueError("t_min must be positive (score target is singular at t=0)")
    t = rng.uniform(t_min, 1.0, size=batch.shape[0])
    z = rng.standard_normal(batch.shape)
    beta = schedule.beta_batch(t)
    x_t = batch + beta[:, None] * z  # alpha = 1 for the VE kernel
    scores = model.score_with_times(x_t, t)
    resid = scores + z / beta[:, None]
    return float(np.sum(resid * resid)) / batch.shape[0]


def train_dsm(model, dataset, config, schedule):
    """Fit an :class:`MlpScoreNet` with SGD + momentum on the DSM objective.

    Returns (model, :class:`LossTrace`). The trace records per-step losses
    and per-epoch means, one epoch being ``len(dataset) // batch_size``
    steps (at least one).
    """
    dataset = np.asarray(dataset, dtype=float)
    if dataset.ndim == 1:
        dataset = dataset[:, None]
    if dataset.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    rng = np.random.default_rng(config.seed)
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]
    step_loss = np.empty(config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, dataset.shape[0], size=config.batch_size)
        t = rng.uniform(config.t_min, 1.0, size=config.batch_size)
        z = rng.standard_normal((config.batch_size, model.dim))
        loss, dws, dbs = model.loss_and_grads(dataset[idx], t, z)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        step_loss[step] = loss
        for l in range(len(model.weights)):
            velocity_w[l] = config.momentum * velocity_w[l] - config.lr * dws[l]
            velocity_b[l] = config.momentum * velocity_b[l] - config.lr * dbs[l]
            model.weights[l] = np.ascontiguousarray(model.weights[l] + velocity_w[l])
            model.biases[l] = model.biases[l] + velocity_b[l]
    epoch = max(1, dataset.shape[0] // config.batch_size)
    n_full = max(1, config.steps // epoch) if config.steps else 0
    epoch_mean = (
        np.array([step_loss[i * epoch : (i + 1) * epoch].mean() for i in range(n_full)])
        if config.steps
        else np.empty(0)
    )
    return model, LossTrace(step_loss=step_loss, epoch_mean=epoch_mean, epoch_size=epoch)


def save_model(path, model):
    """Serialize an MLP score net to the flat binary container."""
    flat = np.concatenate(
        [w.ravel() for w in model.weights] + [b.ravel() for b in model.biases]
    )
    meta = {
        "model_format": MODEL_FORMAT_VERSION,
        "kind": "mlp-score",
        "dim": model.dim,
        "hidden": list(model.hidden),
        "activation": model.activation,
        "sigma": model.schedule.sigma,
    }
    arrayio.save_array(path, flat, meta=meta)


def load_model(path, schedule=None):
    """Load an MLP score net saved by :func:`save_model`."""
    from .sde import DiffusionSchedule

    flat, meta = arrayio.load_array(path)
    if meta.get("kind") != "mlp-score":
        raise arrayio.DataFormatError(f"{path}: not a saved score model")
    if schedule is None:
        schedule = DiffusionSchedule(sigma=meta["sigma"])
    model = MlpScoreNet(
        meta["dim"],
        hidden=tuple(meta["hidden"]),
        activation=meta["activation"],
        schedule=schedule,
    )
    pos = 0
    weights, biases = [], []
    for w in model.weights:
        weights.append(flat[pos : pos + w.size].reshape(w.shape))
        pos += w.size
    for b in model.biases:
        biases.append(flat[pos : pos + b.size])
        pos += b.size
    if pos != flat.size:
        raise arrayio.DataFormatError(f"{path}: parameter payload size mismatch")
    model.set_params(weights, biases)
    return model
