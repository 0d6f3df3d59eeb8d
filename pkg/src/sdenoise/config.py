"""Run-configuration schema: validation, defaults, and object construction.

A run config is a single JSON object. Validation walks a declared schema,
rejects unknown keys with their dotted path, fills every default, and
returns the fully materialized dict that gets written next to the outputs
as ``resolved_config.json``.
"""

import json
import math
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError
from .guidance import GuidanceParams, LinearOperator
from .problems import (
    NoiseModelSpec,
    load_dataset,
    make_cs_operator,
    sample_gaussian,
    sine_std_profile,
    smooth_image_prior,
)
from .scores import AnalyticGaussianScore, GaussianMixtureScore, TrainConfig, load_model
from .sde import DiffusionSchedule

_REQUIRED = object()


def _merge_section(path, raw, spec):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(raw) - set(spec)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (default, caster) in spec.items():
        if key in raw:
            if raw[key] is None and default is not _REQUIRED:
                # resolved configs materialize optional keys as null
                out[key] = default
                continue
            try:
                out[key] = caster(raw[key]) if caster else raw[key]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{key}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"{path}.{key}: required key missing")
        else:
            out[key] = default
    return out


def _number(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true/false, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _numeric_or_list(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, (list, dict)):
        return v
    raise ValueError(f"expected number, list or object, got {v!r}")


def expand_cov(cov, dim):
    """Covariance spec -> scalar, variance vector, or dense matrix.

    Accepts a number (isotropic), a list (diagonal or full matrix), or the
    structured shorthands ``{"sine_variance": {...}}`` (diagonal from the
    sinusoidal std profile) and ``{"smooth_image": {...}}`` (squared-
    exponential pixel covariance).
    """
    if isinstance(cov, dict):
        if "sine_variance" in cov:
            p = cov["sine_variance"]
            shape = tuple(p.get("shape", [1, dim]))
            prof = sine_std_profile(
                shape, p.get("avg_std", 0.2), axis=p.get("axis", "row"),
                period=p.get("period", 16),
            )
            if prof.size != dim:
                raise ConfigError(
                    f"sine_variance shape {shape} yields {prof.size} entries, expected {dim}"
                )
            return prof**2
        if "smooth_image" in cov:
            p = cov["smooth_image"]
            if "shape" not in p:
                raise ConfigError("smooth_image covariance needs 'shape'")
            _, matrix = smooth_image_prior(
                tuple(p["shape"]),
                amplitude=p.get("amplitude", 0.15),
                length_scale=p.get("length_scale", 3.0),
            )
            if matrix.shape[0] != dim:
                raise ConfigError(
                    f"smooth_image shape {p['shape']} yields dim {matrix.shape[0]}, expected {dim}"
                )
            return matrix
        raise ConfigError(f"unknown covariance shorthand {sorted(cov)}")
    if isinstance(cov, list):
        return np.asarray(cov, dtype=float)
    return float(cov)


_PRIOR_SPEC = {
    "kind": (_REQUIRED, _str),  # gaussian | mixture | model
    "dim": (None, _int),
    "mean": (0.0, _numeric_or_list),
    "cov": (1.0, _numeric_or_list),
    "weights": (None, None),
    "means": (None, None),
    "variances": (None, _numeric_or_list),
    "path": (None, _str),
}

_NOISE_SPEC = {
    "kind": ("gaussian-iid", _str),
    "avg_std": (0.2, _number),
    "period": (16, _int),
    "axis": ("row", _str),
    "weight": (0.5, _number),
    "n_sprites": ([1, 3], None),
}

_PROBLEM_SPEC = {
    "kind": ("identity", _str),  # identity | scaled-identity | cs
    "d": (_REQUIRED, _int),
    "scale": (1.0, _number),
    "factor": (2.0, _number),
    "shape": (None, None),  # [H, W] image layout for previews
    "mix": ([1.0, 1.0], None),
    "signal": ("prior", None),  # "prior" | {"dataset": path, "index": i}
    "noise": (None, None),
    "seed": (0, _int),
}

_SCHEMA = {
    "experiment": ("run", _str),
    "seed": (0, _int),
    "kernels": ("auto", _str),
    "schedule": ({}, None),
    "signal_prior": (None, None),
    "noise_prior": (None, None),
    "problem": (None, None),
    "guidance": ({}, None),
    "sampler": ({}, None),
    "train": (None, None),
    "bench": (None, None),
}


def validate_config(raw):
    """Validate a raw config dict; returns the resolved dict with defaults."""
    top = _merge_section("config", raw, _SCHEMA)
    top["schedule"] = _merge_section("schedule", top["schedule"], {"sigma": (25.0, _number)})
    top["guidance"] = _merge_section(
        "guidance",
        top["guidance"],
        {
            "rule": ("pigdm", _str),
            "lambda_prime": (1.0, _number),
            "kappa_prime": (1.0, _number),
            "rho": (1.0, _number),
            "vi_variance": ("positive", _str),
            "identity_jacobians": (False, _bool),
            "fresh_projection_noise": (True, _bool),
        },
    )
    top["sampler"] = _merge_section(
        "sampler",
        top["sampler"],
        {
            "steps": (600, _int),
            "chains": (1, _int),
            "denoise_last": (True, _bool),
            "dc_order": ("before", _str),
            "record_trajectory": (False, _bool),
        },
    )
    for name in ("signal_prior", "noise_prior"):
        if top[name] is not None:
            top[name] = _merge_section(name, top[name], _PRIOR_SPEC)
    if top["problem"] is not None:
        top["problem"] = _merge_section("problem", top["problem"], _PROBLEM_SPEC)
        if top["problem"]["noise"] is not None:
            top["problem"]["noise"] = _merge_section(
                "problem.noise", top["problem"]["noise"], _NOISE_SPEC
            )
    if top["train"] is not None:
        top["train"] = _merge_section(
            "train",
            top["train"],
            {
                "target": ("signal", _str),
                "dataset": (_REQUIRED, None),
                "hidden": ([64, 64], None),
                "activation": ("silu", _str),
                "batch_size": (128, _int),
                "steps": (2000, _int),
                "lr": (1e-3, _number),
                "momentum": (0.9, _number),
                "t_min": (1e-3, _number),
            },
        )
    if top["bench"] is not None:
        top["bench"] = _merge_section(
            "bench",
            top["bench"],
            {
                "rules": (["pigdm", "dps", "projection"], None),
                "sizes": ([256], None),
                "steps": (600, _int),
                "repeats": (5, _int),
                "scores": ("mlp", _str),
                "hidden": ([256, 256], None),
                "compare_backends": (False, _bool),
            },
        )
    if top["kernels"] not in ("auto", "compiled", "numpy"):
        raise ConfigError("kernels: must be 'auto', 'compiled' or 'numpy'")
    return top


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return validate_config(raw)


def resolve_kernels(config):
    """Activate the configured kernel backend; record the concrete name."""
    name = _kernels.set_backend(config["kernels"])
    config["kernels"] = name
    return name


def build_schedule(config):
    return DiffusionSchedule(sigma=config["schedule"]["sigma"])


def build_prior(spec, schedule, dim_hint=None):
    """Construct a score model from a prior spec."""
    if spec is None:
        raise ConfigError("prior specification missing")
    kind = spec["kind"]
    if kind == "gaussian":
        mean = spec["mean"]
        dim = spec["dim"] or dim_hint
        if np.isscalar(mean):
            if dim is None:
                raise ConfigError("gaussian prior with scalar mean needs 'dim'")
            mean = np.full(dim, float(mean))
        else:
            mean = np.asarray(mean, dtype=float)
        return AnalyticGaussianScore(mean, expand_cov(spec["cov"], mean.size), schedule)
    if kind == "mixture":
        if spec["weights"] is None or spec["means"] is None:
            raise ConfigError("mixture prior needs 'weights' and 'means'")
        variances = spec["variances"] if spec["variances"] is not None else 1.0
        return GaussianMixtureScore(spec["weights"], spec["means"], variances, schedule)
    if kind == "model":
        if not spec["path"]:
            raise ConfigError("model prior needs 'path'")
        return load_model(spec["path"], schedule=schedule)
    raise ConfigError(f"unknown prior kind {kind!r}")


def prior_moments(spec, dim):
    """(mean, cov) arrays for a gaussian prior spec; None otherwise."""
    if spec is None or spec["kind"] != "gaussian":
        return None
    mean = spec["mean"]
    mean = np.full(dim, float(mean)) if np.isscalar(mean) else np.asarray(mean, dtype=float)
    cov = expand_cov(spec["cov"], dim)
    if np.isscalar(cov):
        cov = float(cov) * np.eye(dim)
    elif cov.ndim == 1:
        cov = np.diag(cov)
    return mean, cov


def build_operator(problem_cfg, rng):
    kind = problem_cfg["kind"]
    d = problem_cfg["d"]
    if kind == "identity":
        return LinearOperator.identity(d)
    if kind == "scaled-identity":
        return LinearOperator.scaled_identity(d, problem_cfg["scale"])
    if kind == "cs":
        return make_cs_operator(d, problem_cfg["factor"], rng)
    raise ConfigError(f"unknown problem kind {kind!r}")


def build_noise_spec(noise_cfg):
    if noise_cfg is None:
        return None
    return NoiseModelSpec(
        kind=noise_cfg["kind"],
        avg_std=noise_cfg["avg_std"],
        period=noise_cfg["period"],
        axis=noise_cfg["axis"],
        weight=noise_cfg["weight"],
        n_sprites=tuple(noise_cfg["n_sprites"]),
    )


def draw_signal(config, schedule, rng):
    """Ground-truth signal per the problem spec: prior draw or dataset row."""
    problem_cfg = config["problem"]
    d = problem_cfg["d"]
    signal = problem_cfg["signal"]
    if signal == "prior":
        spec = config["signal_prior"]
        moments = prior_moments(spec, d)
        if moments is not None:
            return sample_gaussian(*moments, rng)
        if spec is not None and spec["kind"] == "mixture":
            weights = np.asarray(spec["weights"], dtype=float)
            means = np.atleast_2d(np.asarray(spec["means"], dtype=float))
            n_comp, dim_m = means.shape
            var = np.asarray(
                spec["variances"] if spec["variances"] is not None else 1.0, dtype=float
            )
            if var.ndim == 0:
                var = np.full((n_comp, dim_m), float(var))
            elif var.ndim == 1:
                var = np.repeat(var[:, None], dim_m, axis=1)
            comp = rng.choice(n_comp, p=weights / weights.sum())
            return means[comp] + np.sqrt(var[comp]) * rng.standard_normal(dim_m)
        raise ConfigError(
            "problem.signal='prior' requires a gaussian or mixture signal_prior; "
            "use a dataset source otherwise"
        )
    if isinstance(signal, dict) and "dataset" in signal:
        data = load_dataset(signal["dataset"])
        index = int(signal.get("index", 0))
        if index >= data.shape[0]:
            raise ConfigError(f"problem.signal.index {index} out of range ({data.shape[0]} rows)")
        if data.shape[1] != d:
            raise ConfigError(f"dataset vectors have dim {data.shape[1]}, problem.d is {d}")
        return data[index]
    raise ConfigError("problem.signal must be 'prior' or {'dataset': path, 'index': i}")


def build_guidance(config):
    g = config["guidance"]
    return GuidanceParams(
        rule=g["rule"],
        lambda_prime=g["lambda_prime"],
        kappa_prime=g["kappa_prime"],
        rho=g["rho"],
        vi_variance=g["vi_variance"],
        identity_jacobians=g["identity_jacobians"],
        fresh_projection_noise=g["fresh_projection_noise"],
    )


def build_train_config(config, seed):
    t = config["train"]
    return TrainConfig(
        batch_size=t["batch_size"],
        steps=t["steps"],
        lr=t["lr"],
        momentum=t["momentum"],
        t_min=t["t_min"],
        seed=seed,
    )


def dump_resolved(config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config, indent=2, sort_keys=True)
    if not all(math.isfinite(v) for v in _iter_numbers(config)):
        raise ConfigError("resolved config contains non-finite numbers")
    (out_dir / "resolved_config.json").write_text(text + "\n")


def _iter_numbers(obj):
    if isinstance(obj, bool):
        return
    if isinstance(obj, (int, float)):
        yield float(obj)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _iter_numbers(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _iter_numbers(v)
