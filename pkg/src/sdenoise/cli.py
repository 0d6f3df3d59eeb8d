"""Config-driven command line: train score models, solve inverse problems,
evaluate against oracles/metrics, and benchmark the guidance rules.

Subcommands: ``train | sample | eval | bench``. Every run directory gets a
``resolved_config.json`` with all defaults materialized plus the seed and
the concrete kernel backend, which is sufficient to reproduce the outputs
bit-exactly. Exit codes: 0 ok, 2 config/data error, 3 numeric failure.
"""

import argparse
import dataclasses
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels, arrayio, config as cfg
from .errors import ConfigError, DataFormatError, NumericError, SamplingDivergedError
from .guidance import LinearOperator
from .metrics import psnr as psnr_fn, ssim as ssim_fn
from .oracle import gaussian_posterior
from .problems import gen_sine_noise, gen_sprite_noise, default_sprite_library, observe, load_dataset, sample_gaussian
from .sampler import SamplerConfig, sample_posterior
from .scores import MlpScoreNet, save_model, train_dsm


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def _build_parser():
    parser = argparse.ArgumentParser(prog="sdenoise", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit a score model with denoising score matching")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=cmd_train)

    sample = sub.add_parser("sample", help="run joint posterior sampling on a problem")
    sample.add_argument("--config", required=True)
    sample.add_argument("--out", required=True)
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--rule", default=None, choices=["pigdm", "dps", "projection"])
    sample.set_defaults(func=cmd_sample)

    evaluate = sub.add_parser("eval", help="compute metrics/oracle comparison for a run dir")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="time the guidance rules")
    bench.add_argument("--config", required=True)
    bench.add_argument("--out", required=True)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--compare-backends", action="store_true")
    bench.set_defaults(func=cmd_bench)
    return parser


def _load_with_overrides(args):
    config = cfg.load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "rule", None):
        config["guidance"]["rule"] = args.rule
    cfg.resolve_kernels(config)
    return config


# ---------------------------------------------------------------- train --


def _build_train_dataset(config, schedule):
    spec = config["train"]["dataset"]
    if not isinstance(spec, dict):
        raise ConfigError("train.dataset must be an object with 'path' or 'generator'")
    if "path" in spec:
        path = Path(spec["path"])
        if not path.exists():
            raise ConfigError(f"train.dataset.path does not exist: {path}")
        return load_dataset(path, format=spec.get("format"))
    if "generator" not in spec:
        raise ConfigError("train.dataset needs 'path' or 'generator'")
    kind = spec["generator"]
    count = int(spec.get("count", 2000))
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    if kind == "gaussian":
        dim = int(spec.get("dim", 2))
        mean = spec.get("mean", 0.0)
        mean = np.full(dim, float(mean)) if np.isscalar(mean) else np.asarray(mean, dtype=float)
        cov = spec.get("cov", 1.0)
        cov = np.asarray(cov, dtype=float) if isinstance(cov, list) else float(cov) * np.eye(dim)
        if cov.ndim == 1:
            cov = np.diag(cov)
        return sample_gaussian(mean, cov, rng, size=count)
    if kind == "sine-noise":
        shape = tuple(spec.get("shape", [1, 16]))
        avg_std = float(spec.get("avg_std", 0.2))
        return np.stack([gen_sine_noise(shape, rng, avg_std) for _ in range(count)])
    if kind == "sprites":
        shape = tuple(spec.get("shape", [16, 16]))
        weight = float(spec.get("weight", 0.5))
        library = default_sprite_library(int(spec.get("cell", 16)))
        return np.stack(
            [gen_sprite_noise(shape, library, rng, weight) for _ in range(count)]
        )
    raise ConfigError(f"unknown train dataset generator {kind!r}")


def cmd_train(args):
    config = _load_with_overrides(args)
    if config["train"] is None:
        raise ConfigError("config has no 'train' section")
    schedule = cfg.build_schedule(config)
    data = _build_train_dataset(config, schedule)
    if data.shape[0] == 0:
        raise ConfigError("training dataset is empty")
    out_dir = Path(args.out)
    cfg.dump_resolved(config, out_dir)
    model = MlpScoreNet(
        data.shape[1],
        hidden=tuple(config["train"]["hidden"]),
        activation=config["train"]["activation"],
        schedule=schedule,
        rng=np.random.default_rng(config["seed"]),
    )
    train_config = cfg.build_train_config(config, config["seed"])
    model, trace = train_dsm(model, data, train_config, schedule)
    save_model(out_dir / "model.bin", model)
    arrayio.write_csv(
        out_dir / "loss.csv",
        ["step", "loss"],
        [[i, f"{v:.10g}"] for i, v in enumerate(trace.step_loss)],
    )
    arrayio.write_csv(
        out_dir / "epoch_mean.csv",
        ["epoch", "mean_loss"],
        [[i, f"{v:.10g}"] for i, v in enumerate(trace.epoch_mean)],
    )
    print(f"trained {config['train']['target']} model -> {out_dir / 'model.bin'}")
    return 0


# --------------------------------------------------------------- sample --


def _build_problem(config, schedule):
    problem_cfg = config["problem"]
    if problem_cfg is None:
        raise ConfigError("config has no 'problem' section")
    rng = np.random.default_rng(problem_cfg["seed"])
    operator = cfg.build_operator(problem_cfg, rng)
    x_true = cfg.draw_signal(config, schedule, rng)
    noise_spec = cfg.build_noise_spec(problem_cfg["noise"])
    shape = problem_cfg["shape"]
    noise_shape = tuple(shape) if shape else (1, operator.m)
    if noise_spec is None:
        noise = np.zeros(operator.m)
    else:
        noise = noise_spec.sample(noise_shape, rng)
    if noise.size != operator.m:
        raise ConfigError(
            f"noise shape {noise_shape} yields {noise.size} entries, operator has m={operator.m}"
        )
    return observe(
        x_true,
        operator,
        noise,
        mix=tuple(problem_cfg["mix"]),
        meta={"problem_seed": problem_cfg["seed"]},
    )


def _write_preview(out_dir, name, vec, shape):
    arrayio.write_pgm(out_dir / name, np.clip(vec, 0.0, 1.0).reshape(shape))


def cmd_sample(args):
    config = _load_with_overrides(args)
    schedule = cfg.build_schedule(config)
    problem = _build_problem(config, schedule)
    d, m = problem.A.d, problem.A.m
    s_x = cfg.build_prior(config["signal_prior"], schedule, dim_hint=d)
    s_n = cfg.build_prior(config["noise_prior"], schedule, dim_hint=m)
    sampler_cfg = SamplerConfig(
        steps=config["sampler"]["steps"],
        chains=config["sampler"]["chains"],
        seed=config["seed"],
        schedule=schedule,
        guidance=cfg.build_guidance(config),
        record_trajectory=config["sampler"]["record_trajectory"],
        denoise_last=config["sampler"]["denoise_last"],
        dc_order=config["sampler"]["dc_order"],
    )
    out_dir = Path(args.out)
    cfg.dump_resolved(config, out_dir)
    _write_problem_files(out_dir, problem)
    try:
        run = sample_posterior(problem, s_x, s_n, sampler_cfg)
    except SamplingDivergedError as exc:
        if exc.diagnostics is not None:
            _write_diagnostics(out_dir, exc.diagnostics["residual_norm"],
                               exc.diagnostics["dc_norm_x"], exc.diagnostics["dc_norm_n"],
                               sampler_cfg.steps)
        raise
    _write_diagnostics(out_dir, run.residual_norm, run.dc_norm_x, run.dc_norm_n,
                       sampler_cfg.steps)
    arrayio.save_array(out_dir / "init_x.bin", run.init_x)
    arrayio.save_array(out_dir / "init_n.bin", run.init_n)
    for c in range(sampler_cfg.chains):
        arrayio.save_array(out_dir / f"estimate_x_{c:03d}.bin", run.x0_hat[c])
        arrayio.save_array(out_dir / f"estimate_n_{c:03d}.bin", run.n0_hat[c])
    shape = config["problem"]["shape"]
    if shape:
        shape = tuple(shape)
        size = shape[0] * shape[1]
        if size == d:  # signal-side previews
            _write_preview(out_dir, "preview_truth.pgm", problem.x_true, shape)
            _write_preview(out_dir, "preview_x0_chain000.pgm", run.x0_hat[0], shape)
        if size == m:  # measurement-side previews
            _write_preview(out_dir, "preview_y.pgm", problem.y, shape)
            _write_preview(out_dir, "preview_n0_chain000.pgm", run.n0_hat[0], shape)
    print(f"sampled {sampler_cfg.chains} chain(s) -> {out_dir}")
    return 0


def _write_problem_files(out_dir, problem):
    arrayio.save_array(out_dir / "y.bin", problem.y)
    if problem.x_true is not None:
        arrayio.save_array(out_dir / "truth_x.bin", problem.x_true)
    if problem.n_true is not None:
        arrayio.save_array(out_dir / "truth_n.bin", problem.n_true)
    op_meta = {"kind": problem.A.kind, "scale": problem.A.scale, "m": problem.A.m,
               "d": problem.A.d}
    if problem.A.matrix is not None:
        arrayio.save_array(out_dir / "operator.bin", problem.A.matrix, meta=op_meta)
    else:
        (out_dir / "operator.json").write_text(json.dumps(op_meta, sort_keys=True) + "\n")


def _write_diagnostics(out_dir, residual_norm, dc_norm_x, dc_norm_n, steps):
    rows = []
    n_done = residual_norm.shape[0]
    for i in range(n_done):
        t = (steps - i) / steps
        rows.append(
            [
                i,
                f"{t:.8g}",
                f"{np.median(residual_norm[i]):.10g}",
                f"{residual_norm[i].mean():.10g}",
                f"{dc_norm_x[i].mean():.10g}",
                f"{dc_norm_n[i].mean():.10g}",
            ]
        )
    arrayio.write_csv(
        out_dir / "diagnostics.csv",
        ["step", "t", "residual_median", "residual_mean", "dc_norm_x_mean", "dc_norm_n_mean"],
        rows,
    )


# ----------------------------------------------------------------- eval --


def _load_operator(run_dir, config):
    op_bin = run_dir / "operator.bin"
    if op_bin.exists():
        matrix, meta = arrayio.load_array(op_bin)
        return LinearOperator(meta["kind"], (meta["m"], meta["d"]), matrix=matrix)
    meta = json.loads((run_dir / "operator.json").read_text())
    if meta["kind"] == "identity":
        return LinearOperator.identity(meta["d"])
    return LinearOperator.scaled_identity(meta["d"], meta["scale"])


def cmd_eval(args):
    run_dir = Path(args.run_dir)
    resolved = run_dir / "resolved_config.json"
    if not resolved.exists():
        raise ConfigError(f"{run_dir}: not a run directory (missing resolved_config.json)")
    config = cfg.validate_config(json.loads(resolved.read_text()))
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    estimates_x = sorted(run_dir.glob("estimate_x_*.bin"))
    if not estimates_x:
        raise ConfigError(f"{run_dir}: no estimates found")
    x_hats = np.stack([arrayio.load_array(p)[0] for p in estimates_x])

    truth_path = run_dir / "truth_x.bin"
    if not truth_path.exists():
        print("note: no ground truth stored; metrics skipped")
    else:
        x_true, _ = arrayio.load_array(truth_path)
        shape = config["problem"]["shape"] if config["problem"] else None
        shape = tuple(shape) if shape else None
        if shape is None or shape[0] * shape[1] != x_true.size:
            shape = (1, x_true.size)
        rows = []
        for c, x_hat in enumerate(x_hats):
            p = psnr_fn(x_true.reshape(shape), x_hat.reshape(shape))
            if min(shape) >= 7:
                s = ssim_fn(
                    np.clip(x_true, 0, 1).reshape(shape),
                    np.clip(x_hat, 0, 1).reshape(shape),
                )
                s_txt = f"{s:.8g}"
            else:
                s_txt = ""  # image too small for the SSIM window
            rows.append([f"chain{c:03d}", f"{p:.8g}", s_txt])
        finite = [float(r[1]) for r in rows if np.isfinite(float(r[1]))]
        if finite:
            rows.append(["mean", f"{np.mean(finite):.8g}", ""])
            rows.append(["std", f"{np.std(finite):.8g}", ""])
        arrayio.write_csv(out_dir / "metrics.csv", ["id", "psnr", "ssim"], rows)

    comparison = _oracle_comparison(run_dir, config, x_hats)
    if comparison is not None:
        (out_dir / "oracle_comparison.json").write_text(
            json.dumps(comparison, indent=2, sort_keys=True) + "\n"
        )
    print(f"evaluated {len(x_hats)} chain(s) -> {out_dir}")
    return 0


def _oracle_comparison(run_dir, config, x_hats):
    """Sample-moment vs closed-form posterior comparison for gaussian priors."""
    sp, np_ = config["signal_prior"], config["noise_prior"]
    if not sp or not np_ or sp["kind"] != "gaussian" or np_["kind"] != "gaussian":
        return None
    operator = _load_operator(run_dir, config)
    y, _ = arrayio.load_array(run_dir / "y.bin")
    prior_x = cfg.prior_moments(sp, operator.d)
    prior_n = cfg.prior_moments(np_, operator.m)
    post = gaussian_posterior(operator, y, prior_x, prior_n)
    emp_mean = x_hats.mean(axis=0)
    mean_rel = float(np.linalg.norm(emp_mean - post.mean) / np.linalg.norm(post.mean))
    out = {"chains": int(x_hats.shape[0]), "posterior_mean_rel_err": mean_rel}
    if x_hats.shape[0] >= 8:
        emp_cov = np.cov(x_hats.T)
        out["posterior_cov_rel_err"] = float(
            np.linalg.norm(emp_cov - post.covariance) / np.linalg.norm(post.covariance)
        )
    return out


# ---------------------------------------------------------------- bench --


def _bench_scores(kind, d, hidden, schedule, seed):
    if kind == "mlp":
        return (
            MlpScoreNet(d, hidden=tuple(hidden), schedule=schedule,
                        rng=np.random.default_rng(seed)),
            MlpScoreNet(d, hidden=tuple(hidden), schedule=schedule,
                        rng=np.random.default_rng(seed + 1)),
        )
    if kind == "gaussian":
        from .scores import AnalyticGaussianScore

        return (
            AnalyticGaussianScore(np.zeros(d), 1.0, schedule),
            AnalyticGaussianScore(np.zeros(d), 1.0, schedule),
        )
    raise ConfigError(f"unknown bench score kind {kind!r}")


def cmd_bench(args):
    config = _load_with_overrides(args)
    if config["bench"] is None:
        raise ConfigError("config has no 'bench' section")
    bench = config["bench"]
    if bench["repeats"] < 1:
        raise ConfigError("bench.repeats must be >= 1")
    if bench["repeats"] < 2:
        print("warning: single repeat; medians equal raw timings", file=sys.stderr)
    compare = bench["compare_backends"] or args.compare_backends
    backends = list(_kernels.available_backends()) if compare else [_kernels.get_backend()]
    schedule = cfg.build_schedule(config)
    out_dir = Path(args.out)
    config["bench"]["compare_backends"] = compare
    cfg.dump_resolved(config, out_dir)

    from .problems import InverseProblem

    rows = []
    initial_backend = _kernels.get_backend()
    try:
        for backend in backends:
            _kernels.set_backend(backend)
            for d in bench["sizes"]:
                rng = np.random.default_rng(config["seed"])
                problem = InverseProblem(A=LinearOperator.identity(d),
                                         y=rng.standard_normal(d))
                s_x, s_n = _bench_scores(bench["scores"], d, bench["hidden"], schedule,
                                         config["seed"])
                for rule in bench["rules"]:
                    # replace() re-validates the rule name
                    guidance = dataclasses.replace(cfg.build_guidance(config), rule=rule)
                    sampler_cfg = SamplerConfig(
                        steps=bench["steps"], chains=1, seed=config["seed"],
                        schedule=schedule, guidance=guidance,
                    )
                    times = []
                    for _ in range(bench["repeats"]):
                        start = time.perf_counter()
                        sample_posterior(problem, s_x, s_n, sampler_cfg)
                        times.append(time.perf_counter() - start)
                    total_ms = statistics.median(times) * 1e3
                    rows.append(
                        [rule, backend, d, bench["steps"], bench["repeats"],
                         f"{total_ms:.4f}", f"{total_ms / bench['steps']:.6f}"]
                    )
    finally:
        _kernels.set_backend(initial_backend)
    arrayio.write_csv(
        out_dir / "timing.csv",
        ["rule", "backend", "d", "steps", "repeats", "total_ms_median", "per_step_ms_median"],
        rows,
    )
    print(f"benchmarked {len(rows)} configuration(s) -> {out_dir / 'timing.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
