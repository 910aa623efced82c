"""Command line front end.

Every subcommand reads an optional JSON config file (--config) whose
values individual flags override.  Exit status encodes the outcome:
0 success, 1 configuration problem (bad flags, missing or malformed
config, invalid parameter values), 2 a numerical contract the command
was asked to verify does not hold.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import ModelParams
from .harness import (
    _CONFIG_KEYS,
    ExperimentConfig,
    random_shifted_start,
    rate_study,
    version_string,
    write_rate_study_csv,
    write_summary_json,
    write_trajectory_csv,
)
from .lyapunov import base_weights, tilde_weights, verify_decay
from .meanfield import (
    ConvergenceTimeout,
    StiffnessError,
    default_truncation,
    integrate,
    solve_to_equilibrium,
)
from .perturbation import (
    SensitivitySetup,
    remainder,
    remainder_bound_check,
    sensitivity_envelope_check,
)
from .simulator import SimConfig, simulate
from .stein import stein_decomposition

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on errors; surface them as status 1 instead
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage().rstrip()}")


def _load_config(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(unknown)} "
            f"(allowed: {', '.join(sorted(allowed))})"
        )
    return raw


def _merged(args, allowed: set[str], flags: dict) -> dict:
    cfg = _load_config(args.config, allowed)
    for key, val in flags.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg: dict, key: str, command: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{command} requires {key!r} (flag --{key} or config file)")
    return cfg[key]


def _emit(text: str, out, default_name: str | None = None) -> None:
    if out is None and default_name is not None:
        out = default_name
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
        print(f"wrote {out}")


_SIMULATE_KEYS = {
    "lambda", "M", "d", "seed",
    "warmup_time", "horizon_time", "batches", "n_report", "out",
}


def _run_simulate(args) -> int:
    cfg = _merged(
        args,
        _SIMULATE_KEYS,
        {
            "lambda": args.lam,
            "M": args.big_m,
            "d": args.d,
            "n_report": args.n,
            "seed": args.seed,
            "out": args.out,
        },
    )
    params = ModelParams(
        lam=float(_require(cfg, "lambda", "simulate")),
        M=int(_require(cfg, "M", "simulate")),
        d=int(cfg.get("d", 2)),
    )
    sim = SimConfig(
        seed=int(cfg.get("seed", 0)),
        warmup_time=cfg.get("warmup_time"),
        horizon_time=cfg.get("horizon_time"),
        batches=int(cfg.get("batches", 20)),
        n_report=int(cfg.get("n_report", 10)),
    )
    est = simulate(params, sim)
    payload = {
        "lambda": params.lam,
        "M": params.M,
        "d": params.d,
        "seed": est.seed_used,
        "mean_tail": est.mean_tail.tolist(),
        "tail_ci": est.tail_ci.tolist(),
        "mean_square_error": est.mean_square_error,
        "mse_ci": est.mse_ci,
        "total_events": est.total_events,
        "version": version_string(),
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", cfg.get("out"))
    return EXIT_OK


_MEANFIELD_KEYS = {"lambda", "M", "n", "x0", "seed", "t_max", "out"}


def _parse_x0(spec: str | None, lam: float, n: int, seed: int) -> np.ndarray:
    if spec in (None, "random"):
        return random_shifted_start(lam, n, seed)
    if spec == "zero":
        return np.zeros(n)
    try:
        vals = np.array([float(v) for v in spec.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(
            f"x0 must be 'random', 'zero', or comma-separated floats, got {spec!r}"
        ) from exc
    if vals.size != n:
        raise ConfigError(f"x0 has {vals.size} entries but n={n}")
    return vals


def _run_meanfield(args) -> int:
    cfg = _merged(
        args,
        _MEANFIELD_KEYS,
        {
            "lambda": args.lam,
            "M": args.big_m,
            "n": args.n,
            "x0": args.x0,
            "seed": args.seed,
            "t_max": args.t_max,
            "out": args.out,
        },
    )
    lam = float(_require(cfg, "lambda", "meanfield"))
    if cfg.get("n") is not None:
        n = int(cfg["n"])
    elif cfg.get("M") is not None:
        n = default_truncation(lam, int(cfg["M"]))
    else:
        n = 10
    x0 = _parse_x0(cfg.get("x0"), lam, n, int(cfg.get("seed", 0)))
    traj = integrate(x0, lam, t_max=cfg.get("t_max"))
    out = cfg.get("out")
    if out is None:
        header = ",".join(["t"] + [f"x_{k}" for k in range(1, n + 1)])
        rows = [header] + [
            ",".join(f"{v:.17g}" for v in np.concatenate([[t], row]))
            for t, row in zip(traj.times, traj.states)
        ]
        sys.stdout.write("\n".join(rows) + "\n")
    else:
        write_trajectory_csv(traj, out)
        print(f"wrote {out}")
    return EXIT_OK


_LYAPUNOV_KEYS = {"lambda", "n", "seed", "variant", "tolerance", "out"}


def _run_lyapunov_check(args) -> int:
    cfg = _merged(
        args,
        _LYAPUNOV_KEYS,
        {
            "lambda": args.lam,
            "n": args.n,
            "seed": args.seed,
            "variant": args.variant,
            "tolerance": args.tolerance,
            "out": args.out,
        },
    )
    lam = float(_require(cfg, "lambda", "lyapunov-check"))
    n = int(cfg.get("n", 10))
    variant = cfg.get("variant", "base")
    if variant not in ("base", "tilde"):
        raise ConfigError(f"variant must be base or tilde, got {variant!r}")
    tolerance = float(cfg.get("tolerance", 1e-6))
    if not tolerance > 0.0:
        raise ConfigError(f"tolerance must be positive, got {tolerance}")
    seed = int(cfg.get("seed", 0))
    cert = base_weights(lam, n) if variant == "base" else tilde_weights(lam, n)
    traj, _ = solve_to_equilibrium(random_shifted_start(lam, n, seed), lam)
    report = verify_decay(traj, cert, tolerance=tolerance)
    payload = {
        "certificate": {
            "variant": cert.variant,
            "lambda": cert.lam,
            "n": cert.n,
            "k_lambda": cert.k_lambda,
            "k_tilde": cert.k_tilde,
            "delta": cert.delta,
            "delta_tilde": cert.delta_tilde,
            "t_tilde": cert.t_tilde,
            "certified": cert.certified,
            "cases": cert.cases,
        },
        "decay": json.loads(report.to_json()),
        "seed": seed,
        "version": version_string(),
    }
    _emit(
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
        cfg.get("out"),
        default_name="decay_report.json",
    )
    print(
        f"decay check {'passed' if report.passed else 'FAILED'}: "
        f"max ratio {report.max_ratio:.6g} vs 1 + {tolerance:g}"
    )
    return EXIT_OK if report.passed else EXIT_NUMERICAL


_PERTURB_KEYS = {"lambda", "M", "n", "epsilon", "seed", "out"}


def _run_perturb_check(args) -> int:
    cfg = _merged(
        args,
        _PERTURB_KEYS,
        {
            "lambda": args.lam,
            "M": args.big_m,
            "n": args.n,
            "epsilon": args.epsilon,
            "seed": args.seed,
            "out": args.out,
        },
    )
    lam = float(_require(cfg, "lambda", "perturb-check"))
    n = int(cfg.get("n", 10))
    epsilon = float(cfg.get("epsilon", 1e-4))
    if not epsilon > 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    big_m = int(cfg.get("M", round(1.0 / epsilon)))
    if big_m < 2:
        raise ConfigError(f"M must be >= 2, got {big_m}")
    seed = int(cfg.get("seed", 0))
    cert = tilde_weights(lam, n)
    direction = np.zeros(n)
    direction[0] = 1.0
    setup = SensitivitySetup(
        x0=random_shifted_start(lam, n, seed), z=direction, epsilon=epsilon
    )
    traj, l1_integral = remainder(setup, lam)
    env = sensitivity_envelope_check(traj, cert)
    rem = remainder_bound_check(traj, cert, big_m=big_m, l1_integral=l1_integral)
    passed = env.passed and rem.early_passed and rem.late_passed and bool(rem.integral_passed)
    payload = {
        "lambda": lam,
        "n": n,
        "M": big_m,
        "epsilon": epsilon,
        "seed": seed,
        "envelope": {
            "max_excess": env.max_excess,
            "passed": env.passed,
            "envelope_integral": env.envelope_integral,
        },
        "remainder": {
            "sup_early": rem.sup_early,
            "early_bound": rem.early_bound,
            "early_passed": rem.early_passed,
            "late_max_excess": rem.late_max_excess,
            "late_passed": rem.late_passed,
            "l1_integral": rem.l1_integral,
            "integral_bound": rem.integral_bound,
            "integral_passed": rem.integral_passed,
            "noise_floor": rem.noise_floor,
        },
        "t_tilde": cert.t_tilde,
        "delta_tilde": cert.delta_tilde,
        "passed": passed,
        "version": version_string(),
    }
    _emit(
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
        cfg.get("out"),
        default_name="perturb_report.json",
    )
    print(f"perturbation checks {'passed' if passed else 'FAILED'}")
    return EXIT_OK if passed else EXIT_NUMERICAL


_STEIN_KEYS = {
    "lambda", "M", "n", "seed", "budget",
    "warmup_time", "horizon_time", "batches", "out",
}


def _run_stein_check(args) -> int:
    cfg = _merged(
        args,
        _STEIN_KEYS,
        {
            "lambda": args.lam,
            "M": args.big_m,
            "n": args.n,
            "seed": args.seed,
            "budget": args.budget,
            "out": args.out,
        },
    )
    lam = float(_require(cfg, "lambda", "stein-check"))
    big_m = int(_require(cfg, "M", "stein-check"))
    params = ModelParams(lam=lam, M=big_m)
    n = int(cfg["n"]) if cfg.get("n") is not None else default_truncation(lam, big_m)
    sim = SimConfig(
        seed=int(cfg.get("seed", 0)),
        warmup_time=cfg.get("warmup_time"),
        horizon_time=cfg.get("horizon_time"),
        batches=int(cfg.get("batches", 20)),
    )
    report = stein_decomposition(params, sim, n, budget=int(cfg.get("budget", 200)))
    passed = (
        abs(report.bar_residual) <= 3.0 * report.bar_ci
        and report.identity_ci_units <= 3.0
    )
    _emit(
        report.to_json(indent=2, sort_keys=True) + "\n",
        cfg.get("out"),
        default_name="stein_report.json",
    )
    print(
        f"stationary decomposition {'passed' if passed else 'FAILED'}: "
        f"mse {report.lhs_mse:.6g}, identity residual "
        f"{report.identity_ci_units:.2f} CI units over {report.n_states} states"
    )
    return EXIT_OK if passed else EXIT_NUMERICAL


def _run_rate_study(args) -> int:
    cfg = _merged(
        args,
        _CONFIG_KEYS | {"out"},
        {
            "lambda": args.lam,
            "M": args.big_m,
            "n": args.n,
            "seed": args.seed,
            "replications": args.replications,
            "out": args.out,
        },
    )
    out = cfg.pop("out", None)
    if out is not None:
        cfg["output_dir"] = out
    exp = ExperimentConfig.from_dict(cfg)
    result = rate_study(exp)
    outdir = exp.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    if exp.format == "csv":
        print(f"wrote {write_rate_study_csv(result, outdir / 'rate_study.csv')}")
    print(f"wrote {write_summary_json(result, outdir / 'summary.json')}")
    for lam, fit in sorted(result.fits.items()):
        print(
            f"lambda={lam:g}: slope {fit.slope:.4f} +/- {fit.stderr:.4f}, "
            f"corrected {fit.corrected_slope:.4f} +/- {fit.corrected_stderr:.4f} "
            f"({fit.points} points)"
        )
    failed = [r for r in result.rows if r.status != "ok"]
    for r in failed:
        print(f"cell (lambda={r.lam:g}, M={r.big_m}) {r.status}", file=sys.stderr)
    return EXIT_NUMERICAL if failed else EXIT_OK


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="twochoice",
        description="Two-choice queueing toolkit: simulation, mean-field "
        "integration, decay certificates, and the mean-square-error rate study.",
        epilog="exit status: 0 success, 1 configuration error, "
        "2 a checked numerical contract failed",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def common(p, with_lists=False):
        p.add_argument(
            "--config", metavar="PATH",
            help="JSON config file; explicit flags override its values",
        )
        if with_lists:
            p.add_argument(
                "--lambda", dest="lam", type=_float_list, metavar="L1,L2,...",
                help="arrival rates per server, each in (0, 1)",
            )
            p.add_argument(
                "--M", dest="big_m", type=_int_list, metavar="M1,M2,...",
                help="system sizes, distinct and increasing",
            )
        else:
            p.add_argument(
                "--lambda", dest="lam", type=float, metavar="L",
                help="arrival rate per server, in (0, 1)",
            )
            p.add_argument(
                "--M", dest="big_m", type=int, metavar="M", help="number of servers",
            )
        p.add_argument("--seed", type=int, metavar="S", help="base seed (default 0)")
        p.add_argument("--out", metavar="PATH", help="output file path")

    p = sub.add_parser(
        "simulate",
        help="run the event simulator, report stationary tail estimates",
        description="Run one stationary simulation and print (or write) a "
        "JSON summary with per-level tail means, 95% half-widths, and the "
        "mean-square deviation from the fixed point.",
    )
    common(p)
    p.add_argument("--n", type=int, metavar="N", help="tail levels to report (default 10)")
    p.add_argument("--d", type=int, metavar="D", help="choices per arrival (default 2)")
    p.set_defaults(runner=_run_simulate)

    p = sub.add_parser(
        "meanfield",
        help="integrate the truncated drift, write a trajectory CSV",
        description="Integrate the shifted system from x0 and write the "
        "trajectory at the solver's accepted steps.",
        epilog="CSV schema: header t,x_1,...,x_n; one row per accepted step; "
        "floats carry 17 significant digits.  A leading '# generated:' "
        "timestamp line is present when writing via --out.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(p)
    p.add_argument("--n", type=int, metavar="N", help="truncation depth (default 10, or from --M)")
    p.add_argument(
        "--x0", metavar="SPEC",
        help="start state: 'random' (default), 'zero', or comma-separated floats",
    )
    p.add_argument("--t-max", dest="t_max", type=float, metavar="T", help="integration horizon")
    p.set_defaults(runner=_run_meanfield)

    p = sub.add_parser(
        "lyapunov-check",
        help="verify certified exponential decay along a trajectory",
        description="Build the decay certificate for (lambda, n), integrate "
        "from a random start, and verify the weighted l1 norm stays under "
        "its certified exponential envelope.  Writes decay_report.json.",
    )
    common(p)
    p.add_argument("--n", type=int, metavar="N", help="truncation depth (default 10)")
    p.add_argument(
        "--variant", choices=("base", "tilde"),
        help="certificate variant to verify (default base)",
    )
    p.add_argument(
        "--tolerance", type=float, metavar="TOL",
        help="allowed relative overshoot of the envelope (default 1e-6)",
    )
    p.set_defaults(runner=_run_lyapunov_check)

    p = sub.add_parser(
        "perturb-check",
        help="verify sensitivity envelope and remainder bounds",
        description="Integrate the augmented system (base, sensitivity, "
        "perturbed) and verify the sensitivity envelope plus the "
        "second-order remainder bounds at perturbation scale 1/M.  Writes "
        "perturb_report.json.",
    )
    common(p)
    p.add_argument("--n", type=int, metavar="N", help="truncation depth (default 10)")
    p.add_argument(
        "--epsilon", type=float, metavar="EPS",
        help="perturbation size (default 1e-4; M defaults to round(1/epsilon))",
    )
    p.set_defaults(runner=_run_perturb_check)

    p = sub.add_parser(
        "stein-check",
        help="estimate the stationary mean-square error decomposition",
        description="Sample stationary states, solve the Poisson equation "
        "along trajectories, and report the mean-square error decomposition "
        "with batch-means half-widths.  Writes stein_report.json.",
    )
    common(p)
    p.add_argument("--n", type=int, metavar="N", help="truncation depth (default auto from M)")
    p.add_argument("--budget", type=int, metavar="B", help="snapshot budget (default 200)")
    p.set_defaults(runner=_run_stein_check)

    p = sub.add_parser(
        "rate-study",
        help="mean-square-error scaling study across system sizes",
        description="Estimate the stationary mean-square error over a grid "
        "of (lambda, M) cells with replications, fit ln(mse) against ln(M), "
        "and write rate_study.csv plus summary.json into the output "
        "directory.",
        epilog="CSV schema: header lambda,M,n,mse,ci,reps,seed,status,version "
        "after a '# generated:' timestamp comment; floats carry 17 "
        "significant digits; every row embeds its seed and package version; "
        "a failed cell keeps its row with status 'failed: <reason>'.  "
        "summary.json additionally holds per-lambda slope fits, raw and "
        "after dividing mse by (ln M)^3 (ln ln M)^2.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(p, with_lists=True)
    p.add_argument("--n", type=int, metavar="N", help="truncation depth (default auto per cell)")
    p.add_argument("--replications", type=int, metavar="R", help="replications per cell (default 8)")
    p.set_defaults(runner=_run_rate_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return EXIT_CONFIG
        return args.runner(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StiffnessError, ConvergenceTimeout, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
