"""Experiment orchestration: configs, the rate study, and file output.

The headline experiment estimates the stationary mean-square deviation
from equilibrium across a ladder of system sizes and fits the power law
in M, both raw and after dividing out the (ln M)^3 (ln ln M)^2 envelope.
Configuration comes from a JSON file (flags may override single values);
outputs are CSV/JSON with full provenance per row, deterministic given
config and seeds except for a timestamped comment line.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import metadata as _metadata
from pathlib import Path

import numpy as np
from scipy import stats

from .core import ModelParams, _check_lambda, equilibrium
from .meanfield import Trajectory, default_truncation
from .simulator import SimConfig, estimate_mse

__all__ = [
    "ExperimentConfig",
    "RateStudyRow",
    "SlopeFit",
    "RateStudyResult",
    "version_string",
    "random_shifted_start",
    "rate_study",
    "envelope_bound",
    "write_rate_study_csv",
    "write_summary_json",
    "write_trajectory_csv",
]

_log = logging.getLogger(__name__)


def version_string() -> str:
    """git-describe-style package version, embedded in every output row."""
    try:
        return "v" + _metadata.version("twochoice")
    except _metadata.PackageNotFoundError:
        return "v0.0.0+unknown"


def random_shifted_start(lam: float, n: int, rng=None) -> np.ndarray:
    """Random valid shifted state: sorted uniform tails recentered at s*."""
    rng = np.random.default_rng(rng)
    s = np.sort(rng.uniform(0.0, 1.0, int(n)))[::-1]
    return s - equilibrium(lam, n)


_CONFIG_KEYS = {
    "lambda",
    "M",
    "n",
    "seed",
    "replications",
    "warmup_time",
    "horizon_time",
    "batches",
    "output_dir",
    "format",
}


def _as_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


@dataclass(frozen=True)
class ExperimentConfig:
    """Rate-study parameters; n=None means ceil(3 ln M / ln(1/lam)) per cell."""

    lambdas: tuple[float, ...]
    m_values: tuple[int, ...]
    n: int | None = None
    seed: int = 0
    replications: int = 8
    warmup_time: float | None = None
    horizon_time: float | None = None
    batches: int = 20
    output_dir: Path = Path(".")
    format: str = "csv"

    def __post_init__(self):
        lambdas = tuple(_check_lambda(v) for v in self.lambdas)
        if not lambdas:
            raise ValueError("lambda list must be nonempty")
        m_values = tuple(int(m) for m in self.m_values)
        if not m_values:
            raise ValueError("M list must be nonempty")
        if any(m < 2 for m in m_values):
            raise ValueError(f"M values must be >= 2, got {m_values}")
        if self.n is not None and int(self.n) < 1:
            raise ValueError(f"n must be >= 1 or null for auto, got {self.n}")
        if self.replications < 1:
            raise ValueError(f"replications must be >= 1, got {self.replications}")
        if self.format not in ("csv", "json"):
            raise ValueError(f"format must be csv or json, got {self.format!r}")
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "m_values", m_values)
        object.__setattr__(self, "n", None if self.n is None else int(self.n))
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValueError(f"config must be a JSON object, got {type(raw).__name__}")
        unknown = sorted(set(raw) - _CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("lambda", "M"):
            if key not in raw:
                raise ValueError(f"config requires {key!r}")
        n = raw.get("n", "auto")
        if n == "auto":
            n = None
        elif not isinstance(n, int):
            raise ValueError(f'n must be an integer or "auto", got {n!r}')
        return cls(
            lambdas=tuple(_as_list(raw["lambda"])),
            m_values=tuple(_as_list(raw["M"])),
            n=n,
            seed=raw.get("seed", 0),
            replications=raw.get("replications", 8),
            warmup_time=raw.get("warmup_time"),
            horizon_time=raw.get("horizon_time"),
            batches=raw.get("batches", 20),
            output_dir=raw.get("output_dir", "."),
            format=raw.get("format", "csv"),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with path.open() as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "lambda": list(self.lambdas),
            "M": list(self.m_values),
            "n": "auto" if self.n is None else self.n,
            "seed": self.seed,
            "replications": self.replications,
            "warmup_time": self.warmup_time,
            "horizon_time": self.horizon_time,
            "batches": self.batches,
            "output_dir": str(self.output_dir),
            "format": self.format,
        }


@dataclass(frozen=True)
class RateStudyRow:
    lam: float
    big_m: int
    n_used: int
    mse: float
    ci: float
    replications: int
    seed: int
    status: str  # "ok" or "failed: <reason>"

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "M": self.big_m,
            "n": self.n_used,
            "mse": self.mse,
            "ci": self.ci,
            "reps": self.replications,
            "seed": self.seed,
            "status": self.status,
        }


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of ln(mse) on ln(M), raw and envelope-corrected."""

    slope: float
    stderr: float
    corrected_slope: float
    corrected_stderr: float
    points: int

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "stderr": self.stderr,
            "corrected_slope": self.corrected_slope,
            "corrected_stderr": self.corrected_stderr,
            "points": self.points,
        }


@dataclass(frozen=True)
class RateStudyResult:
    rows: tuple[RateStudyRow, ...]
    fits: dict[float, SlopeFit]
    config: ExperimentConfig
    version: str


def _log_envelope(big_m: int) -> float:
    return math.log(big_m) ** 3 * math.log(math.log(big_m)) ** 2


def envelope_bound(big_m: int, constant: float) -> float:
    """The rate envelope constant * (ln M)^3 (ln ln M)^2 / M."""
    return constant * _log_envelope(big_m) / big_m


def _fit_line(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    dof = xs.size - 2
    sxx = float(((xs - xs.mean()) ** 2).sum())
    if dof <= 0 or sxx == 0.0:
        return float(slope), float("nan")
    stderr = math.sqrt(float((resid**2).sum()) / dof / sxx)
    return float(slope), stderr


def _pool_replications(samples: list[tuple[float, float]]) -> tuple[float, float]:
    if len(samples) == 1:
        return samples[0]
    vals = np.array([m for m, _ in samples])
    tq = float(stats.t.ppf(0.975, vals.size - 1))
    return float(vals.mean()), float(tq * vals.std(ddof=1) / math.sqrt(vals.size))


def rate_study(
    config: ExperimentConfig, max_workers: int | None = None
) -> RateStudyResult:
    """Run the mean-square-error rate study described by config.

    Cells (lambda, M) fan out with their replications to a thread pool
    (the event kernel releases the GIL).  Replication r uses Philox
    stream r of the config seed, so cells share common random numbers
    across M while replications stay independent.  A cell with any
    failed replication is kept in the output flagged, never dropped.
    """
    ms = config.m_values
    if tuple(sorted(set(ms))) != ms:
        raise ValueError(f"rate study needs distinct increasing M values, got {ms}")

    def n_for(lam: float, big_m: int) -> int:
        return config.n if config.n is not None else default_truncation(lam, big_m)

    def one(lam: float, big_m: int, rep: int) -> tuple[float, float]:
        sim = SimConfig(
            seed=config.seed,
            warmup_time=config.warmup_time,
            horizon_time=config.horizon_time,
            batches=config.batches,
        )
        return estimate_mse(ModelParams(lam=lam, M=big_m), sim, n_for(lam, big_m), stream=rep)

    cells = [(lam, m) for lam in config.lambdas for m in ms]
    futures = {}
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for lam, m in cells:
            for rep in range(config.replications):
                futures[(lam, m, rep)] = pool.submit(one, lam, m, rep)

    rows = []
    for lam, m in cells:
        samples: list[tuple[float, float]] = []
        failure = None
        for rep in range(config.replications):
            try:
                samples.append(futures[(lam, m, rep)].result())
            except Exception as exc:  # noqa: BLE001 - cell flagged, run continues
                failure = failure or f"failed: {exc}"
        if failure is None:
            mse, ci = _pool_replications(samples)
            status = "ok"
        else:
            mse, ci, status = float("nan"), float("nan"), failure
        rows.append(
            RateStudyRow(
                lam=lam,
                big_m=m,
                n_used=n_for(lam, m),
                mse=mse,
                ci=ci,
                replications=config.replications,
                seed=config.seed,
                status=status,
            )
        )

    fits: dict[float, SlopeFit] = {}
    for lam in config.lambdas:
        ok = [r for r in rows if r.lam == lam and r.status == "ok"]
        if len(ok) < 2:
            continue
        xs = np.log([r.big_m for r in ok])
        ys = np.log([r.mse for r in ok])
        corrected = ys - np.log([_log_envelope(r.big_m) for r in ok])
        slope, err = _fit_line(xs, ys)
        cslope, cerr = _fit_line(xs, corrected)
        fits[lam] = SlopeFit(slope, err, cslope, cerr, len(ok))

    by_m: dict[int, dict[float, float]] = {}
    for r in rows:
        if r.status == "ok":
            by_m.setdefault(r.big_m, {})[r.lam] = r.mse
    for m, per_lam in sorted(by_m.items()):
        if len(per_lam) > 1:
            ordered = sorted(per_lam.items())
            _log.info(
                "mse at M=%d across lambda: %s",
                m,
                ", ".join(f"{lam:g}: {mse:.6g}" for lam, mse in ordered),
            )

    return RateStudyResult(
        rows=tuple(rows), fits=fits, config=config, version=version_string()
    )


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _generated_line() -> str:
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return f"# generated: {stamp}"


def write_rate_study_csv(result: RateStudyResult, path) -> Path:
    """rate_study.csv: one provenance-complete row per (lambda, M) cell.

    The `# generated:` comment line carries the only nondeterminism;
    everything after it is byte-identical across reruns of one config.
    """
    path = Path(path)
    lines = [
        _generated_line(),
        "lambda,M,n,mse,ci,reps,seed,status,version",
    ]
    for r in result.rows:
        lines.append(
            ",".join(
                [
                    _fmt(r.lam),
                    str(r.big_m),
                    str(r.n_used),
                    _fmt(r.mse),
                    _fmt(r.ci),
                    str(r.replications),
                    str(r.seed),
                    r.status.replace(",", ";"),
                    result.version,
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def write_summary_json(result: RateStudyResult, path) -> Path:
    """summary.json: rows, per-lambda fits, config echo; fully deterministic."""
    path = Path(path)
    payload = {
        "version": result.version,
        "config": result.config.to_dict(),
        "rows": [r.to_dict() for r in result.rows],
        "fits": {f"{lam:.17g}": fit.to_dict() for lam, fit in result.fits.items()},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    """traj.csv with header t,x_1..x_n at the solver's accepted steps."""
    path = Path(path)
    n = traj.states.shape[1]
    lines = [
        _generated_line(),
        ",".join(["t"] + [f"x_{k}" for k in range(1, n + 1)]),
    ]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in row]))
    path.write_text("\n".join(lines) + "\n")
    return path
