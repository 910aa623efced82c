"""Experiment config, the rate study, and the file writers.

envelope_bound oracle at M = 16, constant 1:
    ln 16 = 2.772588722239781, ln ln 16 = 1.0197814405382262,
    2.772588722239781**3 * 1.0197814405382262**2 / 16
        = 1.3853215241293722
"""
import json
import math

import numpy as np
import pytest

from twochoice.core import equilibrium, unshift, ShiftedState
from twochoice.harness import (
    ExperimentConfig,
    envelope_bound,
    random_shifted_start,
    rate_study,
    version_string,
    write_rate_study_csv,
    write_summary_json,
    write_trajectory_csv,
)
from twochoice.meanfield import integrate


class TestExperimentConfig:
    def test_scalars_normalize_to_lists(self):
        cfg = ExperimentConfig.from_dict({"lambda": 0.7, "M": 64})
        assert cfg.lambdas == (0.7,)
        assert cfg.m_values == (64,)
        assert cfg.n is None and cfg.format == "csv"

    def test_auto_truncation_spelled_out(self):
        cfg = ExperimentConfig.from_dict({"lambda": 0.7, "M": 64, "n": "auto"})
        assert cfg.n is None
        cfg = ExperimentConfig.from_dict({"lambda": 0.7, "M": 64, "n": 12})
        assert cfg.n == 12

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys: horizon"):
            ExperimentConfig.from_dict({"lambda": 0.7, "M": 64, "horizon": 5})

    @pytest.mark.parametrize("missing", ["lambda", "M"])
    def test_required_keys(self, missing):
        raw = {"lambda": 0.7, "M": 64}
        del raw[missing]
        with pytest.raises(ValueError, match=missing):
            ExperimentConfig.from_dict(raw)

    def test_value_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"lambda": 1.5, "M": 64})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"lambda": 0.5, "M": 1})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"lambda": 0.5, "M": 64, "replications": 0})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"lambda": 0.5, "M": 64, "format": "xml"})
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"lambda": 0.5, "M": 64, "n": "deep"})

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"lambda": [0.5], "M": [16, 32], "seed": 9}))
        cfg = ExperimentConfig.from_json(path)
        assert cfg.seed == 9
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_json(tmp_path / "absent.json")


class TestRandomStart:
    def test_produces_valid_states(self):
        for seed in range(5):
            x = random_shifted_start(0.7, 8, seed)
            assert ShiftedState(x).in_box(0.7, tol=1e-12)
            tail = unshift(ShiftedState(x), 0.7)
            assert (np.diff(tail.s) <= 1e-12).all()

    def test_deterministic_per_seed(self):
        assert np.array_equal(
            random_shifted_start(0.5, 6, 3), random_shifted_start(0.5, 6, 3)
        )


class TestEnvelopeBound:
    def test_frozen_value(self):
        assert envelope_bound(16, 1.0) == pytest.approx(1.3853215241293722, rel=1e-15)

    def test_scales_linearly_in_constant(self):
        assert envelope_bound(64, 6.0) == pytest.approx(6 * envelope_bound(64, 1.0))


@pytest.fixture(scope="module")
def small_study():
    cfg = ExperimentConfig.from_dict(
        {
            "lambda": [0.5],
            "M": [16, 32, 64],
            "replications": 2,
            "seed": 11,
            "horizon_time": 1500.0,
        }
    )
    return rate_study(cfg)


class TestRateStudy:
    def test_rows_complete_and_ordered(self, small_study):
        assert [(r.lam, r.big_m) for r in small_study.rows] == [
            (0.5, 16), (0.5, 32), (0.5, 64),
        ]
        assert all(r.status == "ok" for r in small_study.rows)
        assert all(r.replications == 2 and r.seed == 11 for r in small_study.rows)

    def test_mse_decreases_with_size(self, small_study):
        mses = [r.mse for r in small_study.rows]
        assert mses[0] > mses[1] > mses[2]
        assert all(r.ci > 0 for r in small_study.rows)

    def test_slope_near_inverse_m(self, small_study):
        fit = small_study.fits[0.5]
        assert fit.points == 3
        assert -1.4 <= fit.slope <= -0.6
        assert fit.corrected_slope < fit.slope  # dividing out growing logs

    def test_auto_truncation_recorded(self, small_study):
        # ceil(3 ln M / ln 2) for M = 16, 32, 64
        assert [r.n_used for r in small_study.rows] == [12, 15, 18]

    def test_deterministic(self, small_study):
        again = rate_study(small_study.config)
        assert again.rows == small_study.rows

    def test_rejects_unordered_sizes(self):
        cfg = ExperimentConfig.from_dict({"lambda": 0.5, "M": [64, 16]})
        with pytest.raises(ValueError, match="increasing"):
            rate_study(cfg)
        cfg = ExperimentConfig.from_dict({"lambda": 0.5, "M": [16, 16]})
        with pytest.raises(ValueError, match="distinct"):
            rate_study(cfg)

    def test_failed_cells_flagged_not_dropped(self):
        cfg = ExperimentConfig.from_dict(
            {
                "lambda": [0.5],
                "M": [16, 32],
                "replications": 2,
                "warmup_time": 500.0,
                "horizon_time": 100.0,  # invalid at run time: every cell fails
            }
        )
        result = rate_study(cfg)
        assert len(result.rows) == 2
        assert all(r.status.startswith("failed:") for r in result.rows)
        assert all(math.isnan(r.mse) for r in result.rows)
        assert result.fits == {}

    def test_single_replication_uses_run_ci(self):
        cfg = ExperimentConfig.from_dict(
            {
                "lambda": 0.5,
                "M": 16,
                "replications": 1,
                "horizon_time": 1500.0,
            }
        )
        row = rate_study(cfg).rows[0]
        assert row.status == "ok" and row.ci > 0


class TestWriters:
    def test_rate_csv_schema(self, small_study, tmp_path):
        path = write_rate_study_csv(small_study, tmp_path / "rate_study.csv")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# generated: ")
        assert lines[1] == "lambda,M,n,mse,ci,reps,seed,status,version"
        assert len(lines) == 2 + len(small_study.rows)
        first = lines[2].split(",")
        assert float(first[0]) == 0.5 and int(first[1]) == 16
        assert float(first[3]) == small_study.rows[0].mse  # 17g round-trips
        assert first[8] == version_string()

    def test_csv_deterministic_modulo_timestamp(self, small_study, tmp_path):
        a = write_rate_study_csv(small_study, tmp_path / "a.csv").read_text()
        b = write_rate_study_csv(small_study, tmp_path / "b.csv").read_text()
        assert a.splitlines()[1:] == b.splitlines()[1:]

    def test_summary_json_content(self, small_study, tmp_path):
        path = write_summary_json(small_study, tmp_path / "summary.json")
        payload = json.loads(path.read_text())
        assert payload["version"] == version_string()
        assert len(payload["rows"]) == 3
        assert payload["rows"][0]["M"] == 16
        fit = payload["fits"]["0.5"]
        assert fit["slope"] == small_study.fits[0.5].slope
        assert ExperimentConfig.from_dict(payload["config"]) == small_study.config

    def test_trajectory_csv_schema(self, tmp_path):
        traj = integrate(random_shifted_start(0.5, 4, 1), 0.5, t_max=20.0)
        path = write_trajectory_csv(traj, tmp_path / "traj.csv")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# generated: ")
        assert lines[1] == "t,x_1,x_2,x_3,x_4"
        assert len(lines) == 2 + len(traj.times)
        row = np.array(lines[2].split(","), dtype=float)
        assert row[0] == 0.0
        assert np.array_equal(row[1:], traj.states[0])


class TestVersionString:
    def test_git_describe_shape(self):
        v = version_string()
        assert v.startswith("v")
        assert v[1].isdigit()
