import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangecast.evaluation import (
    Sample,
    Summary,
    baseline_predictor,
    evaluate,
    iter_samples,
    model_predictor,
    passthrough_predictor,
    read_per_sample_csv,
    sample_cloud,
    time_prediction,
    write_boxplot_csv,
    write_per_sample_csv,
    write_summary_csv,
)
from rangecast.lidar_io import benchmark_scene, make_synthetic_sequence
from rangecast.network import ArchitectureConfig, build


@pytest.fixture(scope="module")
def moving_box_scene():
    return make_synthetic_sequence(benchmark_scene(seed=0, n_scans=14, ego_speed=0.0, object_speed=1.0))


def quantile_oracle(values, p):
    s = sorted(values)
    h = (len(s) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def test_sample_cloud():
    rng = np.random.default_rng(0)
    small = rng.normal(size=(10, 3))
    assert np.array_equal(sample_cloud(small, 20, 0), small)
    big = rng.normal(size=(100000, 3))
    sub = sample_cloud(big, 32768, 1)
    assert sub.shape == (32768, 3)
    assert len(np.unique(sub, axis=0)) == 32768
    assert np.array_equal(sub, sample_cloud(big, 32768, 1))
    with pytest.raises(ValueError):
        sample_cloud(big, 0, 1)


def test_quantile_convention():
    s = Summary.of([1, 2, 3, 4, 5])
    assert (s.min, s.q1, s.median, s.q3, s.max) == (1, 2, 3, 4, 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=60))
def test_summary_matches_oracle_and_is_ordered(values):
    s = Summary.of(values)
    assert s.min <= s.q1 <= s.median <= s.q3 <= s.max
    assert s.std >= 0
    for got, p in [(s.q1, 0.25), (s.median, 0.5), (s.q3, 0.75)]:
        assert got == pytest.approx(quantile_oracle(values, p), rel=1e-12, abs=1e-9)


def test_perfect_predictor_scores_zero(moving_box_scene):
    for mode in ("full", ("sampled", 500)):
        rep = evaluate(passthrough_predictor, moving_box_scene, mode)
        assert np.all(rep.values == 0.0)
        assert rep.overall.max == 0.0
        assert rep.steps == 5


def test_identity_error_grows_with_moving_box(moving_box_scene):
    rep = evaluate(baseline_predictor("identity", 5, benchmark_scene().intrinsics), moving_box_scene)
    means = rep.means()
    assert all(a < b for a, b in zip(means, means[1:]))
    assert rep.flagged == []


def test_csv_outputs_reproduce_aggregates(moving_box_scene, tmp_path):
    rep = evaluate(baseline_predictor("identity", 5, benchmark_scene().intrinsics), moving_box_scene)
    write_per_sample_csv(tmp_path / "per_sample.csv", rep)
    write_summary_csv(tmp_path / "summary.csv", rep)
    write_boxplot_csv(tmp_path / "box.csv", rep)
    table = read_per_sample_csv(tmp_path / "per_sample.csv")
    for k in range(1, 6):
        col = [table[(sid, k)] for sid in rep.sample_ids]
        assert Summary.of(col) == rep.per_step[k - 1]
    assert Summary.of([table[key] for key in sorted(table)]).mean == pytest.approx(rep.overall.mean, rel=1e-15)
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0].split(",")[:3] == ["step", "count", "mean"]
    assert [line.split(",")[0] for line in summary[1:]] == ["1", "2", "3", "4", "5", "all"]
    assert (tmp_path / "box.csv").read_text().splitlines()[0] == "step,min,Q1,median,Q3,max"


def test_empty_prediction_flags_sample(moving_box_scene):
    def sometimes_empty(s: Sample):
        out = passthrough_predictor(s)
        if s.index == 1:
            out[2] = np.zeros((0, 3))
        return out

    rep = evaluate(sometimes_empty, moving_box_scene)
    assert rep.flagged == [1]
    assert 1 not in rep.sample_ids
    assert rep.per_step[0].count == len(list(iter_samples(moving_box_scene))) - 1


def test_wrong_step_count_is_rejected(moving_box_scene):
    with pytest.raises(ValueError, match="expected 5"):
        evaluate(lambda s: s.future[:3], moving_box_scene)


def test_bad_mode():
    with pytest.raises(ValueError, match="mode"):
        evaluate(passthrough_predictor, [], "approximate")


def test_timing(moving_box_scene):
    sample = next(iter_samples(moving_box_scene))
    model = build(ArchitectureConfig.desk(), seed=0)
    timing = time_prediction(model_predictor(model, (10.0, 10.0)), sample, repeats=3)
    assert timing.median_ms > 0
    assert len(timing.raw_ms) == 3
    assert min(timing.raw_ms) <= timing.median_ms <= max(timing.raw_ms)
    with pytest.raises(ValueError, match="repeats"):
        time_prediction(passthrough_predictor, sample, repeats=2)
