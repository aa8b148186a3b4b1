"""Metric-layer tests: the naive baseline against hand-computed values,
record bookkeeping (k, time-since-last), curve/CI plumbing, eigenvalue
classification, and prediction-record serialization round-trips.
"""

import numpy as np
import pytest

from spectralsde.data import Trajectory
from spectralsde.filtering import Observation
from spectralsde.metrics import (
    PredictionRecord,
    baseline_naive,
    classify_spectrum,
    curve_vs_k,
    eigenvalue_summary,
    evaluation_report,
    model_predictions,
    model_predictions_holdout,
    mse_metric,
    naive_predictions,
    nll_metric,
    prior_only_predictions,
    records_from_json,
    records_to_json,
    report_csv_rows,
    write_csv,
)
from spectralsde.model import ModelConfig, PiecewiseSdeModel
from spectralsde.solver import ControlSignal


def traj_of(values_times, traj_id="t", m=1):
    obs = [Observation(t, np.atleast_1d(v), [True] * m) for t, v in values_times]
    return Trajectory(id=traj_id, context=np.zeros(0), observations=obs,
                      control=ControlSignal.empty())


def test_naive_baseline_hand_computed():
    # three hand-checked trajectories
    t1 = traj_of([(1.0, 2.0), (2.0, 4.0), (3.0, 1.0)], "a")
    t2 = traj_of([(0.5, 1.0), (2.5, 1.0)], "b")
    t3 = traj_of([(1.0, 0.0), (1.5, 3.0), (4.0, -3.0)], "c")
    records = naive_predictions([t1, t2, t3])
    # per-record squared errors, skipping the first (missing) prediction:
    # a: (4-2)^2=4, (1-4)^2=9 ; b: (1-1)^2=0 ; c: (3-0)^2=9, (-3-3)^2=36
    mse, _, n = mse_metric(records, min_k=1, seed=0)
    assert n == 5
    assert abs(mse - (4 + 9 + 0 + 9 + 36) / 5) < 1e-12
    # before any observation the prediction is reported missing
    assert records[0].mean is None
    assert records[0].k == 0


def test_baseline_naive_constant_after_one_observation():
    traj = traj_of([(1.0, 7.0)], "x")
    preds = baseline_naive(traj, [0.5, 1.5, 3.0, 9.0])
    assert np.isnan(preds[0][2][0])
    for tq, k, mean, last_t in preds[1:]:
        assert mean[0] == 7.0
        assert k == 1


def test_naive_per_coordinate_last_value():
    obs = [
        Observation(1.0, [1.0, 99.0], [True, False]),
        Observation(2.0, [2.0, 5.0], [False, True]),
        Observation(3.0, [3.0, 6.0], [True, True]),
    ]
    traj = Trajectory(id="m", context=np.zeros(0), observations=obs,
                      control=ControlSignal.empty())
    records = naive_predictions([traj])
    # at t=3: coord0 last seen 1.0 (t=1), coord1 last seen 5.0 (t=2)
    rec = records[2]
    assert rec.mean[0] == 1.0 and rec.mean[1] == 5.0
    assert rec.mask.tolist() == [True, True]
    # at t=2 the target is coord1, which has no earlier observation, so
    # the naive prediction for it is missing
    assert records[1].mask.tolist() == [False, False]


def test_model_records_bookkeeping():
    config = ModelConfig(latent_dim=2, obs_dim=1, context_dim=0)
    model = PiecewiseSdeModel(config, seed=0)
    traj = traj_of([(0.5, 0.1), (1.5, 0.4), (4.0, -0.2)], "bk")
    records = model_predictions(model, [traj])
    assert [r.k for r in records] == [0, 1, 2]
    assert np.isnan(records[0].time_since_last)
    assert records[1].time_since_last == 1.0
    assert records[2].time_since_last == 2.5
    for r in records:
        assert r.cov is not None and r.cov.shape == (1, 1)


def test_holdout_protocol_records():
    config = ModelConfig(latent_dim=2, obs_dim=1, context_dim=0)
    model = PiecewiseSdeModel(config, seed=1)
    traj = traj_of([(1.0, 0.2), (3.0, 0.5), (5.0, 0.1), (7.0, 0.7)], "h")
    records = model_predictions_holdout(model, [traj], t_split=4.0)
    assert [r.t for r in records] == [5.0, 7.0]
    assert all(r.k == 2 for r in records)
    prior_records = prior_only_predictions(model, [traj], t_split=4.0)
    assert all(r.k == 0 for r in prior_records)
    assert [r.t for r in prior_records] == [5.0, 7.0]


def test_threaded_evaluation_matches_sequential():
    config = ModelConfig(latent_dim=2, obs_dim=1, context_dim=0)
    model = PiecewiseSdeModel(config, seed=2)
    trajs = [traj_of([(0.5 + i * 0.1, 0.1 * i), (2.0, 0.3)], f"p{i}")
             for i in range(6)]
    seq = model_predictions(model, trajs, threads=1)
    par = model_predictions(model, trajs, threads=4)
    assert len(seq) == len(par)
    for a, b in zip(seq, par):
        assert a.traj_id == b.traj_id and a.t == b.t
        assert np.array_equal(a.mean, b.mean)


def test_report_and_csv_schema(tmp_path):
    records = [
        PredictionRecord("a", 1.0, 0, np.nan, np.array([1.0]),
                         np.array([[0.5]]), np.array([1.2]), np.array([True])),
        PredictionRecord("a", 2.0, 1, 1.0, np.array([0.5]),
                         np.array([[0.5]]), np.array([0.0]), np.array([True])),
        PredictionRecord("b", 1.5, 1, 0.5, np.array([2.0]),
                         np.array([[1.0]]), np.array([1.0]), np.array([True])),
    ]
    report = evaluation_report(records, split="test", protocol="standard", seed=0)
    assert report["metrics"]["mse"]["n"] == 2
    assert np.isfinite(report["metrics"]["nll"]["value"])
    rows = report_csv_rows(report)
    path = tmp_path / "report.csv"
    write_csv(rows, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "metric,split,x,value,ci_low,ci_high,n"
    assert all(len(line.split(",")) == 7 for line in lines[1:])


def test_bootstrap_ci_brackets_point():
    rng = np.random.default_rng(0)
    records = []
    for i in range(50):
        for j in range(4):
            err = rng.normal()
            records.append(PredictionRecord(
                f"t{i}", float(j), 1, 1.0, np.array([0.0]), None,
                np.array([err]), np.array([True])))
    mse, (lo, hi), n = mse_metric(records, min_k=1, seed=3)
    assert lo <= mse <= hi
    assert n == 200
    assert hi - lo < mse  # reasonably tight at 200 points


def test_curve_vs_k_monotone_bookkeeping():
    records = []
    for i in range(30):
        for k in range(3):
            records.append(PredictionRecord(
                f"t{i}", float(k), k, 1.0, np.array([0.0]), None,
                np.array([1.0 / (k + 1)]), np.array([True])))
    rows = curve_vs_k(records, seed=0)
    assert [r["x"] for r in rows] == [0.0, 1.0, 2.0]
    vals = [r["value"] for r in rows]
    assert vals[0] > vals[1] > vals[2]


def test_classify_spectrum_rules():
    assert classify_spectrum({"entry0.a": -0.77, "entry0.b": 1.98}) == "complex"
    assert classify_spectrum({"entry0.a": -0.03, "entry0.b": 0.83}) == "imaginary"
    assert classify_spectrum({"entry0.r": -0.7, "entry1.r": -0.19}) == "real"
    assert classify_spectrum({"entry0.a": -0.5, "entry0.b": 0.01}) == "real"


def test_eigenvalue_summary_constant_model():
    from test_model import a1_dynamics, rig_constant_model

    dyn = a1_dynamics()
    model = rig_constant_model(dyn, np.zeros(2), [0.5, 0.5])
    trajs = [traj_of([(1.0, 0.2), (2.0, 0.1), (5.0, 0.4)], f"e{i}")
             for i in range(5)]
    summary = eigenvalue_summary(model, trajs)
    assert summary["class"] == "complex"
    comps = summary["components"]
    assert abs(comps["entry0.a"]["mean"] - (-0.75)) < 1e-6
    assert abs(comps["entry0.b"]["mean"] - 1.984313483298443) < 1e-6
    assert comps["entry0.a"]["std"] < 1e-9


def test_records_json_roundtrip():
    records = [
        PredictionRecord("a", 1.0, 0, np.nan, None, None,
                         np.array([1.2]), np.array([True])),
        PredictionRecord("b", 2.0, 3, 0.7, np.array([0.5, 1.0]),
                         np.array([[0.5, 0.1], [0.1, 0.4]]),
                         np.array([0.0, 2.0]), np.array([True, False])),
    ]
    back = records_from_json(records_to_json(records))
    assert back[0].mean is None
    assert np.isnan(back[0].time_since_last)
    assert np.array_equal(back[1].mean, records[1].mean)
    assert np.array_equal(back[1].cov, records[1].cov)
    assert back[1].k == 3
    m1, _, _ = mse_metric(records, min_k=0, seed=0)
    m2, _, _ = mse_metric(back, min_k=0, seed=0)
    assert m1 == m2
