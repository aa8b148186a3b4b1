"""Evaluation protocols, metric computations and report assembly.

Predictions are flat records (trajectory id, time, observations seen so
far, time since the last seen observation, predictive mean/cov, target,
mask).  Metric computations are pure functions of the record list, so
re-running them on saved predictions is idempotent.  Confidence
intervals come from a seeded trajectory-level bootstrap.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import gaussian_nll
from .data import Trajectory
from .errors import ConfigError, DataError
from .io_utils import fmt_float, parse_float
from .model import PiecewiseSdeModel
from .spectral import ComplexPair, RealEig

BOOTSTRAP_RESAMPLES = 1000

# eigenvalue-class decision thresholds
IMAG_DOMINANCE = 0.1   # "imaginary" when |mean real| < 0.1 |mean imag|
IMAG_FLOOR = 0.05      # "real" when mean |imag| falls below this


@dataclass
class PredictionRecord:
    traj_id: str
    t: float
    k: int                      # observations seen before this prediction
    time_since_last: float      # nan when nothing was seen yet
    mean: Optional[np.ndarray]  # None marks a missing (undefined) prediction
    cov: Optional[np.ndarray]   # None for point predictors
    target: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# Prediction generators
# ---------------------------------------------------------------------------

def _map_trajectories(fn, trajectories, threads=1):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(fn, trajectories))
    else:
        chunks = [fn(t) for t in trajectories]
    return [rec for chunk in chunks for rec in chunk]


def model_predictions(model: PiecewiseSdeModel, trajectories, threads=1):
    """Standard protocol: predict each observation before filtering it."""

    def one(traj: Trajectory):
        times = [o.t for o in traj.observations]
        pred = model.run_sequence(traj, times)
        out = []
        last_t = None
        for k, (obs, mean, cov) in enumerate(
            zip(traj.observations, pred.means, pred.covs)
        ):
            out.append(PredictionRecord(
                traj_id=traj.id, t=obs.t, k=k,
                time_since_last=(obs.t - last_t) if last_t is not None else np.nan,
                mean=mean, cov=cov, target=obs.y, mask=obs.mask,
            ))
            last_t = obs.t
        return out

    return _map_trajectories(one, trajectories, threads)


def model_predictions_holdout(model: PiecewiseSdeModel, trajectories,
                              t_split: float, threads=1):
    """Condition on every observation up to t_split, then forecast the
    remaining observation times."""

    def one(traj: Trajectory):
        seen = [o for o in traj.observations if o.t <= t_split]
        future = [o for o in traj.observations if o.t > t_split]
        if not future:
            return []
        clipped = Trajectory(
            id=traj.id, context=traj.context, observations=seen,
            control=traj.control, truth=None, meta=traj.meta, t0=traj.t0,
        )
        pred = model.run_sequence(clipped, [o.t for o in future])
        last_t = seen[-1].t if seen else None
        out = []
        for obs, mean, cov in zip(future, pred.means, pred.covs):
            out.append(PredictionRecord(
                traj_id=traj.id, t=obs.t, k=len(seen),
                time_since_last=(obs.t - last_t) if last_t is not None else np.nan,
                mean=mean, cov=cov, target=obs.y, mask=obs.mask,
            ))
        return out

    return _map_trajectories(one, trajectories, threads)


def prior_only_predictions(model: PiecewiseSdeModel, trajectories,
                           t_split: Optional[float] = None, threads=1):
    """Zero-shot predictor: never conditions on any observation."""

    def one(traj: Trajectory):
        targets = traj.observations
        if t_split is not None:
            targets = [o for o in targets if o.t > t_split]
        if not targets:
            return []
        empty = Trajectory(id=traj.id, context=traj.context, observations=[],
                           control=traj.control, truth=None, meta=traj.meta,
                           t0=traj.t0)
        pred = model.run_sequence(empty, [o.t for o in targets])
        return [
            PredictionRecord(traj_id=traj.id, t=obs.t, k=0,
                             time_since_last=np.nan, mean=mean, cov=cov,
                             target=obs.y, mask=obs.mask)
            for obs, mean, cov in zip(targets, pred.means, pred.covs)
        ]

    return _map_trajectories(one, trajectories, threads)


def baseline_naive(traj: Trajectory, query_times) -> list:
    """No-dynamics baseline: repeat the most recent observed value of each
    coordinate; before a coordinate's first observation the prediction is
    missing (None mean entry handled at record level).
    """
    m = traj.observations[0].y.shape[0] if traj.observations else 1
    out = []
    obs_iter = list(traj.observations)
    last = np.full(m, np.nan)
    last_t = None
    k = 0
    for tq in query_times:
        while obs_iter and obs_iter[0].t < tq:
            o = obs_iter.pop(0)
            last[o.mask] = o.y[o.mask]
            last_t = o.t
            k += 1
        out.append((tq, k, last.copy(), last_t))
    return out


def naive_predictions(trajectories, threads=1):
    """Standard-protocol records for the last-observation baseline."""

    def one(traj: Trajectory):
        queries = [o.t for o in traj.observations]
        preds = baseline_naive(traj, queries)
        recs = []
        for obs, (tq, k, mean, last_t) in zip(traj.observations, preds):
            have = ~np.isnan(mean)
            recs.append(PredictionRecord(
                traj_id=traj.id, t=obs.t, k=k,
                time_since_last=(tq - last_t) if last_t is not None else np.nan,
                mean=mean if have.any() else None, cov=None,
                target=obs.y, mask=obs.mask & have,
            ))
        return recs

    return _map_trajectories(one, trajectories, threads)


# ---------------------------------------------------------------------------
# Metric computations
# ---------------------------------------------------------------------------

def _square_errors(rec: PredictionRecord):
    if rec.mean is None or not rec.mask.any():
        return None
    sel = np.flatnonzero(rec.mask)
    err = rec.target[sel] - rec.mean[sel]
    return float(err @ err), sel.size


def _record_nll(rec: PredictionRecord):
    if rec.cov is None or rec.mean is None or not rec.mask.any():
        return None
    return gaussian_nll(rec.mean, rec.cov, rec.target, rec.mask)


def _per_traj_sums(records, value_fn):
    sums = {}
    for rec in records:
        out = value_fn(rec)
        if out is None:
            continue
        if isinstance(out, tuple):
            val, cnt = out
        else:
            val, cnt = out, 1
        s = sums.setdefault(rec.traj_id, [0.0, 0])
        s[0] += val
        s[1] += cnt
    return sums


def _bootstrap_mean(sums: dict, seed: int, n_boot=BOOTSTRAP_RESAMPLES):
    """Trajectory-level bootstrap CI of sum(values)/sum(counts)."""
    if not sums:
        return np.nan, (np.nan, np.nan), 0
    vals = np.asarray([s[0] for s in sums.values()])
    cnts = np.asarray([s[1] for s in sums.values()])
    point = vals.sum() / cnts.sum()
    rng = np.random.default_rng(seed)
    n = len(vals)
    idx = rng.integers(0, n, size=(n_boot, n))
    boot = vals[idx].sum(axis=1) / np.maximum(cnts[idx].sum(axis=1), 1)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return float(point), (float(lo), float(hi)), int(cnts.sum())


def mse_metric(records, min_k=1, seed=0):
    eligible = [r for r in records if r.k >= min_k]
    return _bootstrap_mean(_per_traj_sums(eligible, _square_errors), seed)


def nll_metric(records, min_k=0, seed=0):
    eligible = [r for r in records if r.k >= min_k]
    return _bootstrap_mean(_per_traj_sums(eligible, _record_nll), seed)


def curve_vs_k(records, seed=0, max_points=30):
    """Rows of (k, mse, ci_low, ci_high, n) for every k with data."""
    rows = []
    ks = sorted({r.k for r in records})[:max_points]
    for k in ks:
        subset = [r for r in records if r.k == k]
        point, (lo, hi), n = _bootstrap_mean(
            _per_traj_sums(subset, _square_errors), seed + k
        )
        if n:
            rows.append({"x": float(k), "value": point,
                         "ci_low": lo, "ci_high": hi, "n": n})
    return rows


def curve_vs_time_since_last(records, bin_edges=None, seed=0):
    if bin_edges is None:
        bin_edges = np.array([0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0])
    rows = []
    for lo_e, hi_e in zip(bin_edges[:-1], bin_edges[1:]):
        subset = [r for r in records
                  if np.isfinite(r.time_since_last)
                  and lo_e <= r.time_since_last < hi_e]
        point, (lo, hi), n = _bootstrap_mean(
            _per_traj_sums(subset, _square_errors), seed + int(100 * hi_e)
        )
        if n:
            rows.append({"x": float(0.5 * (lo_e + hi_e)), "value": point,
                         "ci_low": lo, "ci_high": hi, "n": n})
    return rows


# ---------------------------------------------------------------------------
# Spectrum interpretability
# ---------------------------------------------------------------------------

def spectrum_components(spectrum):
    """Flat (name, value) pairs of a canonical spectrum."""
    comps = []
    for i, e in enumerate(spectrum.entries):
        if isinstance(e, RealEig):
            comps.append((f"entry{i}.r", e.r))
        else:
            comps.append((f"entry{i}.a", e.a))
            comps.append((f"entry{i}.b", e.b))
    return comps


def classify_spectrum(mean_components: dict) -> str:
    """Class label from component means: imaginary when the mean real part
    is dominated by the mean frequency, real when frequencies vanish (or
    there are none), complex otherwise."""
    imags = [v for k, v in mean_components.items() if k.endswith(".b")]
    reals = [v for k, v in mean_components.items()
             if k.endswith(".r") or k.endswith(".a")]
    mean_imag = float(np.mean(np.abs(imags))) if imags else 0.0
    mean_real = float(np.mean(reals)) if reals else 0.0
    if imags and abs(mean_real) < IMAG_DOMINANCE * mean_imag:
        return "imaginary"
    if not imags or mean_imag < IMAG_FLOOR:
        return "real"
    return "complex"


def eigenvalue_summary(model: PiecewiseSdeModel, trajectories, threads=1):
    """Per-component mean/std of the emitted eigenvalues across test
    trajectories (per-trajectory averages of all interval emissions),
    plus the class label."""

    def one(traj):
        spectra = model.interval_spectra(traj)
        if not spectra:
            return []
        acc = {}
        for spec in spectra:
            for name, val in spectrum_components(spec):
                acc.setdefault(name, []).append(val)
        return [{name: float(np.mean(vals)) for name, vals in acc.items()}]

    per_traj = _map_trajectories(one, trajectories, threads)
    if not per_traj:
        return {"components": {}, "class": "real", "n_trajectories": 0}
    names = sorted(per_traj[0])
    comps = {}
    for name in names:
        vals = np.asarray([p[name] for p in per_traj if name in p])
        comps[name] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    means = {name: c["mean"] for name, c in comps.items()}
    return {
        "components": comps,
        "class": classify_spectrum(means),
        "n_trajectories": len(per_traj),
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def evaluation_report(records, split: str, protocol: str, seed: int = 0) -> dict:
    min_k = 0 if protocol.startswith("holdout") else 1
    mse, mse_ci, mse_n = mse_metric(records, min_k=min_k, seed=seed)
    nll, nll_ci, nll_n = nll_metric(records, min_k=min_k, seed=seed + 1)
    zs = [r for r in records if r.k == 0]
    zs_mse, zs_ci, zs_n = mse_metric(zs, min_k=0, seed=seed + 2)
    report = {
        "protocol": protocol,
        "split": split,
        "n_records": len(records),
        "metrics": {
            "mse": {"value": mse, "ci_low": mse_ci[0], "ci_high": mse_ci[1],
                    "n": mse_n},
            "nll": {"value": nll, "ci_low": nll_ci[0], "ci_high": nll_ci[1],
                    "n": nll_n},
            "mse_zero_shot": {"value": zs_mse, "ci_low": zs_ci[0],
                              "ci_high": zs_ci[1], "n": zs_n},
        },
        "curves": {
            "mse_vs_k": curve_vs_k(records, seed=seed + 3),
            "mse_vs_time_since_last": curve_vs_time_since_last(records,
                                                               seed=seed + 4),
        },
    }
    return report


def report_csv_rows(report: dict) -> list:
    """Schema: metric, split, x, value, ci_low, ci_high, n."""
    rows = []
    split = report["split"]
    for name, m in report["metrics"].items():
        rows.append([name, split, "", m["value"], m["ci_low"], m["ci_high"],
                     m["n"]])
    for curve_name, points in report.get("curves", {}).items():
        for p in points:
            rows.append([curve_name, split, p["x"], p["value"], p["ci_low"],
                         p["ci_high"], p["n"]])
    if "ood" in report:
        rows.append(["ood_degradation_ratio", split, "",
                     report["ood"]["ratio"], "", "", report["ood"]["n"]])
    if "eigen" in report:
        for name, comp in report["eigen"]["components"].items():
            rows.append([f"eig.{name}.mean", split, "", comp["mean"], "", "",
                         report["eigen"]["n_trajectories"]])
            rows.append([f"eig.{name}.std", split, "", comp["std"], "", "",
                         report["eigen"]["n_trajectories"]])
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,split,x,value,ci_low,ci_high,n\n")
        for row in rows:
            cells = []
            for cell in row:
                if isinstance(cell, float):
                    cells.append("" if np.isnan(cell) else fmt_float(cell))
                else:
                    cells.append(str(cell))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# Prediction (de)serialization for the predict / evaluate round-trip
# ---------------------------------------------------------------------------

def records_to_json(records) -> list:
    out = []
    for r in records:
        obj = {
            "traj_id": r.traj_id,
            "t": fmt_float(r.t),
            "k": r.k,
            "time_since_last": (fmt_float(r.time_since_last)
                                if np.isfinite(r.time_since_last) else None),
            "mean": None if r.mean is None else [fmt_float(v) for v in r.mean],
            "cov": None if r.cov is None else [[fmt_float(v) for v in row]
                                               for row in r.cov],
            "target": [fmt_float(v) for v in r.target],
            "mask": [bool(b) for b in r.mask],
        }
        out.append(obj)
    return out


def records_from_json(objs) -> list:
    records = []
    for o in objs:
        try:
            records.append(PredictionRecord(
                traj_id=o["traj_id"],
                t=parse_float(o["t"]),
                k=int(o["k"]),
                time_since_last=(parse_float(o["time_since_last"])
                                 if o["time_since_last"] is not None else np.nan),
                mean=(None if o["mean"] is None
                      else np.asarray([parse_float(v) for v in o["mean"]])),
                cov=(None if o["cov"] is None
                     else np.asarray([[parse_float(v) for v in row]
                                      for row in o["cov"]])),
                target=np.asarray([parse_float(v) for v in o["target"]]),
                mask=np.asarray(o["mask"], dtype=bool),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed prediction record: {exc}") from exc
    return records
