"""Piecewise-linear latent SDE forecaster with per-interval adapted dynamics.

A sequence starts from a context-derived prior over the shifted latent
state.  Time is cut into intervals at the update grid and at observation
arrivals; at each interval start a hypernetwork (one net emitting the
weights of a second net that reads the current belief) re-emits the
spectral dynamics (basis, rates, diffusion) for the interval.  Beliefs
propagate in closed form, observations condition them, and predictions at
arbitrary query times come from the un-shifted observable block inflated
by the observation noise.  The asymptotic state and observation noise are
emitted once per sequence by the prior net; the control map is a single
global parameter, masked so control can be kept off the observed
coordinates.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Mlp, Tape, Var, adam_step, packed_size
from .data import Trajectory
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .graph_ops import (
    blocks_from_rates,
    build_basis_op,
    condition_op,
    diag_psd_op,
    propagate_op,
    tril_psd_op,
)
from .io_utils import decode_array, encode_array
from .solver import ControlSignal, GaussianBelief
from .spectral import ComplexPair, EigenBasis, RealEig, SpectralDynamics, canonicalize

CHECKPOINT_FORMAT_VERSION = 1

# interval boundaries closer than this are merged
BOUNDARY_DEDUP = 1e-9


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class ModelConfig:
    """Structural hyperparameters of the forecaster."""

    latent_dim: int
    obs_dim: int
    control_dim: int = 0
    context_dim: int = 0
    n_complex_pairs: int = 0
    update_interval: float = 1.0
    stability_constraint: bool = False
    control_mask: Optional[list] = None
    hypernet_hidden: tuple = (16,)
    target_hidden: tuple = (16,)
    prior_hidden: tuple = (16,)
    belief_encoding: str = "diag"
    restart_grid_on_observation: bool = False

    def __post_init__(self):
        n, m = self.latent_dim, self.obs_dim
        if 2 * self.n_complex_pairs > n:
            raise ConfigError("2 * n_complex_pairs must not exceed latent_dim")
        if m > n:
            raise ConfigError("obs_dim must not exceed latent_dim")
        if self.update_interval <= 0:
            raise ConfigError("update_interval must be positive")
        if self.belief_encoding not in ("diag", "full"):
            raise ConfigError(f"unknown belief_encoding {self.belief_encoding!r}")
        self.hypernet_hidden = tuple(self.hypernet_hidden)
        self.target_hidden = tuple(self.target_hidden)
        self.prior_hidden = tuple(self.prior_hidden)
        if self.control_mask is not None:
            mask = np.asarray(self.control_mask, dtype=bool)
            if mask.shape != (n, self.control_dim):
                raise ConfigError(
                    f"control_mask must be {n}x{self.control_dim}, got {mask.shape}"
                )
            self.control_mask = mask

    @property
    def n_real(self) -> int:
        return self.latent_dim - 2 * self.n_complex_pairs

    @property
    def rate_dim(self) -> int:
        return self.n_real + 2 * self.n_complex_pairs

    @property
    def belief_dim(self) -> int:
        n = self.latent_dim
        return 2 * n if self.belief_encoding == "diag" else n + n * n

    @property
    def head_dim(self) -> int:
        n = self.latent_dim
        return n * n + self.rate_dim + n * (n + 1) // 2

    @property
    def prior_out_dim(self) -> int:
        n, m = self.latent_dim, self.obs_dim
        return 3 * n + m * (m + 1) // 2

    def target_sizes(self) -> tuple:
        return (self.belief_dim, *self.target_hidden, self.head_dim)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            if isinstance(v, np.ndarray):
                v = [[bool(x) for x in row] for row in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"latent_dim", "obs_dim"} - set(obj)
        if missing:
            raise ConfigError(f"missing model config keys: {sorted(missing)}")
        return cls(**obj)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    obs_keep_prob: float = 0.8
    min_obs_kept: int = 2
    seed: int = 0
    max_steps: Optional[int] = None
    early_stop_patience: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 < self.obs_keep_prob <= 1.0:
            raise ConfigError("obs_keep_prob must be in (0, 1]")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SequencePrediction:
    """Predictive observable distribution per query time, with the interval
    dynamics that produced each prediction."""

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    dynamics: list


def _net_sizes(in_dim, hidden, out_dim):
    # a zero-dimensional input collapses the net to its (learned) bias
    if in_dim == 0:
        return (0, out_dim)
    return (in_dim, *hidden, out_dim)


class PiecewiseSdeModel:
    """Trainable model: prior net, hypernetwork, global control map."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.prior_net = Mlp.create(
            _net_sizes(c.context_dim, c.prior_hidden, c.prior_out_dim), rng
        )
        g2_params = packed_size(c.target_sizes())
        self.hyper_net = Mlp.create(
            _net_sizes(c.context_dim, c.hypernet_hidden, g2_params), rng
        )
        # small final-layer scale keeps the emitted target net near zero at
        # init, which maps to near-constant, well-conditioned dynamics
        last = self.hyper_net.weights[-1]
        last.value *= 0.1
        self.hyper_net.biases[-1].value = rng.normal(
            0.0, 0.1 / np.sqrt(max(1, c.belief_dim)), size=g2_params
        )
        self._seed_initial_spectrum(rng, g2_params)
        self.B = Var(rng.normal(0.0, 0.3, size=(c.latent_dim, c.control_dim)))
        if c.control_mask is not None:
            self.B.value *= c.control_mask

    def _seed_initial_spectrum(self, rng, g2_params: int) -> None:
        """Spread the initial emitted spectrum across seeds: decay rates
        uniform in [0.15, 1.0] and pair frequencies log-uniform in
        [0.5, 2.5].  Frequency fitting is multimodal, so multistart over
        seeds needs the starting frequencies to differ.
        """
        c = self.config
        bias = self.hyper_net.biases[-1].value
        head_base = g2_params - c.head_dim + c.latent_dim ** 2
        rates0 = rng.uniform(0.15, 1.0, size=c.n_real + c.n_complex_pairs)
        freqs0 = np.exp(rng.uniform(np.log(0.5), np.log(2.5),
                                    size=c.n_complex_pairs))

        def raw_rate(x):
            # the head maps raw -> -softplus(raw) under the constraint,
            # raw -> raw otherwise
            return _softplus_inv(x) if c.stability_constraint else -x

        for i in range(c.n_real):
            bias[head_base + i] = raw_rate(rates0[i])
        for p in range(c.n_complex_pairs):
            off = head_base + c.n_real + 2 * p
            bias[off] = raw_rate(rates0[c.n_real + p])
            bias[off + 1] = _softplus_inv(freqs0[p])

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list:
        out = []
        for i, (W, b) in enumerate(zip(self.prior_net.weights, self.prior_net.biases)):
            out.append((f"prior.W{i}", W))
            out.append((f"prior.b{i}", b))
        for i, (W, b) in enumerate(zip(self.hyper_net.weights, self.hyper_net.biases)):
            out.append((f"hyper.W{i}", W))
            out.append((f"hyper.b{i}", b))
        out.append(("B", self.B))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, state: dict) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=float)
            if arr.shape != p.value.shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, "
                                  f"expected {p.value.shape}")
            p.value = arr.copy()

    # -- forward building blocks -------------------------------------------

    def _check_context(self, context) -> np.ndarray:
        context = np.asarray(context, dtype=float).reshape(-1)
        if context.shape[0] != self.config.context_dim:
            raise DimensionError(
                f"context must have length {self.config.context_dim}, "
                f"got {context.shape[0]}"
            )
        return context

    def _prior_graph(self, tape: Tape, context: np.ndarray):
        n, m = self.config.latent_dim, self.config.obs_dim
        out = ad.mlp_forward(self.prior_net, context, tape)
        mu0 = ad.gather(tape, out, np.arange(n))
        sigma0 = diag_psd_op(tape, ad.gather(tape, out, np.arange(n, 2 * n)))
        alpha = ad.gather(tape, out, np.arange(2 * n, 3 * n))
        r_raw = ad.gather(tape, out, np.arange(3 * n, 3 * n + m * (m + 1) // 2))
        R = tril_psd_op(tape, r_raw, m)
        return mu0, sigma0, alpha, R

    def _emit_graph(self, tape: Tape, layers, mu, sigma):
        """Target-net pass: belief encoding -> (normalized basis, rates, Q)."""
        c = self.config
        n = c.latent_dim
        if c.belief_encoding == "diag":
            enc = ad.concat(tape, [mu, ad.diag_part(tape, sigma)])
        else:
            enc = ad.concat(tape, [mu, ad.reshape(tape, sigma, (-1,))])
        raw = ad.forward_layers(tape, layers, enc)
        V_pre = ad.reshape(tape, ad.gather(tape, raw, np.arange(n * n)), (n, n))
        V = build_basis_op(tape, V_pre, c.n_real, c.n_complex_pairs)
        lam_raw = ad.gather(tape, raw, np.arange(n * n, n * n + c.rate_dim))
        lam = self._rates_graph(tape, lam_raw)
        q_raw = ad.gather(
            tape, raw, np.arange(n * n + c.rate_dim, c.head_dim)
        )
        Q = tril_psd_op(tape, q_raw, n)
        return V, lam, Q

    def _rates_graph(self, tape: Tape, lam_raw):
        """Constrain raw head outputs into the packed rate vector: real
        parts forced negative under the stability flag, pair frequencies
        always positive."""
        c = self.config
        nr, npairs = c.n_real, c.n_complex_pairs
        real_part_idx = list(range(nr)) + [nr + 2 * p for p in range(npairs)]
        b_idx = [nr + 2 * p + 1 for p in range(npairs)]
        rp_raw = ad.gather(tape, lam_raw, np.asarray(real_part_idx, int))
        if c.stability_constraint:
            rp = ad.scale(tape, ad.softplus(tape, rp_raw), -1.0)
        else:
            rp = rp_raw
        if npairs == 0:
            return rp
        bpos = ad.softplus(tape, ad.gather(tape, lam_raw, np.asarray(b_idx, int)))
        merged = ad.concat(tape, [rp, bpos])
        perm = list(range(nr))
        for p in range(npairs):
            perm += [nr + p, nr + npairs + p]
        return ad.gather(tape, merged, np.asarray(perm, int))

    def _effective_B(self, tape: Tape):
        if self.config.control_mask is not None:
            return ad.mul(tape, self.B, self.config.control_mask.astype(float))
        return self.B

    def _dynamics_snapshot(self, V, lam, Q, alpha, R, B) -> SpectralDynamics:
        c = self.config
        lam_v = ad.value_of(lam)
        entries = [RealEig(float(lam_v[i])) for i in range(c.n_real)]
        entries += [
            ComplexPair(float(lam_v[c.n_real + 2 * p]),
                        float(lam_v[c.n_real + 2 * p + 1]))
            for p in range(c.n_complex_pairs)
        ]
        spectrum, basis = canonicalize(entries, ad.value_of(V))
        Qv = ad.value_of(Q)
        return SpectralDynamics(
            spectrum, basis, Q=0.5 * (Qv + Qv.T), B=ad.value_of(B),
            alpha=ad.value_of(alpha), R=ad.value_of(R),
        )

    # -- public single-step operations ---------------------------------------

    def prior(self, context):
        """Context-derived initial belief plus the per-sequence alpha and R."""
        context = self._check_context(context)
        tape = Tape()
        mu0, sigma0, alpha, R = self._prior_graph(tape, context)
        belief = GaussianBelief(0.0, mu0.value, sigma0.value)
        return belief, alpha.value.copy(), R.value.copy()

    def hypernet_step(self, context, belief: GaussianBelief) -> SpectralDynamics:
        """Re-emit the interval dynamics from the context and current belief."""
        context = self._check_context(context)
        tape = Tape()
        _, _, alpha, R = self._prior_graph(tape, context)
        wvec = ad.mlp_forward(self.hyper_net, context, tape)
        layers = ad.unpack_layers(tape, wvec, self.config.target_sizes())
        V, lam, Q = self._emit_graph(tape, layers, Var(belief.mu), Var(belief.sigma))
        return self._dynamics_snapshot(V, lam, Q, alpha, R, self._effective_B(tape))

    # -- sequence engine ------------------------------------------------------

    def _run_graph(self, tape: Tape, traj: Trajectory, query_times,
                   filter_obs, collect_nll: bool):
        """Chronological sweep: propagate / answer queries / condition /
        re-emit.  Returns (per-query predictions, nll Vars at filtered
        observations when collect_nll).
        """
        c = self.config
        n, m = c.latent_dim, c.obs_dim
        context = self._check_context(traj.context)
        query_times = np.asarray(query_times, dtype=float)
        if query_times.size and np.any(np.diff(query_times) < 0):
            raise DataError("query times must be sorted")
        obs_times = [o.t for o in filter_obs]
        if any(b < a for a, b in zip(obs_times, obs_times[1:])):
            raise DataError("observations must be sorted")
        t0 = traj.t0
        if query_times.size and query_times[0] < t0 - BOUNDARY_DEDUP:
            raise DataError("query before trajectory start")

        mu, sigma, alpha, R = self._prior_graph(tape, context)
        wvec = ad.mlp_forward(self.hyper_net, context, tape)
        layers = ad.unpack_layers(tape, wvec, self.config.target_sizes())
        B_eff = self._effective_B(tape)
        alpha_obs = ad.gather(tape, alpha, np.arange(m))

        events = []  # (time, kind, payload); kinds: 0 query, 1 obs
        for i, tq in enumerate(query_times):
            events.append((float(tq), 0, i))
        for o in filter_obs:
            events.append((float(o.t), 1, o))
        events.sort(key=lambda e: (e[0], e[1]))

        horizon = max([t0] + [e[0] for e in events])
        grid = []
        g = t0 + c.update_interval
        while g < horizon - BOUNDARY_DEDUP:
            grid.append(g)
            g += c.update_interval

        V, lam, Q = self._emit_graph(tape, layers, mu, sigma)
        dyn_snapshot = None
        if not collect_nll:
            dyn_snapshot = self._dynamics_snapshot(V, lam, Q, alpha, R, B_eff)

        preds = [None] * query_times.size
        nlls = []
        t_cur = t0
        next_grid = 0
        ev_idx = 0
        while ev_idx < len(events):
            te = events[ev_idx][0]
            # dynamics updates on grid points strictly before the event
            while next_grid < len(grid) and grid[next_grid] < te - BOUNDARY_DEDUP:
                tg = grid[next_grid]
                if tg > t_cur + BOUNDARY_DEDUP:
                    mu, sigma = self._propagate_graph(
                        tape, V, lam, Q, B_eff, traj.control, mu, sigma, t_cur, tg
                    )
                    t_cur = tg
                V, lam, Q = self._emit_graph(tape, layers, mu, sigma)
                if not collect_nll:
                    dyn_snapshot = self._dynamics_snapshot(V, lam, Q, alpha, R, B_eff)
                next_grid += 1
            if te > t_cur + BOUNDARY_DEDUP:
                mu, sigma = self._propagate_graph(
                    tape, V, lam, Q, B_eff, traj.control, mu, sigma, t_cur, te
                )
                t_cur = te
            # serve everything at this timestamp: queries first (pre-filter),
            # then conditioning, then a dynamics update
            filtered_here = False
            while ev_idx < len(events) and abs(events[ev_idx][0] - te) <= BOUNDARY_DEDUP:
                _, kind, payload = events[ev_idx]
                if kind == 0:
                    mean = ad.add(tape, ad.gather(tape, mu, np.arange(m)), alpha_obs)
                    cov = ad.add(tape, ad.submatrix(tape, sigma, np.arange(m)), R)
                    preds[payload] = (te, mean, cov, dyn_snapshot)
                else:
                    obs = payload
                    if collect_nll:
                        mean = ad.add(tape, ad.gather(tape, mu, np.arange(m)),
                                      alpha_obs)
                        cov = ad.add(tape, ad.submatrix(tape, sigma, np.arange(m)), R)
                        nlls.append(ad.nll_op(tape, mean, cov, obs.y, obs.mask))
                    sel = np.flatnonzero(obs.mask)
                    yv = ad.sub(tape, obs.y[sel], ad.gather(tape, alpha, sel))
                    mu, sigma = condition_op(tape, mu, sigma, R, yv, sel)
                    filtered_here = True
                ev_idx += 1
            if filtered_here:
                V, lam, Q = self._emit_graph(tape, layers, mu, sigma)
                if not collect_nll:
                    dyn_snapshot = self._dynamics_snapshot(V, lam, Q, alpha, R, B_eff)
                # a grid boundary merged into this timestamp is already served
                while (next_grid < len(grid)
                       and grid[next_grid] <= te + BOUNDARY_DEDUP):
                    next_grid += 1
                if self.config.restart_grid_on_observation:
                    grid = [t for t in grid if t > te + BOUNDARY_DEDUP]
                    next_grid = 0
                    g = te + c.update_interval
                    new_grid = []
                    while g < horizon - BOUNDARY_DEDUP:
                        new_grid.append(g)
                        g += c.update_interval
                    grid = new_grid
        return preds, nlls

    def _propagate_graph(self, tape, V, lam, Q, B_eff, control, mu, sigma, t0, t1):
        c = self.config
        pieces = (control or ControlSignal.empty()).piecewise_on(t0, t1)
        widths = np.asarray([b - a for a, b, _ in pieces])
        k = c.control_dim
        U = np.zeros((k, len(pieces)))
        any_u = False
        for j, (_, _, u) in enumerate(pieces):
            if u is not None:
                U[:, j] = u
                any_u = True
        if any_u and k > 0:
            BU = ad.matmul(tape, B_eff, U)
        else:
            BU = np.zeros((c.latent_dim, len(pieces)))
        return propagate_op(tape, V, lam, Q, BU, mu, sigma, widths,
                            c.n_real, c.n_complex_pairs)

    def run_sequence(self, traj: Trajectory, query_times) -> SequencePrediction:
        """Predict the observable distribution at each query time, filtering
        every trajectory observation as it arrives (queries at an
        observation time are answered before that observation is used).
        """
        tape = Tape()
        preds, _ = self._run_graph(tape, traj, query_times,
                                   traj.observations, collect_nll=False)
        m = self.config.obs_dim
        times = np.asarray([p[0] for p in preds])
        means = np.stack([ad.value_of(p[1]) for p in preds]) if preds else np.zeros((0, m))
        covs = np.stack([ad.value_of(p[2]) for p in preds]) if preds else np.zeros((0, m, m))
        dyns = [p[3] for p in preds]
        return SequencePrediction(times, means, covs, dyns)

    def sequence_nll(self, traj: Trajectory, observations=None):
        """Forward-only summed NLL of the predict-then-filter sweep over the
        given observations (defaults to all of the trajectory's).
        """
        obs = traj.observations if observations is None else observations
        tape = Tape()
        _, nlls = self._run_graph(tape, traj, [], obs, collect_nll=True)
        return float(sum(v.value for v in nlls)), len(nlls)

    def interval_spectra(self, traj: Trajectory):
        """Spectra emitted along a filtering sweep of the trajectory; one
        canonical Spectrum per interval (interpretability surface)."""
        pred = self.run_sequence(traj, [o.t for o in traj.observations])
        return [d.spectrum for d in pred.dynamics if d is not None]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _subsample_observations(observations, rng, keep_prob, min_keep):
    if len(observations) <= min_keep or keep_prob >= 1.0:
        return list(observations)
    keep = rng.random(len(observations)) < keep_prob
    if keep.sum() < min_keep:
        forced = rng.choice(len(observations), size=min_keep, replace=False)
        keep[:] = False
        keep[forced] = True
    return [o for o, k in zip(observations, keep) if k]


def evaluate_nll_mse(model: PiecewiseSdeModel, trajectories):
    """Sequential predict-then-filter NLL and MSE over all observations."""
    total_nll = 0.0
    total_sq = 0.0
    n_obs = 0
    n_coord = 0
    for traj in trajectories:
        tape = Tape()
        preds, nlls = model._run_graph(tape, traj, [o.t for o in traj.observations],
                                       traj.observations, collect_nll=True)
        total_nll += float(sum(v.value for v in nlls))
        n_obs += len(nlls)
        for (t, mean, cov, _), obs in zip(preds, traj.observations):
            sel = np.flatnonzero(obs.mask)
            err = obs.y[sel] - ad.value_of(mean)[sel]
            total_sq += float(err @ err)
            n_coord += sel.size
    if n_obs == 0:
        return float("nan"), float("nan")
    return total_nll / n_obs, total_sq / max(n_coord, 1)


def train(model: PiecewiseSdeModel, train_trajs, val_trajs,
          config: TrainConfig, start_step: int = 0,
          adam: Optional[AdamState] = None, log_fn=None):
    """Adam on the aggregated observation NLL; returns (model, metrics log).

    The model ends loaded with the best-validation-NLL parameters.  Each
    epoch resamples which observations a sequence exposes (longer, varied
    prediction horizons); a NaN loss aborts with a diagnostic payload.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    if adam is None:
        adam = AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                    beta2=config.beta2, eps=config.eps)
        adam.step = start_step
    log = []
    best_nll = float("inf")
    best_state = model.state_arrays()
    step = adam.step
    stop = False
    epochs_since_best = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_trajs))
        epoch_nll = 0.0
        epoch_obs = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            runs = []
            total_obs = 0
            for i in batch:
                traj = train_trajs[i]
                kept = _subsample_observations(
                    traj.observations, rng, config.obs_keep_prob,
                    config.min_obs_kept,
                )
                if not kept:
                    continue
                tape = Tape()
                try:
                    _, nlls = model._run_graph(tape, traj, [], kept,
                                               collect_nll=True)
                except (NumericalError, np.linalg.LinAlgError) as exc:
                    raise NumericalError(
                        f"forward pass failed at step {step} on sequence "
                        f"{traj.id}: {exc}"
                    ) from exc
                if not nlls:
                    continue
                seq_sum = ad.add_n(tape, nlls)
                runs.append((traj, tape, seq_sum, len(nlls)))
                total_obs += len(nlls)
            if not runs:
                continue
            batch_loss = sum(float(s.value) for _, _, s, _ in runs) / total_obs
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    "NaN/inf training loss at step "
                    f"{step}: sequences {[t.id for t, _, _, _ in runs]}"
                )
            model.zero_grad()
            for _, tape, seq_sum, _ in runs:
                tape.backward(seq_sum, seed=1.0 / total_obs)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                     for p in params]
            if any(not np.all(np.isfinite(g)) for g in grads):
                raise NumericalError(f"non-finite gradient at step {step}")
            adam_step(adam, params, grads)
            step += 1
            epoch_nll += batch_loss * total_obs
            epoch_obs += total_obs
            if config.max_steps is not None and step - start_step >= config.max_steps:
                stop = True
                break
        val_nll, val_mse = evaluate_nll_mse(model, val_trajs)
        entry = {
            "epoch": epoch,
            "step": step,
            "train_nll": epoch_nll / max(epoch_obs, 1),
            "val_nll": val_nll,
            "val_mse": val_mse,
        }
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if np.isfinite(val_nll) and val_nll < best_nll:
            best_nll = val_nll
            best_state = model.state_arrays()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if (config.early_stop_patience is not None
                    and epochs_since_best >= config.early_stop_patience):
                stop = True
        if stop:
            break
    model.load_state_arrays(best_state)
    adam.step = step
    return model, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_json(model: PiecewiseSdeModel, adam: Optional[AdamState] = None,
                       extra: Optional[dict] = None) -> dict:
    obj = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: encode_array(p.value)
                   for name, p in model.named_parameters()},
    }
    if adam is not None:
        obj["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step,
            "m": [encode_array(x) for x in adam.m],
            "v": [encode_array(x) for x in adam.v],
        }
    if extra:
        obj["extra"] = extra
    return obj


def checkpoint_from_json(obj: dict):
    if obj.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format version {obj.get('format_version')!r}"
        )
    config = ModelConfig.from_dict(obj["config"])
    model = PiecewiseSdeModel(config, seed=0)
    state = {}
    for name, p in model.named_parameters():
        if name not in obj["params"]:
            raise ConfigError(f"checkpoint missing parameter {name}")
        state[name] = decode_array(obj["params"][name]).reshape(p.value.shape)
    model.load_state_arrays(state)
    adam = None
    if "adam" in obj:
        blob = obj["adam"]
        adam = AdamState.for_params(model.parameters(), lr=blob["lr"],
                                    beta1=blob["beta1"], beta2=blob["beta2"],
                                    eps=blob["eps"])
        adam.step = int(blob["step"])
        adam.m = [decode_array(x).reshape(m.shape) for x, m in zip(blob["m"], adam.m)]
        adam.v = [decode_array(x).reshape(v.shape) for x, v in zip(blob["v"], adam.v)]
    return model, adam, obj.get("extra", {})
