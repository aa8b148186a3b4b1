"""Estimator facade over the forecaster: fit / predict / score with
sklearn get_params semantics, so the model drops into ecosystem tooling
(grid search, pipelines taking custom estimators, cloning).

X is a list of Trajectory objects; there is no separate y (targets are
the trajectories' own observations).
"""

from __future__ import annotations

import inspect

import numpy as np

from .data import Trajectory
from .errors import DataError
from .metrics import model_predictions, mse_metric
from .model import ModelConfig, PiecewiseSdeModel, TrainConfig, train


class NotFittedError(DataError):
    """Estimator used before fit()."""


def check_trajectories(X, obs_dim=None, context_dim=None):
    """Validate a trajectory collection: type, sorted observations,
    consistent observation and context dimensions.  Returns X as a list.
    """
    X = list(X)
    if not X:
        raise DataError("empty trajectory collection")
    for traj in X:
        if not isinstance(traj, Trajectory):
            raise DataError(f"expected Trajectory, got {type(traj).__name__}")
        for o in traj.observations:
            if obs_dim is None:
                obs_dim = o.y.shape[0]
            elif o.y.shape[0] != obs_dim:
                raise DataError(
                    f"trajectory {traj.id}: observation dim {o.y.shape[0]} "
                    f"!= {obs_dim}"
                )
        if context_dim is None:
            context_dim = traj.context.shape[0]
        elif traj.context.shape[0] != context_dim:
            raise DataError(
                f"trajectory {traj.id}: context dim {traj.context.shape[0]} "
                f"!= {context_dim}"
            )
    return X


class SpectralSdeRegressor:
    """Continuous-time forecaster with fit/predict/score.

    Parameters mirror ModelConfig plus the training knobs; all are plain
    constructor arguments so get_params/set_params/clone work the
    standard way.
    """

    def __init__(self, latent_dim=2, obs_dim=1, control_dim=0, context_dim=0,
                 n_complex_pairs=0, update_interval=1.0,
                 stability_constraint=False, control_mask=None,
                 hypernet_hidden=(16,), target_hidden=(16,),
                 prior_hidden=(16,), belief_encoding="diag",
                 restart_grid_on_observation=False,
                 epochs=40, batch_size=32, lr=1e-3, obs_keep_prob=0.8,
                 max_steps=None, val_fraction=0.15, seed=0):
        self.latent_dim = latent_dim
        self.obs_dim = obs_dim
        self.control_dim = control_dim
        self.context_dim = context_dim
        self.n_complex_pairs = n_complex_pairs
        self.update_interval = update_interval
        self.stability_constraint = stability_constraint
        self.control_mask = control_mask
        self.hypernet_hidden = hypernet_hidden
        self.target_hidden = target_hidden
        self.prior_hidden = prior_hidden
        self.belief_encoding = belief_encoding
        self.restart_grid_on_observation = restart_grid_on_observation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.obs_keep_prob = obs_keep_prob
        self.max_steps = max_steps
        self.val_fraction = val_fraction
        self.seed = seed

    # -- sklearn parameter protocol ----------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for SpectralSdeRegressor"
                )
            setattr(self, key, value)
        return self

    # -- estimator API -------------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_dim=self.latent_dim, obs_dim=self.obs_dim,
            control_dim=self.control_dim, context_dim=self.context_dim,
            n_complex_pairs=self.n_complex_pairs,
            update_interval=self.update_interval,
            stability_constraint=self.stability_constraint,
            control_mask=self.control_mask,
            hypernet_hidden=tuple(self.hypernet_hidden),
            target_hidden=tuple(self.target_hidden),
            prior_hidden=tuple(self.prior_hidden),
            belief_encoding=self.belief_encoding,
            restart_grid_on_observation=self.restart_grid_on_observation,
        )

    def fit(self, X, y=None):
        X = check_trajectories(X, obs_dim=self.obs_dim,
                               context_dim=self.context_dim)
        n_val = max(1, int(round(self.val_fraction * len(X)))) if len(X) > 1 else 0
        train_trajs = X[:len(X) - n_val] if n_val else X
        val_trajs = X[len(X) - n_val:] if n_val else X
        model = PiecewiseSdeModel(self._model_config(), seed=self.seed)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                         lr=self.lr, obs_keep_prob=self.obs_keep_prob,
                         seed=self.seed, max_steps=self.max_steps)
        model, log = train(model, train_trajs, val_trajs, tc)
        self.model_ = model
        self.train_log_ = log
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before predict/score")

    def predict(self, X, query_times=None, return_std=False):
        """Predictive means per trajectory at query_times (defaulting to
        each trajectory's own observation times, pre-filter)."""
        self._check_fitted()
        X = check_trajectories(X, obs_dim=self.obs_dim,
                               context_dim=self.context_dim)
        means, stds = [], []
        for traj in X:
            times = (np.asarray([o.t for o in traj.observations])
                     if query_times is None else np.asarray(query_times, float))
            pred = self.model_.run_sequence(traj, times)
            means.append(pred.means)
            stds.append(np.sqrt(np.maximum(
                np.stack([np.diag(c) for c in pred.covs]) if len(pred.covs)
                else np.zeros((0, self.obs_dim)), 0.0)))
        if return_std:
            return means, stds
        return means

    def score(self, X, y=None):
        """Negative mean square prediction error at observation times (given
        at least one past observation); higher is better."""
        self._check_fitted()
        X = check_trajectories(X, obs_dim=self.obs_dim,
                               context_dim=self.context_dim)
        records = model_predictions(self.model_, X)
        mse, _, _ = mse_metric(records, min_k=1, seed=0)
        return -mse
