"""Condition a Gaussian belief on a partial, noisy observation.

Observations measure the first m state coordinates plus independent
zero-mean Gaussian noise with covariance R.  `condition` handles the
noisy case by augmenting the state with the noisy measurement vector and
applying the noiseless conditional-Gaussian formula to the augmented
distribution; `kalman_update` is the textbook filtering step (Joseph
form) used as the built-in equivalence oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, SingularInnovationError
from .solver import GaussianBelief
from .spectral import SpectralDynamics

# Cholesky jitter escalation for the innovation covariance.
JITTER_START = 1e-9
JITTER_MAX = 1e-5


@dataclass
class Observation:
    """Raw (un-shifted) measurement of the first m coordinates at time t."""

    t: float
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.mask.shape != self.y.shape:
            raise DimensionError("mask length must match observation length")
        if not self.mask.any():
            raise ValueError("a filtering event needs at least one observed coordinate")


def solve_spd(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve S x = rhs for symmetric PSD S via Cholesky with jitter escalation.

    A degenerate innovation (scale below the jitter resolution, e.g.
    all-zero R against a collapsed observed block) errors instead of being
    silently dominated by the jitter.
    """
    S = 0.5 * (S + S.T)
    if not float(np.max(np.abs(S), initial=0.0)) > 1e-12:
        raise SingularInnovationError("innovation covariance is degenerate")
    jitter = 0.0
    while True:
        try:
            cf = scipy.linalg.cho_factor(S + jitter * np.eye(S.shape[0]), lower=True)
            return scipy.linalg.cho_solve(cf, rhs)
        except scipy.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX:
                raise SingularInnovationError(
                    "innovation covariance singular beyond jitter escalation"
                )


def condition(
    belief: GaussianBelief,
    obs: Observation,
    dyn: SpectralDynamics,
    R: Optional[np.ndarray] = None,
) -> GaussianBelief:
    """Exact conditional N(X | observed coordinates of the measurement).

    The measurement is first shifted by -alpha into the belief's
    coordinates.  The noisy case is reduced to the noiseless one on the
    augmented state (measurement, X): the augmented covariance carries
    Var(measurement) = Sigma_YY + R and Cov(measurement, X) = Sigma_{Y,:}.
    Unobserved coordinates move only through their correlations.
    """
    m = dyn.obs_dim
    if obs.y.shape[0] != m:
        raise DimensionError(f"observation must have length {m}")
    n = belief.dim
    R_full = dyn.R if R is None else np.asarray(R, dtype=float)
    sel = np.flatnonzero(obs.mask)
    s = sel.size
    y_shift = obs.y[sel] - dyn.alpha[sel]

    mu, sigma = belief.mu, belief.sigma
    aug_mu = np.concatenate([mu[sel], mu])
    aug_sigma = np.zeros((s + n, s + n))
    aug_sigma[:s, :s] = sigma[np.ix_(sel, sel)] + R_full[np.ix_(sel, sel)]
    aug_sigma[:s, s:] = sigma[sel, :]
    aug_sigma[s:, :s] = sigma[:, sel]
    aug_sigma[s:, s:] = sigma

    # Noiseless conditional of the trailing X block given the leading block.
    S_oo = aug_sigma[:s, :s]
    S_xo = aug_sigma[s:, :s]
    innov = y_shift - aug_mu[:s]
    mu_post = aug_mu[s:] + S_xo @ solve_spd(S_oo, innov)
    sigma_post = aug_sigma[s:, s:] - S_xo @ solve_spd(S_oo, S_xo.T)
    return GaussianBelief(belief.t, mu_post, sigma_post)


def kalman_update(
    belief: GaussianBelief, y: np.ndarray, H: np.ndarray, R: np.ndarray
) -> GaussianBelief:
    """Standard Kalman filtering step with the Joseph-form covariance update.

    Frame-neutral: y must be expressed in the same coordinates as the
    belief (i.e. already shifted when used against `condition`).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = belief.dim
    if H.shape[1] != n or H.shape[0] != y.shape[0] or R.shape != (y.size, y.size):
        raise DimensionError("inconsistent shapes in kalman_update")
    sigma = belief.sigma
    S = H @ sigma @ H.T + R
    K = solve_spd(S, H @ sigma).T
    mu_post = belief.mu + K @ (y - H @ belief.mu)
    ImKH = np.eye(n) - K @ H
    sigma_post = ImKH @ sigma @ ImKH.T + K @ R @ K.T
    return GaussianBelief(belief.t, mu_post, sigma_post)


def selector_matrix(mask: np.ndarray, n: int) -> np.ndarray:
    """Row-selector H observing the masked subset of the first m coordinates."""
    sel = np.flatnonzero(np.asarray(mask, dtype=bool))
    H = np.zeros((sel.size, n))
    H[np.arange(sel.size), sel] = 1.0
    return H
