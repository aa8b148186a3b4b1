"""Closed-form propagation of a Gaussian belief through a linear-SDE interval.

The belief is kept in coordinates shifted by the asymptotic state alpha,
so the drift is A x + B u(t) with no constant term.  For a constant input
over a width-h step the exact moments are

    mu'    = T(h) mu + V S(h) V^-1 B u
    Sigma' = T(h) Sigma T(h)^T + V G(h) V^T

with T(h) = V D(h) V^-1 the transition matrix, S(h) = int_0^h D(s) ds,
and G(h) = int_0^h D(s) M D(s)^T ds where M = V^-1 Q V^-T.  All integrals
are evaluated in this pre-multiplied (stabilized) form, so only decaying
exponentials of the elapsed step appear for stable spectra.  Every block
integral reduces to

    phi1(z, h) = (exp(z h) - 1) / z

over a combined complex rate z; the z -> 0 singularity is handled by a
three-term Taylor expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError
from .spectral import (
    EXP_CLIP,
    SpectralDynamics,
    block_diag_from_scalars,
    clipped_exp,
)

# |z h| below which the series branch of phi1 is used.
PHI1_TAYLOR = 1e-6

# Minimum eigenvalue (relative to scale) below which a covariance gets
# re-projected onto the PSD cone.
PSD_EIG_FLOOR = -1e-9

_J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class GaussianBelief:
    """Time-stamped state distribution N(mu, sigma) in shifted coordinates."""

    t: float
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float)
        n = self.mu.shape[0]
        if self.sigma.shape != (n, n):
            raise DimensionError(
                f"sigma shape {self.sigma.shape} does not match mu length {n}"
            )
        scale = max(1.0, float(np.max(np.abs(self.sigma))) if n else 1.0)
        if np.max(np.abs(self.sigma - self.sigma.T), initial=0.0) > 1e-10 * scale:
            raise ValueError("sigma is not symmetric within tolerance")
        self.sigma = 0.5 * (self.sigma + self.sigma.T)
        if n and np.min(np.linalg.eigvalsh(self.sigma)) < PSD_EIG_FLOOR * scale:
            self.sigma = project_psd(self.sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.t, self.mu.copy(), self.sigma.copy())


@dataclass
class ControlSignal:
    """Piecewise-constant control: sorted, non-overlapping (t0, t1, u) segments.

    Time not covered by any segment means u = 0.
    """

    segments: tuple

    def __post_init__(self):
        segs = []
        for t0, t1, u in self.segments:
            u = np.asarray(u, dtype=float).reshape(-1)
            if not t1 > t0:
                raise ValueError(f"segment must have t_start < t_end, got [{t0}, {t1}]")
            segs.append((float(t0), float(t1), u))
        for (a0, a1, _), (b0, _, _) in zip(segs, segs[1:]):
            if b0 < a1:
                raise ValueError("control segments overlap or are unsorted")
        self.segments = tuple(segs)

    @staticmethod
    def empty() -> "ControlSignal":
        return ControlSignal(())

    def value_at(self, t: float, k: int) -> np.ndarray:
        for t0, t1, u in self.segments:
            if t0 <= t < t1:
                return u
        return np.zeros(k)

    def piecewise_on(self, t0: float, t1: float) -> list:
        """Constant pieces (s0, s1, u-or-None) exactly covering [t0, t1]."""
        pieces = []
        cur = t0
        for s0, s1, u in self.segments:
            if s1 <= t0 or s0 >= t1:
                continue
            lo, hi = max(s0, t0), min(s1, t1)
            if lo > cur:
                pieces.append((cur, lo, None))
            pieces.append((lo, hi, u))
            cur = hi
        if cur < t1:
            pieces.append((cur, t1, None))
        return pieces


def project_psd(M: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    M = 0.5 * (M + M.T)
    w, U = np.linalg.eigh(M)
    w = np.clip(w, 0.0, None)
    return (U * w) @ U.T


# ---------------------------------------------------------------------------
# Scalar block integrals
# ---------------------------------------------------------------------------

def phi1(z: complex, h: float) -> complex:
    """Stable (exp(z h) - 1) / z; series h (1 + zh/2 + (zh)^2/6) near zero."""
    z = complex(z)
    w = z * h
    if abs(w) < PHI1_TAYLOR:
        return h * (1.0 + w / 2.0 + (w * w) / 6.0)
    if w.imag == 0.0:
        x = w.real
        if x > EXP_CLIP:
            x = EXP_CLIP
        elif x < -EXP_CLIP:
            x = -EXP_CLIP
        return complex(math.expm1(x) / z.real)
    return (clipped_exp(z, h) - 1.0) / z


def phi1_dz(z: complex, h: float) -> complex:
    """Derivative of phi1 with respect to the complex rate z."""
    z = complex(z)
    w = z * h
    if abs(w) < 1e-4:
        return h * h * (0.5 + w / 3.0 + (w * w) / 8.0 + (w ** 3) / 30.0)
    return (h * clipped_exp(z, h) - phi1(z, h)) / z


def _cf(zeta: complex) -> np.ndarray:
    """Real 2x2 image [[x, y], [-y, x]] of the complex scalar x + i y."""
    return np.array([[zeta.real, zeta.imag], [-zeta.imag, zeta.real]])


def transition_blocks(blocks, h: float) -> list:
    """Per-entry complex scalars of D(h)."""
    return [clipped_exp(z, h) for _, z, _ in blocks]


def gain_blocks(blocks, h: float) -> list:
    """Per-entry complex scalars of S(h) = int_0^h D(s) ds."""
    return [phi1(z, h) for _, z, _ in blocks]


def gram_integral(blocks, M: np.ndarray, h: float) -> np.ndarray:
    """G(h) = int_0^h D(s) M D(s)^T ds, block pair by block pair.

    Real-real entries reduce to the Hadamard form M_ij phi1(r_i + r_j, h);
    blocks involving a pair pick up the trigonometric antiderivatives via
    the rotation-scaling image of phi1 at the combined rate.  For two
    pairs the integrand splits into the part of M commuting with the
    rotation generator (difference frequency) and the anticommuting part
    (sum frequency).
    """
    n = M.shape[0]
    G = np.zeros((n, n))
    for oi, zi, pi in blocks:
        for oj, zj, pj in blocks:
            c = zi.real + zj.real
            if not pi and not pj:
                G[oi, oj] = M[oi, oj] * phi1(complex(c, 0.0), h).real
            elif not pi and pj:
                m = M[oi, oj:oj + 2]
                zeta = phi1(complex(c, zj.imag), h)
                G[oi, oj:oj + 2] = m @ _cf(zeta).T
            elif pi and not pj:
                m = M[oi:oi + 2, oj]
                zeta = phi1(complex(c, zi.imag), h)
                G[oi:oi + 2, oj] = _cf(zeta) @ m
            else:
                Mb = M[oi:oi + 2, oj:oj + 2]
                JMJ = _J2 @ Mb @ _J2
                P = 0.5 * (Mb - JMJ)
                N = 0.5 * (Mb + JMJ)
                zd = phi1(complex(c, zi.imag - zj.imag), h)
                zp = phi1(complex(c, zi.imag + zj.imag), h)
                G[oi:oi + 2, oj:oj + 2] = P @ _cf(zd) + _cf(zp) @ N
    return G


def segment_moments(blocks, V, W, M, utilde, mu, sigma, h):
    """Exact moment update across one constant-input step of width h.

    M is V^-1 Q V^-T (pass None to skip diffusion), utilde the constant
    shifted-coordinate input B u (None for zero).
    """
    n = V.shape[0]
    D = block_diag_from_scalars(blocks, transition_blocks(blocks, h), n)
    T = V @ D @ W
    mu2 = T @ mu
    if utilde is not None:
        S = block_diag_from_scalars(blocks, gain_blocks(blocks, h), n)
        mu2 = mu2 + V @ (S @ (W @ utilde))
    sigma2 = T @ sigma @ T.T
    if M is not None:
        sigma2 = sigma2 + V @ gram_integral(blocks, M, h) @ V.T
    return mu2, 0.5 * (sigma2 + sigma2.T)


# ---------------------------------------------------------------------------
# Public integral operations
# ---------------------------------------------------------------------------

def control_integral_analytic(dyn: SpectralDynamics, u, t0: float, t1: float) -> np.ndarray:
    """Phi(t1) . int_{t0}^{t1} Phi(tau)^-1 B u dtau for constant u,
    evaluated in the stabilized pre-multiplied form V S(t1 - t0) V^-1 B u.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != dyn.control_dim:
        raise DimensionError(f"u must have length {dyn.control_dim}")
    n = dyn.state_dim
    blocks = dyn.spectrum.blocks
    V, W = dyn.basis.V, dyn.basis.inverse
    S = block_diag_from_scalars(blocks, gain_blocks(blocks, t1 - t0), n)
    return V @ (S @ (W @ (dyn.B @ u)))


def default_step(dyn: SpectralDynamics, t0: float, t1: float) -> float:
    """Integration step 1e-3 of the characteristic time, capped at span/10."""
    span = max(t1 - t0, 0.0)
    rate = dyn.spectrum.max_rate
    dt = 1e-3 / rate if rate > 0 else span / 10.0
    if span > 0:
        dt = min(dt, span / 10.0)
    return dt if dt > 0 else 1.0


def control_integral_numeric(
    dyn: SpectralDynamics,
    u_fn: Callable[[float], np.ndarray],
    t0: float,
    t1: float,
    dt: Optional[float] = None,
) -> np.ndarray:
    """Midpoint Riemann sum for the stabilized control integral.

    The summands Phi(t1) Phi(tau)^-1 B u(tau) involve only known functions
    of tau, so they are evaluated independently (vectorized) and summed;
    no recursion is involved.  Converges at rate O(dt) for
    piecewise-constant u (second order on smooth stretches).
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    n = dyn.state_dim
    if t1 == t0:
        return np.zeros(n)
    if dt is None:
        dt = default_step(dyn, t0, t1)
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = max(1, int(np.ceil((t1 - t0) / dt)))
    edges = np.linspace(t0, t1, steps + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    width = (t1 - t0) / steps
    U = np.asarray([np.asarray(u_fn(t), dtype=float).reshape(-1) for t in mids])
    wmat = (dyn.basis.inverse @ dyn.B) @ U.T  # (n, steps)
    deltas = t1 - mids
    out = np.zeros(n)
    for off, z, pair in dyn.spectrum.blocks:
        expo = np.exp(np.clip(z.real * deltas, -EXP_CLIP, EXP_CLIP))
        if pair:
            phase = z.imag * deltas
            x = expo * np.cos(phase)
            y = expo * np.sin(phase)
            out[off] = np.sum(x * wmat[off] + y * wmat[off + 1])
            out[off + 1] = np.sum(-y * wmat[off] + x * wmat[off + 1])
        else:
            out[off] = np.sum(expo * wmat[off])
    return dyn.basis.V @ out * width


def noise_integral(dyn: SpectralDynamics, t0: float, t1: float) -> np.ndarray:
    """Diffusion contribution to Sigma(t1) over [t0, t1], stabilized form
    V G(t1 - t0) V^T with G the blockwise-integrated Hadamard/rotation form.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    V, W = dyn.basis.V, dyn.basis.inverse
    M = W @ dyn.Q @ W.T
    G = V @ gram_integral(dyn.spectrum.blocks, M, t1 - t0) @ V.T
    return 0.5 * (G + G.T)


def noise_integral_numeric(
    dyn: SpectralDynamics, t0: float, t1: float, dt: Optional[float] = None
) -> np.ndarray:
    """Midpoint quadrature of the stabilized diffusion integrand
    Phi(t1) Phi(tau)^-1 Q (Phi(t1) Phi(tau)^-1)^T; oracle for noise_integral.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    n = dyn.state_dim
    if t1 == t0:
        return np.zeros((n, n))
    if dt is None:
        dt = default_step(dyn, t0, t1)
    steps = max(1, int(np.ceil((t1 - t0) / dt)))
    edges = np.linspace(t0, t1, steps + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    width = (t1 - t0) / steps
    deltas = t1 - mids
    Dm = np.zeros((steps, n, n))
    for off, z, pair in dyn.spectrum.blocks:
        expo = np.exp(np.clip(z.real * deltas, -EXP_CLIP, EXP_CLIP))
        if pair:
            phase = z.imag * deltas
            x = expo * np.cos(phase)
            y = expo * np.sin(phase)
            Dm[:, off, off] = x
            Dm[:, off, off + 1] = y
            Dm[:, off + 1, off] = -y
            Dm[:, off + 1, off + 1] = x
        else:
            Dm[:, off, off] = expo
    W = dyn.basis.inverse
    M = W @ dyn.Q @ W.T
    G = np.einsum("tij,jk,tlk->il", Dm, M, Dm) * width
    out = dyn.basis.V @ G @ dyn.basis.V.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Belief propagation
# ---------------------------------------------------------------------------

def propagate(
    belief: GaussianBelief,
    dyn: SpectralDynamics,
    control: Optional[ControlSignal],
    t_target: float,
) -> GaussianBelief:
    """Propagate the belief to t_target under dyn and piecewise-constant
    control.  Exact in both moments; splitting the horizon at any
    intermediate time gives the same result.
    """
    if t_target < belief.t:
        raise ValueError(f"time reversal requested: {belief.t} -> {t_target}")
    n = dyn.state_dim
    if belief.dim != n:
        raise DimensionError("belief dimension does not match dynamics")
    if t_target == belief.t:
        return belief.copy()
    blocks = dyn.spectrum.blocks
    V, W = dyn.basis.V, dyn.basis.inverse
    M = W @ dyn.Q @ W.T
    mu, sigma = belief.mu, belief.sigma
    pieces = (control or ControlSignal.empty()).piecewise_on(belief.t, t_target)
    for s0, s1, u in pieces:
        utilde = None if u is None else dyn.B @ u
        mu, sigma = segment_moments(blocks, V, W, M, utilde, mu, sigma, s1 - s0)
    scale = max(1.0, float(np.max(np.abs(sigma))))
    if np.min(np.linalg.eigvalsh(sigma)) < PSD_EIG_FLOOR * scale:
        sigma = project_psd(sigma)
    return GaussianBelief(t_target, mu, sigma)


def predictive_observation(belief: GaussianBelief, dyn: SpectralDynamics):
    """Observable-coordinate predictive distribution: un-shift the first m
    mean components by alpha and inflate the covariance by R.
    """
    m = dyn.obs_dim
    if m > belief.dim:
        raise DimensionError("observed dim exceeds belief dim")
    mean = belief.mu[:m] + dyn.alpha[:m]
    cov = belief.sigma[:m, :m] + dyn.R
    return mean, cov
