"""Shared test oracles: random dynamics factories, Euler-Maruyama Monte
Carlo moments, a deterministic moment-ODE integrator, and central finite
differences.  All oracles are independent of the spectral code paths
they check.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from spectralsde.spectral import (
    ComplexPair,
    EigenBasis,
    RealEig,
    SpectralDynamics,
    Spectrum,
    assemble_operator,
    canonicalize,
)


def rand_spectrum(rng, n, n_pairs=None, stable=True):
    if n_pairs is None:
        n_pairs = rng.integers(0, n // 2 + 1)
    n_real = n - 2 * n_pairs
    entries = []
    for _ in range(n_real):
        r = rng.uniform(-2.0, -0.1) if stable else rng.uniform(-1.5, 0.5)
        entries.append(RealEig(float(r)))
    for _ in range(n_pairs):
        a = rng.uniform(-2.0, -0.1) if stable else rng.uniform(-1.5, 0.3)
        b = rng.uniform(0.3, 2.5)
        entries.append(ComplexPair(float(a), float(b)))
    return entries


def rand_basis_for(entries, rng):
    n = sum(e.dim for e in entries)
    while True:
        V = rng.normal(size=(n, n))
        if np.linalg.cond(V) < 50.0:
            return V


def rand_dynamics(rng, n, m=1, k=1, n_pairs=None, stable=True, q_scale=0.3):
    entries = rand_spectrum(rng, n, n_pairs=n_pairs, stable=stable)
    spectrum, basis = canonicalize(entries, rand_basis_for(entries, rng))
    Lq = rng.normal(scale=q_scale, size=(n, n))
    Q = Lq @ Lq.T
    B = rng.normal(size=(n, k))
    alpha = rng.normal(size=n)
    R = np.diag(rng.uniform(0.05, 0.3, size=m))
    return SpectralDynamics(spectrum, basis, Q, B, alpha, R)


def dynamics_operator(dyn):
    return assemble_operator(dyn.spectrum, dyn.basis)


def psd_sqrt(S):
    w, U = np.linalg.eigh(S)
    return U * np.sqrt(np.clip(w, 0.0, None))


def em_moments(A, Q, pieces, mu0, Sigma0, dt, n_paths, rng, B=None):
    """Euler-Maruyama Monte-Carlo first/second moments at the final time.

    pieces: list of (t0, t1, u or None) constant-control stretches; B maps
    control to state (None means the u entries are already state vectors).
    x <- x + (A x + B u) dt + sqrt(dt) L xi with L the PSD square root of Q.

    Paths are carried in float32 (rounding noise is orders of magnitude
    below the Monte-Carlo error at these path counts); moments accumulate
    in float64.
    """
    n = A.shape[0]
    x = np.asarray(mu0, float) + rng.standard_normal((n_paths, n)) @ psd_sqrt(
        np.asarray(Sigma0, float)
    ).T
    x = x.astype(np.float32)
    Lq = psd_sqrt(np.asarray(Q, float))
    has_noise = bool(np.any(Lq))
    drift = np.empty_like(x)
    for t0, t1, u in pieces:
        steps = max(1, int(round((t1 - t0) / dt)))
        h = (t1 - t0) / steps
        hAt = (h * np.asarray(A, float).T).astype(np.float32)
        hc = None
        if u is not None:
            c = (B @ np.asarray(u, float)) if B is not None else np.asarray(u, float)
            hc = (h * c).astype(np.float32)
        sqL = (np.sqrt(h) * Lq.T).astype(np.float32)
        for _ in range(steps):
            np.matmul(x, hAt, out=drift)
            if hc is not None:
                drift += hc
            x += drift
            if has_noise:
                xi = rng.standard_normal((n_paths, n), dtype=np.float32)
                x += xi @ sqL
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=0)
    cov = np.cov(x64.T, bias=False).reshape(n, n)
    return mean, cov


def moment_ode(A, Q, pieces, mu0, Sigma0, B=None, rtol=1e-11, atol=1e-13):
    """Deterministic fine-tolerance integration of the moment ODEs
    d mu = A mu + B u, d Sigma = A Sigma + Sigma A^T + Q, piece by piece.
    """
    n = A.shape[0]
    mu = np.asarray(mu0, float).copy()
    Sig = np.asarray(Sigma0, float).copy()
    for t0, t1, u in pieces:
        drift_const = np.zeros(n)
        if u is not None:
            drift_const = (B @ np.asarray(u, float)) if B is not None else np.asarray(u, float)

        def rhs(t, y):
            m = y[:n]
            S = y[n:].reshape(n, n)
            dm = A @ m + drift_const
            dS = A @ S + S @ A.T + Q
            return np.concatenate([dm, dS.reshape(-1)])

        y0 = np.concatenate([mu, Sig.reshape(-1)])
        sol = solve_ivp(rhs, (t0, t1), y0, method="RK45", rtol=rtol, atol=atol)
        mu = sol.y[:n, -1]
        Sig = sol.y[n:, -1].reshape(n, n)
    return mu, 0.5 * (Sig + Sig.T)


def fd_grad(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(actual, expected, floor=1e-12):
    a = np.asarray(actual, float)
    e = np.asarray(expected, float)
    return np.linalg.norm(a - e) / max(np.linalg.norm(e), floor)
