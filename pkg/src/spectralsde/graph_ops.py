"""Differentiable composite tape ops for the solver, filter and heads.

The solver and filter enter the training graph as single tape nodes whose
vector-Jacobian products are derived analytically from their closed
forms, instead of tracing their internals elementwise.  Conventions:

* the learned rate vector `lam` packs [r_1..r_nr, a_1, b_1, ..., a_np, b_np]
  with real entries first; block offsets in the state equal the index of
  the entry's first rate parameter, so basis column groups line up with
  rate parameters;
* a complex pair's rotation-scaling 2x2 block [[x, y], [-y, x]] is
  identified with the complex scalar x + i y, so every block integral is
  a phi1 evaluation at a combined complex rate and its derivative is
  phi1_dz at the same point.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tape, Var, accumulate, value_of
from .solver import gram_integral, phi1, phi1_dz
from .spectral import (
    EXP_CLIP,
    block_diag_from_scalars,
    clipped_exp,
    regularize_basis,
)

_J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def blocks_from_rates(lam: np.ndarray, n_real: int, n_pairs: int):
    """(offset, complex rate, is_pair) triples for a packed rate vector."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape[0] != n_real + 2 * n_pairs:
        raise ValueError("rate vector length does not match layout")
    blocks = []
    for i in range(n_real):
        blocks.append((i, complex(lam[i], 0.0), False))
    for p in range(n_pairs):
        off = n_real + 2 * p
        blocks.append((off, complex(lam[off], lam[off + 1]), True))
    return tuple(blocks)


def _cf(zeta: complex) -> np.ndarray:
    return np.array([[zeta.real, zeta.imag], [-zeta.imag, zeta.real]])


def _cf_cotangent(A: np.ndarray) -> complex:
    """<A, I> + i <A, J> for a 2x2 block cotangent A."""
    return complex(A[0, 0] + A[1, 1], A[0, 1] - A[1, 0])


def _dexp(z: complex, h: float) -> complex:
    """d/dz of clipped_exp(z, h); zero once the exponent clip is active."""
    if abs((z * h).real) >= EXP_CLIP:
        return 0.0
    return h * clipped_exp(z, h)


def _rate_cotangent(kappa: complex, lam_bar, off: int, pair: bool, freq_sign=1.0):
    """Scatter a combined-rate cotangent into the packed rate gradient."""
    lam_bar[off] += kappa.real
    if pair:
        lam_bar[off + 1] += freq_sign * kappa.imag


def gram_vjp(blocks, M: np.ndarray, h: float, Gbar: np.ndarray, lam_bar: np.ndarray):
    """Adjoint of gram_integral: returns Mbar and adds rate cotangents."""
    Mbar = np.zeros_like(M)
    for oi, zi, pi in blocks:
        for oj, zj, pj in blocks:
            c = zi.real + zj.real
            if not pi and not pj:
                U = Gbar[oi, oj]
                zeta_d = phi1_dz(complex(c, 0.0), h).real
                Mbar[oi, oj] += U * phi1(complex(c, 0.0), h).real
                s = U * M[oi, oj] * zeta_d
                lam_bar[oi] += s
                lam_bar[oj] += s
            elif not pi and pj:
                U = Gbar[oi, oj:oj + 2]
                m = M[oi, oj:oj + 2]
                zc = complex(c, zj.imag)
                Mbar[oi, oj:oj + 2] += U @ _cf(phi1(zc, h))
                ux = float(U @ m)
                uy = -float(U @ (m @ _J2))
                kappa = complex(ux, uy) * np.conj(phi1_dz(zc, h))
                lam_bar[oi] += kappa.real
                _rate_cotangent(kappa, lam_bar, oj, True)
            elif pi and not pj:
                U = Gbar[oi:oi + 2, oj]
                m = M[oi:oi + 2, oj]
                zc = complex(c, zi.imag)
                Mbar[oi:oi + 2, oj] += _cf(phi1(zc, h)).T @ U
                ux = float(U @ m)
                uy = float(U @ (_J2 @ m))
                kappa = complex(ux, uy) * np.conj(phi1_dz(zc, h))
                lam_bar[oj] += kappa.real
                _rate_cotangent(kappa, lam_bar, oi, True)
            else:
                U = Gbar[oi:oi + 2, oj:oj + 2]
                Mb = M[oi:oi + 2, oj:oj + 2]
                JMJ = _J2 @ Mb @ _J2
                P = 0.5 * (Mb - JMJ)
                N = 0.5 * (Mb + JMJ)
                zd = complex(c, zi.imag - zj.imag)
                zp = complex(c, zi.imag + zj.imag)
                X = U @ _cf(phi1(zd, h)).T
                Y = _cf(phi1(zp, h)).T @ U
                Mbar[oi:oi + 2, oj:oj + 2] += 0.5 * (X - _J2 @ X @ _J2)
                Mbar[oi:oi + 2, oj:oj + 2] += 0.5 * (Y + _J2 @ Y @ _J2)
                kd = complex(float(np.sum(U * P)), float(np.sum(U * (P @ _J2))))
                kd *= np.conj(phi1_dz(zd, h))
                kp = complex(float(np.sum(U * N)), float(np.sum(U * (_J2 @ N))))
                kp *= np.conj(phi1_dz(zp, h))
                lam_bar[oi] += kd.real + kp.real
                lam_bar[oj] += kd.real + kp.real
                lam_bar[oi + 1] += kd.imag + kp.imag
                lam_bar[oj + 1] += -kd.imag + kp.imag
    return Mbar


class _StepOperators:
    """Transition, gain and diffusion operators shared by equal-width steps."""

    __slots__ = ("h", "dscal", "sscal", "D", "S", "T", "G",
                 "Dbar", "Sbar", "Gbar", "Tbar_fold")

    def __init__(self, blocks, V, W, M, h, n):
        self.h = h
        self.dscal = [clipped_exp(z, h) for _, z, _ in blocks]
        self.sscal = [phi1(z, h) for _, z, _ in blocks]
        self.D = block_diag_from_scalars(blocks, self.dscal, n)
        self.S = block_diag_from_scalars(blocks, self.sscal, n)
        self.T = V @ self.D @ W
        self.G = gram_integral(blocks, M, h)
        self.Dbar = np.zeros((n, n))
        self.Sbar = np.zeros((n, n))
        self.Gbar = np.zeros((n, n))


def propagate_op(tape: Tape, V, lam, Q, BU, mu, sigma, widths, n_real, n_pairs):
    """Propagate a Gaussian belief across consecutive constant-input steps.

    V, lam, Q, mu, sigma as in the solver; BU is the (n, J) matrix whose
    column j is the shifted-coordinate input over step j of width
    widths[j].  Returns (mu', sigma') as two tape outputs.
    """
    Vv = value_of(V)
    lamv = value_of(lam).reshape(-1)
    Qv = value_of(Q)
    BUv = np.atleast_2d(value_of(BU))
    muv = value_of(mu).reshape(-1)
    sigv = value_of(sigma)
    widths = np.asarray(widths, dtype=float).reshape(-1)
    n = Vv.shape[0]
    if BUv.shape != (n, widths.shape[0]):
        raise ValueError("BU must be (n, n_steps)")

    blocks = blocks_from_rates(lamv, n_real, n_pairs)
    W = np.linalg.inv(Vv)
    M = W @ Qv @ W.T

    ops = {}
    trail = []  # per step: (ops entry, mu_in, sig_in, w, sv)
    mu_cur, sig_cur = muv, sigv
    for j, h in enumerate(widths):
        op = ops.get(h)
        if op is None:
            op = ops[h] = _StepOperators(blocks, Vv, W, M, h, n)
        w = W @ BUv[:, j]
        sv = op.S @ w
        trail.append((op, mu_cur, sig_cur, w, sv))
        mu_cur = op.T @ mu_cur + Vv @ sv
        sig_cur = op.T @ sig_cur @ op.T.T + Vv @ op.G @ Vv.T
        sig_cur = 0.5 * (sig_cur + sig_cur.T)

    mu_out = Var(mu_cur)
    sig_out = Var(sig_cur)

    def backward():
        gmu = mu_out.grad
        gsig = sig_out.grad
        if gmu is None and gsig is None:
            return
        gmu = np.zeros(n) if gmu is None else gmu.copy()
        gsig = np.zeros((n, n)) if gsig is None else gsig.copy()
        Vbar = np.zeros((n, n))
        Wbar = np.zeros((n, n))
        BUbar = np.zeros_like(BUv)
        for op in ops.values():
            op.Dbar.fill(0.0)
            op.Sbar.fill(0.0)
            op.Gbar.fill(0.0)
        for j in range(len(trail) - 1, -1, -1):
            op, mu_in, sig_in, w, sv = trail[j]
            gsig = 0.5 * (gsig + gsig.T)
            T = op.T
            # sigma' = T sig Tt + V G Vt
            Tbar = gsig @ T @ sig_in.T + gsig.T @ T @ sig_in
            sig_next = T.T @ gsig @ T
            Vbar += gsig @ Vv @ op.G.T + gsig.T @ Vv @ op.G
            op.Gbar += Vv.T @ gsig @ Vv
            # mu' = T mu + V (S w)
            Tbar += np.outer(gmu, mu_in)
            mu_next = T.T @ gmu
            Vbar += np.outer(gmu, sv)
            vg = Vv.T @ gmu
            op.Sbar += np.outer(vg, w)
            wbar = op.S.T @ vg
            BUbar[:, j] = W.T @ wbar
            Wbar += np.outer(wbar, BUv[:, j])
            # T = V D W
            Vbar += Tbar @ W.T @ op.D.T
            op.Dbar += Vv.T @ Tbar @ W.T
            Wbar += op.D.T @ Vv.T @ Tbar
            gmu, gsig = mu_next, sig_next
        # rate, Q and basis cotangents from the shared step operators
        lam_bar = np.zeros_like(lamv)
        Mbar = np.zeros((n, n))
        for op in ops.values():
            h = op.h
            for (off, z, pair), ds in zip(blocks, op.dscal):
                de = _dexp(z, h)
                ds_phi = phi1_dz(z, h)
                if pair:
                    ud = _cf_cotangent(op.Dbar[off:off + 2, off:off + 2])
                    kappa = ud * np.conj(de)
                    lam_bar[off] += kappa.real
                    lam_bar[off + 1] += kappa.imag
                    us = _cf_cotangent(op.Sbar[off:off + 2, off:off + 2])
                    kappa = us * np.conj(ds_phi)
                    lam_bar[off] += kappa.real
                    lam_bar[off + 1] += kappa.imag
                else:
                    lam_bar[off] += op.Dbar[off, off] * de.real
                    lam_bar[off] += op.Sbar[off, off] * ds_phi.real
            Mbar += gram_vjp(blocks, M, h, op.Gbar, lam_bar)
        Qbar = W.T @ Mbar @ W
        Wbar += Mbar @ W @ Qv.T + Mbar.T @ W @ Qv
        Vbar += -W.T @ Wbar @ W.T
        accumulate(V, Vbar)
        accumulate(lam, lam_bar)
        accumulate(Q, Qbar)
        accumulate(BU, BUbar)
        accumulate(mu, gmu)
        accumulate(sigma, gsig)

    tape.record(backward)
    return mu_out, sig_out


def condition_op(tape: Tape, mu, sigma, R, innovation_target, sel):
    """Condition N(mu, sigma) on observing the `sel` coordinates.

    innovation_target is the shifted measurement of the selected
    coordinates; R is the full m x m noise covariance Var (its masked
    block enters the innovation).  Returns (mu', sigma').
    """
    muv = value_of(mu).reshape(-1)
    sigv = value_of(sigma)
    Rv = np.atleast_2d(value_of(R))
    yv = value_of(innovation_target).reshape(-1)
    sel = np.asarray(sel, dtype=int)
    n = muv.shape[0]
    s = sel.size

    Sxo = sigv[:, sel]
    Hsig = sigv[sel, :]
    Sraw = sigv[np.ix_(sel, sel)] + Rv[np.ix_(sel, sel)]
    S = 0.5 * (Sraw + Sraw.T)
    Sinv = np.linalg.inv(S)
    K = Sxo @ Sinv
    r = yv - muv[sel]
    mu_post = muv + K @ r
    sig_post = sigv - K @ Hsig
    sig_post = 0.5 * (sig_post + sig_post.T)
    mu_out = Var(mu_post)
    sig_out = Var(sig_post)

    def backward():
        gmu = mu_out.grad
        gsig = sig_out.grad
        if gmu is None and gsig is None:
            return
        gmu = np.zeros(n) if gmu is None else gmu
        gsig = np.zeros((n, n)) if gsig is None else gsig
        gs = 0.5 * (gsig + gsig.T)
        sigbar = gs.copy()
        Kbar = -gs @ Hsig.T
        sigbar[sel, :] += -K.T @ gs
        mubar = gmu.copy()
        Kbar += np.outer(gmu, r)
        rbar = K.T @ gmu
        mubar[sel] -= rbar
        # K = Sxo Sinv
        sigbar[:, sel] += Kbar @ Sinv.T
        Sbar = -Sinv.T @ (Sxo.T @ Kbar) @ Sinv.T
        Sbar = 0.5 * (Sbar + Sbar.T)
        sigbar[np.ix_(sel, sel)] += Sbar
        if isinstance(R, Var):
            Rbar = np.zeros_like(Rv)
            Rbar[np.ix_(sel, sel)] = Sbar
            accumulate(R, Rbar)
        accumulate(innovation_target, rbar)
        accumulate(mu, mubar)
        accumulate(sigma, sigbar)

    tape.record(backward)
    return mu_out, sig_out


def build_basis_op(tape: Tape, V_pre, n_real, n_pairs):
    """Invertibility-guarded, group-normalized basis from a learned pre-basis.

    Adds the escalating ridge while ill-conditioned (treated as a constant
    shift for gradients) and scales each entry's column group to unit
    Frobenius norm.
    """
    Vp = value_of(V_pre)
    n = Vp.shape[0]
    Vr = regularize_basis(Vp)
    groups = [(i, 1) for i in range(n_real)]
    groups += [(n_real + 2 * p, 2) for p in range(n_pairs)]
    Vn = Vr.copy()
    norms = []
    for off, width in groups:
        s = np.linalg.norm(Vr[:, off:off + width])
        norms.append(s)
        Vn[:, off:off + width] /= s
    out = Var(Vn)

    def backward():
        g = out.grad
        if g is None:
            return
        Vbar = np.zeros_like(Vp)
        for (off, width), s in zip(groups, norms):
            ycol = g[:, off:off + width]
            vcol = Vr[:, off:off + width]
            inner = float(np.sum(ycol * vcol))
            Vbar[:, off:off + width] = ycol / s - vcol * (inner / s ** 3)
        accumulate(V_pre, Vbar)

    tape.record(backward)
    return out


@lru_cache(maxsize=None)
def _tril_indices(n: int):
    rows, cols = np.tril_indices(n)
    return rows, cols, rows == cols


def tril_psd_op(tape: Tape, raw, n: int):
    """PSD matrix L L^T from a packed lower-triangular vector with
    softplus-transformed diagonal entries.
    """
    rawv = value_of(raw).reshape(-1)
    rows, cols, diag_mask = _tril_indices(n)
    if rawv.shape[0] != rows.size:
        raise ValueError(f"need {rows.size} entries for an order-{n} factor")
    entries = rawv.copy()
    entries[diag_mask] = np.logaddexp(0.0, rawv[diag_mask])
    L = np.zeros((n, n))
    L[rows, cols] = entries
    out = Var(L @ L.T)

    def backward():
        g = out.grad
        if g is None:
            return
        Lbar = (g + g.T) @ L
        ebar = Lbar[rows, cols]
        sig = 0.5 * (1.0 + np.tanh(0.5 * rawv[diag_mask]))
        ebar[diag_mask] *= sig
        accumulate(raw, ebar)

    tape.record(backward)
    return out


def diag_psd_op(tape: Tape, raw):
    """Diagonal PSD matrix diag(softplus(raw))."""
    rawv = value_of(raw).reshape(-1)
    d = np.logaddexp(0.0, rawv)
    out = Var(np.diag(d))

    def backward():
        g = out.grad
        if g is None:
            return
        sig = 0.5 * (1.0 + np.tanh(0.5 * rawv))
        accumulate(raw, np.diag(g) * sig)

    tape.record(backward)
    return out
