"""Minimal reverse-mode tape for dense feed-forward nets and Adam.

A Tape records primitive operations (affine maps, elementwise
nonlinearities, matrix products, assembly ops and the solver/filter
composites from graph_ops) together with partial-derivative closures.
Parameters are persistent Var objects whose .grad accumulates across
backward passes; independent tapes over disjoint sequences may run in
parallel and synchronize by summing grads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))

NLL_JITTER_START = 1e-9
NLL_JITTER_MAX = 1e-5


class Var:
    """A value in the computation graph; grad accumulates on backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)
        self.grad = None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def accumulate(x, g) -> None:
    """Add g into x.grad when x participates in differentiation."""
    if isinstance(x, Var):
        if x.grad is None:
            x.grad = np.array(g, dtype=float)
        else:
            x.grad += g


class Tape:
    """Single-owner operation record; not shareable across threads."""

    def __init__(self):
        self._nodes = []

    def record(self, backward: Callable[[], None]) -> None:
        self._nodes.append(backward)

    def backward(self, out: Var, seed=1.0) -> None:
        out.grad = np.asarray(seed, dtype=float).reshape(out.value.shape)
        for node in reversed(self._nodes):
            node()

    def __len__(self):
        return len(self._nodes)


def _out_grad(out: Var) -> Optional[np.ndarray]:
    return out.grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(tape: Tape, a, b) -> Var:
    out = Var(value_of(a) + value_of(b))

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(a, g)
        accumulate(b, g)

    tape.record(backward)
    return out


def sub(tape: Tape, a, b) -> Var:
    out = Var(value_of(a) - value_of(b))

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(a, g)
        accumulate(b, -g)

    tape.record(backward)
    return out


def add_n(tape: Tape, parts) -> Var:
    parts = list(parts)
    out = Var(sum(value_of(p) for p in parts))

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        for p in parts:
            accumulate(p, g)

    tape.record(backward)
    return out


def sum_all(tape: Tape, x) -> Var:
    xv = value_of(x)
    out = Var(np.sum(xv))

    def backward():
        g = _out_grad(out)
        if g is not None:
            accumulate(x, np.full(xv.shape, float(g)))

    tape.record(backward)
    return out


def scale(tape: Tape, x, c: float) -> Var:
    out = Var(value_of(x) * c)

    def backward():
        g = _out_grad(out)
        if g is not None:
            accumulate(x, g * c)

    tape.record(backward)
    return out


def mul(tape: Tape, a, b) -> Var:
    """Elementwise product (same shape, or one operand a constant array)."""
    av, bv = value_of(a), value_of(b)
    out = Var(av * bv)

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(a, g * bv)
        accumulate(b, g * av)

    tape.record(backward)
    return out


def matmul(tape: Tape, A, B) -> Var:
    Av, Bv = value_of(A), value_of(B)
    out = Var(Av @ Bv)

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(A, g @ Bv.T)
        accumulate(B, Av.T @ g)

    tape.record(backward)
    return out


def matvec(tape: Tape, A, x) -> Var:
    Av, xv = value_of(A), value_of(x)
    out = Var(Av @ xv)

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(A, np.outer(g, xv))
        accumulate(x, Av.T @ g)

    tape.record(backward)
    return out


def affine(tape: Tape, W, b, x) -> Var:
    """W x + b, the dense-layer primitive."""
    Wv, bv, xv = value_of(W), value_of(b), value_of(x)
    out = Var(Wv @ xv + bv)

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        accumulate(W, np.outer(g, xv))
        accumulate(b, g)
        accumulate(x, Wv.T @ g)

    tape.record(backward)
    return out


def tanh(tape: Tape, x) -> Var:
    out = Var(np.tanh(value_of(x)))

    def backward():
        g = _out_grad(out)
        if g is not None:
            accumulate(x, g * (1.0 - out.value ** 2))

    tape.record(backward)
    return out


def softplus(tape: Tape, x) -> Var:
    xv = value_of(x)
    out = Var(np.logaddexp(0.0, xv))

    def backward():
        g = _out_grad(out)
        if g is not None:
            accumulate(x, g * _sigmoid(xv))

    tape.record(backward)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gather(tape: Tape, x, idx) -> Var:
    idx = np.asarray(idx, dtype=int)
    out = Var(value_of(x)[idx])

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        if isinstance(x, Var):
            full = np.zeros_like(x.value)
            np.add.at(full, idx, g)
            accumulate(x, full)

    tape.record(backward)
    return out


def submatrix(tape: Tape, X, idx) -> Var:
    idx = np.asarray(idx, dtype=int)
    out = Var(value_of(X)[np.ix_(idx, idx)])

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        if isinstance(X, Var):
            full = np.zeros_like(X.value)
            full[np.ix_(idx, idx)] += g
            accumulate(X, full)

    tape.record(backward)
    return out


def diag_part(tape: Tape, X) -> Var:
    out = Var(np.diag(value_of(X)).copy())

    def backward():
        g = _out_grad(out)
        if g is not None and isinstance(X, Var):
            accumulate(X, np.diag(g))

    tape.record(backward)
    return out


def concat(tape: Tape, parts) -> Var:
    parts = list(parts)
    vals = [np.atleast_1d(value_of(p)) for p in parts]
    out = Var(np.concatenate(vals))

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        off = 0
        for p, v in zip(parts, vals):
            accumulate(p, g[off:off + v.shape[0]].reshape(value_of(p).shape))
            off += v.shape[0]

    tape.record(backward)
    return out


def reshape(tape: Tape, x, shape) -> Var:
    xv = value_of(x)
    out = Var(xv.reshape(shape))

    def backward():
        g = _out_grad(out)
        if g is not None:
            accumulate(x, g.reshape(xv.shape))

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Dense feed-forward net
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Fully-connected net; weights are persistent graph Vars."""

    weights: list
    biases: list
    activation: str = "tanh"

    @property
    def sizes(self):
        if not self.weights:
            return ()
        dims = [self.weights[0].value.shape[1]]
        dims += [W.value.shape[0] for W in self.weights]
        return tuple(dims)

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, activation="tanh", scale=None):
        weights, biases = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            s = scale if scale is not None else 1.0 / np.sqrt(max(1, d_in))
            weights.append(Var(rng.normal(0.0, s, size=(d_out, d_in))))
            biases.append(Var(np.zeros(d_out)))
        return cls(weights, biases, activation)

    def parameters(self) -> list:
        return list(self.weights) + list(self.biases)

    def n_packed(self) -> int:
        sizes = self.sizes
        return sum(o * (i + 1) for i, o in zip(sizes[:-1], sizes[1:]))


def packed_size(sizes) -> int:
    return sum(o * (i + 1) for i, o in zip(sizes[:-1], sizes[1:]))


def _apply_activation(tape, x, activation):
    if activation == "tanh":
        return tanh(tape, x)
    if activation == "softplus":
        return softplus(tape, x)
    raise ValueError(f"unknown activation {activation!r}")


def mlp_forward(net: Mlp, x, tape: Tape) -> Var:
    """Forward pass recording to the tape; deterministic given weights."""
    h = x
    n_layers = len(net.weights)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        if value_of(h).shape[0] != W.value.shape[1]:
            raise DimensionError(
                f"layer {i} expects input dim {W.value.shape[1]}, "
                f"got {value_of(h).shape[0]}"
            )
        h = affine(tape, W, b, h)
        if i < n_layers - 1:
            h = _apply_activation(tape, h, net.activation)
    return h


def unpack_layers(tape: Tape, wvec, sizes) -> list:
    """Slice a packed weight vector Var into per-layer (W, b) Vars.

    Packing order per layer: row-major weight matrix, then bias.  This is
    how a hypernetwork output is interpreted as the target net; unpack
    once per sequence and reuse across interval emissions.
    """
    layers = []
    off = 0
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        W = reshape(tape, gather(tape, wvec, np.arange(off, off + d_out * d_in)),
                    (d_out, d_in))
        off += d_out * d_in
        b = gather(tape, wvec, np.arange(off, off + d_out))
        off += d_out
        layers.append((W, b))
    if off != value_of(wvec).shape[0]:
        raise DimensionError("packed weight vector length does not match sizes")
    return layers


def forward_layers(tape: Tape, layers, x, activation="tanh") -> Var:
    h = x
    for i, (W, b) in enumerate(layers):
        h = affine(tape, W, b, h)
        if i < len(layers) - 1:
            h = _apply_activation(tape, h, activation)
    return h


def mlp_forward_packed(tape: Tape, wvec, sizes, x, activation="tanh") -> Var:
    """Forward pass of a net whose weights live in a packed vector Var."""
    return forward_layers(tape, unpack_layers(tape, wvec, sizes), x, activation)


# ---------------------------------------------------------------------------
# Gaussian negative log-likelihood
# ---------------------------------------------------------------------------

def _chol_with_jitter(S: np.ndarray):
    """Cholesky factor of the symmetrized matrix with jitter escalation."""
    S = 0.5 * (S + S.T)
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(S + jitter * np.eye(S.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter = NLL_JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > NLL_JITTER_MAX:
                raise NumericalError("masked covariance not PD after jitter escalation")


def _nll_core(S: np.ndarray, r: np.ndarray):
    """(value, S^-1, S^-1 r) of the Gaussian NLL over the masked block."""
    if S.shape == (1, 1):
        s = float(S[0, 0])
        jitter = 0.0
        while s + jitter <= 0.0 or not np.isfinite(s):
            if not np.isfinite(s):
                raise NumericalError("non-finite masked covariance")
            jitter = NLL_JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > NLL_JITTER_MAX:
                raise NumericalError("masked covariance not PD after jitter escalation")
        s = s + jitter
        r0 = float(r[0])
        value = 0.5 * (LOG_2PI + np.log(s) + r0 * r0 / s)
        Sinv = np.array([[1.0 / s]])
        return value, Sinv, np.array([r0 / s])
    L, _ = _chol_with_jitter(S)
    z = scipy.linalg.solve_triangular(L, r, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    value = 0.5 * (r.size * LOG_2PI + logdet + float(z @ z))
    Sinv = scipy.linalg.cho_solve((L, True), np.eye(r.size))
    return value, Sinv, Sinv @ r


def gaussian_nll(pred_mean, pred_cov, target, mask=None) -> float:
    """-log N(target; mean, cov) over the masked coordinates."""
    mean = np.asarray(pred_mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(pred_cov, dtype=float))
    target = np.asarray(target, dtype=float).reshape(-1)
    sel = np.arange(mean.size) if mask is None else np.flatnonzero(np.asarray(mask, bool))
    r = target[sel] - mean[sel]
    value, _, _ = _nll_core(cov[np.ix_(sel, sel)], r)
    return value


def nll_op(tape: Tape, mean, cov, target, mask=None) -> Var:
    """Tape composite of gaussian_nll with analytic gradients."""
    mv = value_of(mean).reshape(-1)
    Cv = np.atleast_2d(value_of(cov))
    target = np.asarray(target, dtype=float).reshape(-1)
    sel = np.arange(mv.size) if mask is None else np.flatnonzero(np.asarray(mask, bool))
    r = target[sel] - mv[sel]
    value, Sinv, alpha_vec = _nll_core(Cv[np.ix_(sel, sel)], r)
    out = Var(value)

    def backward():
        g = _out_grad(out)
        if g is None:
            return
        g = float(g)
        if isinstance(mean, Var):
            full = np.zeros_like(mean.value)
            full[sel] = -alpha_vec * g
            accumulate(mean, full)
        if isinstance(cov, Var):
            Sbar = 0.5 * (Sinv - np.outer(alpha_vec, alpha_vec)) * g
            Sbar = 0.5 * (Sbar + Sbar.T)
            full = np.zeros_like(cov.value)
            full[np.ix_(sel, sel)] = Sbar
            accumulate(cov, full)

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators for a fixed parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        shapes = [value_of(p) for p in params]
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
            m=[np.zeros_like(s) for s in shapes],
            v=[np.zeros_like(s) for s in shapes],
        )


def adam_step(state: AdamState, params, grads):
    """Standard bias-corrected Adam update, in place; returns params."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        arr = p.value if isinstance(p, Var) else p
        if g is None:
            continue
        if m.shape != arr.shape:
            raise DimensionError("adam moment shape does not match parameter")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
