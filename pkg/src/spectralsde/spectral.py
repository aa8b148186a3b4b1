"""Spectral representation of a linear dynamics operator.

A dynamics operator A is stored implicitly through its eigenvalues and a
real eigenbasis.  Real eigenvalues contribute one basis column each; a
complex-conjugate eigenvalue pair a ± b i (b > 0) is stored once and
contributes two columns (v_real, v_im) of its complex eigenvector
v = v_real + v_im i.  With that layout the matrix solution of the
homogeneous system is

    Phi(t) = V . D(t)

where D(t) is block diagonal: the scalar block exp(r t) for a real
eigenvalue r, and the 2x2 block

    exp(a t) . [[cos(b t), sin(b t)], [-sin(b t), cos(b t)]]

for a pair.  Every quantity exposed here is real, including for purely
complex spectra.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np

from .errors import DefectiveOperatorError, DimensionError, SingularBasisError
from .io_utils import decode_array, encode_array, fmt_float, parse_float

# Exponent arguments are clipped here before exponentiation so that long
# horizons cannot overflow; |exp(60)| ~ 1e26 stays finite in double.
EXP_CLIP = 60.0

# Condition-number bound above which a learned pre-basis gets regularized,
# and the ridge added to it (see build_basis / regularize_basis).
BASIS_MAX_CONDITION = 1.0e6
BASIS_RIDGE = 1.0e-6

# Structural guard for user-supplied bases; looser than the learned-basis
# bound because test fixtures may legitimately be moderately conditioned.
BASIS_SINGULAR_CONDITION = 1.0e9


@dataclass(frozen=True)
class RealEig:
    """A single real eigenvalue with rate r (units 1/time)."""

    r: float

    @property
    def dim(self) -> int:
        return 1

    def sort_key(self):
        return (-self.r, 0.0)


@dataclass(frozen=True)
class ComplexPair:
    """A conjugate eigenvalue pair a +- b i with b > 0; stored once."""

    a: float
    b: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"complex pair requires b > 0, got b={self.b}")

    @property
    def dim(self) -> int:
        return 2

    def sort_key(self):
        return (-self.a, -self.b)


SpectrumEntry = Union[RealEig, ComplexPair]


@dataclass(frozen=True)
class Spectrum:
    """Ordered eigenvalue entries of a diagonalizable real operator."""

    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for e in self.entries:
            if not isinstance(e, (RealEig, ComplexPair)):
                raise TypeError(f"invalid spectrum entry {e!r}")

    @property
    def dim(self) -> int:
        return sum(e.dim for e in self.entries)

    @cached_property
    def blocks(self) -> tuple:
        """Per-entry (offset, complex rate, is_pair) in storage order."""
        out = []
        offset = 0
        for e in self.entries:
            if isinstance(e, RealEig):
                out.append((offset, complex(e.r, 0.0), False))
            else:
                out.append((offset, complex(e.a, e.b), True))
            offset += e.dim
        return tuple(out)

    @property
    def max_real_part(self) -> float:
        return max(z.real for _, z, _ in self.blocks)

    @property
    def max_rate(self) -> float:
        """Largest eigenvalue magnitude; 0 for an all-zero spectrum."""
        return max(abs(z) for _, z, _ in self.blocks)

    def is_stable(self) -> bool:
        return all(z.real < 0 for _, z, _ in self.blocks)

    def eigenvalues(self) -> np.ndarray:
        """All n eigenvalues as a complex vector (pairs expanded)."""
        vals = []
        for _, z, pair in self.blocks:
            vals.append(z)
            if pair:
                vals.append(z.conjugate())
        return np.asarray(vals, dtype=complex)


@dataclass
class EigenBasis:
    """Real n x n basis; pair entries own two adjacent columns (v_real, v_im)."""

    V: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if self.V.ndim != 2 or self.V.shape[0] != self.V.shape[1]:
            raise DimensionError(f"basis must be square, got shape {self.V.shape}")
        if not np.all(np.isfinite(self.V)):
            raise SingularBasisError("basis contains non-finite entries")
        cond = np.linalg.cond(self.V)
        if not np.isfinite(cond) or cond > BASIS_SINGULAR_CONDITION:
            raise SingularBasisError(f"basis condition number {cond:.3e} too large")

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.V)

    @property
    def dim(self) -> int:
        return self.V.shape[0]


def _check_psd(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-8 * scale:
        raise ValueError(f"{name} is not symmetric")
    M = 0.5 * (M + M.T)
    if M.size and np.min(np.linalg.eigvalsh(M)) < -1e-9 * scale:
        raise ValueError(f"{name} is not positive semi-definite")
    return M


@dataclass
class SpectralDynamics:
    """One linear-SDE interval: spectrum/basis of A plus Q, B, alpha, R."""

    spectrum: Spectrum
    basis: EigenBasis
    Q: np.ndarray
    B: np.ndarray
    alpha: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        n = self.spectrum.dim
        if self.basis.dim != n:
            raise DimensionError(
                f"spectrum dim {n} does not match basis dim {self.basis.dim}"
            )
        self.Q = _check_psd(self.Q, "Q")
        if self.Q.shape != (n, n):
            raise DimensionError(f"Q must be {n}x{n}, got {self.Q.shape}")
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim != 2 or self.B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got shape {self.B.shape}")
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if self.alpha.shape != (n,):
            raise DimensionError(f"alpha must have length {n}")
        self.R = _check_psd(self.R, "R")
        if self.R.shape[0] > n:
            raise DimensionError("observed dim m cannot exceed state dim n")
        if not (np.all(np.isfinite(self.B)) and np.all(np.isfinite(self.alpha))):
            raise ValueError("B and alpha must be finite")

    @property
    def state_dim(self) -> int:
        return self.spectrum.dim

    @property
    def obs_dim(self) -> int:
        return self.R.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]


# ---------------------------------------------------------------------------
# Block arithmetic shared with the solver
# ---------------------------------------------------------------------------

def clipped_exp(z: complex, t: float) -> complex:
    """exp(z t) with the real exponent argument clipped to +-EXP_CLIP."""
    w = complex(z) * t
    re = w.real
    if re > EXP_CLIP:
        re = EXP_CLIP
    elif re < -EXP_CLIP:
        re = -EXP_CLIP
    return cmath.exp(complex(re, w.imag))


def block_diag_from_scalars(blocks, scalars, n: int) -> np.ndarray:
    """Expand per-entry complex scalars into the real block-diagonal matrix.

    A real entry contributes its (real) scalar; a pair entry with scalar
    x + i y contributes the rotation-scaling block [[x, y], [-y, x]].
    """
    D = np.zeros((n, n))
    for (off, _, pair), s in zip(blocks, scalars):
        if pair:
            x, y = s.real, s.imag
            D[off, off] = x
            D[off, off + 1] = y
            D[off + 1, off] = -y
            D[off + 1, off + 1] = x
        else:
            D[off, off] = s.real
    return D


def eigenfunction(spectrum: Spectrum, basis: EigenBasis, t: float) -> np.ndarray:
    """Matrix solution Phi(t) = V . D(t) of the homogeneous linear system."""
    n = spectrum.dim
    if basis.dim != n:
        raise DimensionError("spectrum and basis dimensions disagree")
    scalars = [clipped_exp(z, t) for _, z, _ in spectrum.blocks]
    return basis.V @ block_diag_from_scalars(spectrum.blocks, scalars, n)


def eigenfunction_inverse(spectrum: Spectrum, basis: EigenBasis, t: float) -> np.ndarray:
    """Phi(t)^-1 = D(-t) . V^-1, built structurally (never by inverting Phi)."""
    n = spectrum.dim
    if basis.dim != n:
        raise DimensionError("spectrum and basis dimensions disagree")
    scalars = [clipped_exp(z, -t) for _, z, _ in spectrum.blocks]
    return block_diag_from_scalars(spectrum.blocks, scalars, n) @ basis.inverse


# ---------------------------------------------------------------------------
# Conversion to and from an explicit operator
# ---------------------------------------------------------------------------

def canonicalize(entries, V: np.ndarray):
    """Sort entries descending by (real, imag), permute the matching basis
    columns, normalize (unit column norm; unit joint Frobenius norm per
    pair) and fix a deterministic sign.
    """
    V = np.asarray(V, dtype=float)
    offsets = []
    off = 0
    for e in entries:
        offsets.append(off)
        off += e.dim
    order = sorted(range(len(entries)), key=lambda i: entries[i].sort_key())
    cols = []
    sorted_entries = []
    for i in order:
        e = entries[i]
        block = V[:, offsets[i]:offsets[i] + e.dim].copy()
        norm = np.linalg.norm(block)
        if norm <= 0 or not np.isfinite(norm):
            raise SingularBasisError("zero or non-finite basis column")
        block /= norm
        lead = np.argmax(np.abs(block[:, 0]))
        if block[lead, 0] < 0:
            block = -block
        cols.append(block)
        sorted_entries.append(e)
    return Spectrum(tuple(sorted_entries)), EigenBasis(np.hstack(cols))


def decompose_operator(A: np.ndarray):
    """Eigendecompose a real operator into (Spectrum, EigenBasis).

    Requires distinct eigenvalues (tolerance-checked); intended for data
    generators and diagnostics, not for the learned model path.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"operator must be square, got {A.shape}")
    w, Vc = np.linalg.eig(A)
    scale = max(1.0, float(np.max(np.abs(w))))
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if abs(w[i] - w[j]) < 1e-7 * scale:
                raise DefectiveOperatorError(
                    f"eigenvalues {w[i]} and {w[j]} are not distinct"
                )
    cond = np.linalg.cond(Vc)
    if not np.isfinite(cond) or cond > 1e8:
        raise DefectiveOperatorError(f"near-defective operator, cond(V)={cond:.3e}")

    imag_tol = 1e-9 * scale
    entries = []
    cols = []
    used = np.zeros(n, dtype=bool)
    for i in range(n):
        if used[i]:
            continue
        if abs(w[i].imag) <= imag_tol:
            used[i] = True
            entries.append(RealEig(float(w[i].real)))
            cols.append(Vc[:, i].real.reshape(-1, 1))
            continue
        # locate the conjugate partner
        partner = None
        for j in range(i + 1, n):
            if not used[j] and abs(w[j] - w[i].conjugate()) < 1e-7 * scale:
                partner = j
                break
        if partner is None:
            raise DefectiveOperatorError("complex eigenvalue without conjugate pair")
        used[i] = used[partner] = True
        rep = i if w[i].imag > 0 else partner
        z, v = w[rep], Vc[:, rep]
        entries.append(ComplexPair(float(z.real), float(z.imag)))
        cols.append(np.column_stack([v.real, v.imag]))
    return canonicalize(entries, np.hstack(cols))


def assemble_operator(spectrum: Spectrum, basis: EigenBasis) -> np.ndarray:
    """Rebuild the explicit operator A = V . M . V^-1 from the spectral form,
    where M is block diagonal with r per real entry and [[a, b], [-b, a]]
    per pair.
    """
    n = spectrum.dim
    if basis.dim != n:
        raise DimensionError("spectrum and basis dimensions disagree")
    M = np.zeros((n, n))
    for off, z, pair in spectrum.blocks:
        if pair:
            M[off, off] = z.real
            M[off, off + 1] = z.imag
            M[off + 1, off] = -z.imag
            M[off + 1, off + 1] = z.real
        else:
            M[off, off] = z.real
    return basis.V @ M @ basis.inverse


def regularize_basis(V_pre: np.ndarray) -> np.ndarray:
    """Invertibility guard for a learned pre-basis.

    Adds ridge * I while the condition number exceeds BASIS_MAX_CONDITION,
    escalating the ridge tenfold (bounded) so the result is always usable.
    """
    V = np.asarray(V_pre, dtype=float)
    ridge = BASIS_RIDGE
    for _ in range(10):
        cond = np.linalg.cond(V)
        if np.isfinite(cond) and cond <= BASIS_MAX_CONDITION:
            break
        V = V + ridge * np.eye(V.shape[0])
        ridge *= 10.0
    return V


def normalize_basis(V: np.ndarray, blocks) -> np.ndarray:
    """Scale each entry's column group to unit (Frobenius) norm."""
    V = np.asarray(V, dtype=float).copy()
    for off, _, pair in blocks:
        width = 2 if pair else 1
        norm = np.linalg.norm(V[:, off:off + width])
        if norm <= 0 or not np.isfinite(norm):
            raise SingularBasisError("zero or non-finite basis column group")
        V[:, off:off + width] /= norm
    return V


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def spectrum_to_json(spectrum: Spectrum) -> list:
    out = []
    for e in spectrum.entries:
        if isinstance(e, RealEig):
            out.append({"type": "real", "r": fmt_float(e.r)})
        else:
            out.append({"type": "complex", "a": fmt_float(e.a), "b": fmt_float(e.b)})
    return out


def spectrum_from_json(obj) -> Spectrum:
    entries = []
    for item in obj:
        if item["type"] == "real":
            entries.append(RealEig(parse_float(item["r"])))
        elif item["type"] == "complex":
            entries.append(ComplexPair(parse_float(item["a"]), parse_float(item["b"])))
        else:
            raise ValueError(f"unknown spectrum entry type {item['type']!r}")
    return Spectrum(tuple(entries))


def dynamics_to_json(dyn: SpectralDynamics) -> dict:
    return {
        "spectrum": spectrum_to_json(dyn.spectrum),
        "V": encode_array(dyn.basis.V),
        "Q": encode_array(dyn.Q),
        "B": encode_array(dyn.B),
        "alpha": encode_array(dyn.alpha),
        "R": encode_array(dyn.R),
    }


def dynamics_from_json(obj) -> SpectralDynamics:
    return SpectralDynamics(
        spectrum=spectrum_from_json(obj["spectrum"]),
        basis=EigenBasis(decode_array(obj["V"])),
        Q=decode_array(obj["Q"]),
        B=decode_array(obj["B"]).reshape(len(obj["V"]), -1),
        alpha=decode_array(obj["alpha"]),
        R=np.atleast_2d(decode_array(obj["R"])),
    )
