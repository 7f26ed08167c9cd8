"""Divergence-free spectral fields on the 2D torus.

A velocity field is stored as one complex amplitude per representative
wavevector k (one of each +-k pair).  The real, divergence-free field it
encodes is

    u(x) = sum_k [Re(a_k) sqrt(2) cos(k.x) + Im(a_k) sqrt(2) sin(k.x)] k_perp/|k|

with k_perp = (-k2, k1) and the torus inner product normalized to the mean,
so that the cos/sin eigenfunctions are orthonormal and ||u||^2 = sum |a_k|^2.
The dissipative operator is diagonal with eigenvalue |k|^2 per mode, and the
advection term is evaluated by exact mode-pair convolution truncated to the
retained wavevectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class BasisError(ValueError):
    """Raised when fields from different bases are mixed."""


@dataclass(frozen=True)
class BasisSpec:
    """Retained wavevectors and their dissipation eigenvalues.

    Modes are the representatives of +-k pairs with 0 < |k|_inf <= cutoff,
    ordered lexicographically, so the layout is a pure function of cutoff.
    """

    cutoff: int
    modes: np.ndarray        # (M, 2) int
    eigenvalues: np.ndarray  # (M,) float, |k|^2

    # convolution table for the advection term, built once in make_basis
    _conv_i: np.ndarray = field(repr=False, default=None)
    _conv_j: np.ndarray = field(repr=False, default=None)
    _conv_c: np.ndarray = field(repr=False, default=None)
    _conv_starts: np.ndarray = field(repr=False, default=None)
    _conv_out: np.ndarray = field(repr=False, default=None)
    _real_tensor_cache: dict = field(repr=False, default_factory=dict)

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def mode_index(self, k) -> int:
        k1, k2 = int(k[0]), int(k[1])
        key = self._mode_lookup.get((k1, k2))
        if key is None:
            raise KeyError(f"wavevector {(k1, k2)} is not a representative mode")
        return key

    @property
    def _mode_lookup(self):
        cache = self._real_tensor_cache
        if "lookup" not in cache:
            cache["lookup"] = {(int(a), int(b)): i for i, (a, b) in enumerate(self.modes)}
        return cache["lookup"]

    def __eq__(self, other):
        return isinstance(other, BasisSpec) and other.cutoff == self.cutoff

    def __hash__(self):
        return hash(("BasisSpec", self.cutoff))


def make_basis(K: int) -> BasisSpec:
    """Enumerate representative modes for cutoff K (K >= 1)."""
    if int(K) != K or K < 1:
        raise ValueError(f"cutoff must be an integer >= 1, got {K!r}")
    K = int(K)
    reps = []
    for k1 in range(0, K + 1):
        for k2 in range(-K, K + 1):
            if (k1, k2) == (0, 0):
                continue
            if k1 > 0 or k2 > 0:
                reps.append((k1, k2))
    reps.sort()
    modes = np.array(reps, dtype=np.int64)
    lambdas = (modes[:, 0] ** 2 + modes[:, 1] ** 2).astype(float)
    conv = _build_conv_table(modes, K)
    basis = BasisSpec(cutoff=K, modes=modes, eigenvalues=lambdas,
                      _conv_i=conv[0], _conv_j=conv[1], _conv_c=conv[2],
                      _conv_starts=conv[3], _conv_out=conv[4])
    return basis


def _build_conv_table(modes: np.ndarray, K: int):
    """Mode-pair interaction table for the Leray-projected advection term.

    Works on the full lattice (representatives followed by their negatives);
    only contributions landing on a representative output are kept, the
    conjugate half being implied by realness.
    """
    M = modes.shape[0]
    lattice = np.vstack([modes, -modes])
    index = {(int(a), int(b)): i for i, (a, b) in enumerate(lattice)}
    norms = np.sqrt((lattice ** 2).sum(axis=1))

    ti, tj, to, tc = [], [], [], []
    for i, p in enumerate(lattice):
        p_perp = (-p[1], p[0])
        for j, q in enumerate(lattice):
            k = (int(p[0] + q[0]), int(p[1] + q[1]))
            if k == (0, 0) or max(abs(k[0]), abs(k[1])) > K:
                continue
            out = index[k]
            if out >= M:
                continue  # conjugate pair handled implicitly
            pq = p_perp[0] * q[0] + p_perp[1] * q[1]
            qk = q[0] * k[0] + q[1] * k[1]
            if pq == 0 or qk == 0:
                continue
            knorm = math.hypot(k[0], k[1])
            coef = 1j * pq / norms[i] * qk / (norms[j] * knorm)
            ti.append(i)
            tj.append(j)
            to.append(out)
            tc.append(coef)

    ti = np.array(ti, dtype=np.int64)
    tj = np.array(tj, dtype=np.int64)
    to = np.array(to, dtype=np.int64)
    tc = np.array(tc, dtype=np.complex128)
    order = np.lexsort((tj, ti, to))
    ti, tj, to, tc = ti[order], tj[order], to[order], tc[order]
    uniq, starts = np.unique(to, return_index=True)
    return ti, tj, tc, starts, uniq


@dataclass(frozen=True)
class SpectralField:
    """A real divergence-free zero-mean field: one complex amplitude per mode."""

    basis: BasisSpec
    amps: np.ndarray  # (M,) complex128

    def __post_init__(self):
        amps = np.asarray(self.amps, dtype=np.complex128)
        if amps.shape != (self.basis.n_modes,):
            raise ValueError(f"expected {self.basis.n_modes} amplitudes, got shape {amps.shape}")
        amps = amps.copy()
        amps.flags.writeable = False
        object.__setattr__(self, "amps", amps)

    def h_norm(self) -> float:
        return float(np.linalg.norm(self.amps))

    def v_norm(self) -> float:
        return math.sqrt(float(np.sum(self.basis.eigenvalues * np.abs(self.amps) ** 2)))

    def htheta_norm(self, noise: "NoiseSpec") -> float:
        _check_noise(self.basis, noise)
        return math.sqrt(float(np.sum(np.abs(self.amps) ** 2 / noise.b ** 2)))

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_basis(self, other)
        return SpectralField(self.basis, self.amps + other.amps)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_basis(self, other)
        return SpectralField(self.basis, self.amps - other.amps)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.basis, self.amps * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.basis, -self.amps)


def zero_field(basis: BasisSpec) -> SpectralField:
    return SpectralField(basis, np.zeros(basis.n_modes, dtype=np.complex128))


def unit_mode(basis: BasisSpec, k, amplitude: complex = 1.0) -> SpectralField:
    amps = np.zeros(basis.n_modes, dtype=np.complex128)
    amps[basis.mode_index(k)] = amplitude
    return SpectralField(basis, amps)


def random_field(basis: BasisSpec, rng: np.random.Generator, scale: float = 1.0,
                 decay: float = 1.0) -> SpectralField:
    """Random field with amplitudes ~ scale * |k|^-decay, for tests and ensembles."""
    M = basis.n_modes
    raw = rng.standard_normal(M) + 1j * rng.standard_normal(M)
    weights = basis.eigenvalues ** (-decay / 2.0)
    return SpectralField(basis, scale * raw * weights / math.sqrt(2.0))


@dataclass(frozen=True)
class NoiseSpec:
    """Per-mode forcing weights b_k > 0 shared by the cos and sin components."""

    b: np.ndarray          # (M,) float
    decay_exponent: float
    b0: float

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).copy()
        if np.any(b <= 0) or not np.all(np.isfinite(b)):
            raise ValueError("noise weights must be positive and finite")
        b.flags.writeable = False
        object.__setattr__(self, "b", b)

    @classmethod
    def power_law(cls, basis: BasisSpec, b0: float = 1.0, decay_exponent: float = 3.0) -> "NoiseSpec":
        if b0 <= 0:
            raise ValueError("b0 must be positive")
        b = b0 * np.sqrt(basis.eigenvalues) ** (-decay_exponent)
        return cls(b=b, decay_exponent=float(decay_exponent), b0=float(b0))

    def energy_weighted_sum(self, basis: BasisSpec) -> float:
        """Sum of lambda_m b_m^2 over the real eigenbasis (two components per pair)."""
        _check_noise(basis, self)
        return float(2.0 * np.sum(basis.eigenvalues * self.b ** 2))


def _check_basis(u: SpectralField, v: SpectralField):
    if u.basis != v.basis:
        raise BasisError("fields live on different bases "
                         f"(cutoffs {u.basis.cutoff} and {v.basis.cutoff})")


def _check_noise(basis: BasisSpec, noise: NoiseSpec):
    if noise.b.shape != (basis.n_modes,):
        raise BasisError(f"noise weights have {noise.b.shape[0]} entries, "
                         f"basis has {basis.n_modes} modes")


def inner(u: SpectralField, v: SpectralField) -> float:
    """Real L2 inner product."""
    _check_basis(u, v)
    return float(np.real(np.vdot(u.amps, v.amps)))


def stokes_apply(u: SpectralField) -> SpectralField:
    """Dissipative operator: multiply each amplitude by its eigenvalue."""
    return SpectralField(u.basis, u.basis.eigenvalues * u.amps)


def project_low(u: SpectralField, N: int) -> SpectralField:
    """Keep the N modes of smallest eigenvalue (stable tie-break by mode order)."""
    if N < 0:
        raise ValueError("N must be >= 0")
    return SpectralField(u.basis, u.amps * low_mode_mask(u.basis, N))


def low_mode_mask(basis: BasisSpec, N: int) -> np.ndarray:
    cache = basis._real_tensor_cache
    key = ("mask", int(N))
    if key not in cache:
        order = np.argsort(basis.eigenvalues, kind="stable")
        mask = np.zeros(basis.n_modes)
        mask[order[: int(N)]] = 1.0
        mask.flags.writeable = False
        cache[key] = mask
    return cache[key]


def norms(u: SpectralField, noise: NoiseSpec) -> tuple:
    """(||u||, |u|_V, |u|_Htheta)."""
    return (u.h_norm(), u.v_norm(), u.htheta_norm(noise))


# --- advection term -------------------------------------------------------

def to_lattice(amps: np.ndarray) -> np.ndarray:
    """Complex exponential coefficients on the full lattice, reps then negatives."""
    z = _INV_SQRT2 * np.conj(amps)
    return np.concatenate([z, -np.conj(z)], axis=-1)


def bilinear_raw(basis: BasisSpec, u_amps: np.ndarray, v_amps: np.ndarray) -> np.ndarray:
    """Advection of v by u, Leray-projected and truncated; supports batches (..., M)."""
    ul = to_lattice(u_amps)
    vl = to_lattice(v_amps)
    prod = basis._conv_c * ul[..., basis._conv_i] * vl[..., basis._conv_j]
    sums = np.add.reduceat(prod, basis._conv_starts, axis=-1)
    w = np.zeros(u_amps.shape, dtype=np.complex128)
    w[..., basis._conv_out] = sums
    return math.sqrt(2.0) * np.conj(w)


def bilinear(u: SpectralField, v: SpectralField) -> SpectralField:
    _check_basis(u, v)
    return SpectralField(u.basis, bilinear_raw(u.basis, u.amps, v.amps))


# --- real-coordinate view, used by the adjoint optimizer -------------------

def stack_real(amps: np.ndarray) -> np.ndarray:
    """(..., M) complex -> (..., 2M) real, cosine parts then sine parts."""
    return np.concatenate([amps.real, amps.imag], axis=-1)


def unstack_real(x: np.ndarray) -> np.ndarray:
    M = x.shape[-1] // 2
    return x[..., :M] + 1j * x[..., M:]


class AdvectionTensor:
    """Sparse trilinear form of the advection term in stacked real coordinates.

    Provides the forward product, the Jacobian action of x -> B(x, x) and its
    transpose, all as flat index/coefficient arrays driven by bincount.
    """

    def __init__(self, basis: BasisSpec):
        self.basis = basis
        self.size = 2 * basis.n_modes
        i_idx, j_idx, l_idx, coefs = _expand_real_terms(basis)
        self.i = i_idx
        self.j = j_idx
        self.l = l_idx
        self.c = coefs

    def apply(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        w = self.c * x[self.j] * y[self.l]
        return np.bincount(self.i, weights=w, minlength=self.size)

    def jac_apply(self, y: np.ndarray, v: np.ndarray) -> np.ndarray:
        """d/dx B(x,x) at y applied to v: B(y,v) + B(v,y)."""
        return self.apply(y, v) + self.apply(v, y)

    def jac_transpose(self, y: np.ndarray, w: np.ndarray) -> np.ndarray:
        part1 = np.bincount(self.l, weights=self.c * y[self.j] * w[self.i], minlength=self.size)
        part2 = np.bincount(self.j, weights=self.c * y[self.l] * w[self.i], minlength=self.size)
        return part1 + part2


def advection_tensor(basis: BasisSpec) -> AdvectionTensor:
    cache = basis._real_tensor_cache
    if "tensor" not in cache:
        cache["tensor"] = AdvectionTensor(basis)
    return cache["tensor"]


def _expand_real_terms(basis: BasisSpec):
    """Expand each complex convolution term into its real-coordinate entries.

    Lattice coefficient of a field at +k_m is (a_m - i b_m)/sqrt(2) and at
    -k_m it is -(a_m + i b_m)/sqrt(2); the output amplitude is sqrt(2) times
    the conjugate of the accumulated +k coefficient.  Signs below track those
    three conventions.
    """
    M = basis.n_modes
    # rebuild flat (unsegmented) term list from the stored table
    counts = np.diff(np.append(basis._conv_starts, basis._conv_i.size))
    out_idx = np.repeat(basis._conv_out, counts)
    I, J, C = basis._conv_i, basis._conv_j, basis._conv_c

    def split(idx):
        mode = np.where(idx < M, idx, idx - M)
        sA = np.where(idx < M, 1.0, -1.0)
        sB = -np.ones_like(sA)
        return mode, sA, sB

    mi, sA, sB = split(I)
    mj, tA, tB = split(J)
    cr, ci = C.real, C.imag
    half = 0.5 * math.sqrt(2.0)  # sqrt(2) * (1/sqrt(2))^2

    rows_i, rows_j, rows_l, rows_c = [], [], [], []

    def add(out, jj, ll, cc):
        keep = cc != 0.0
        rows_i.append(out[keep])
        rows_j.append(jj[keep])
        rows_l.append(ll[keep])
        rows_c.append(cc[keep])

    a_i, b_i = mi, mi + M
    a_j, b_j = mj, mj + M
    out_a, out_b = out_idx, out_idx + M
    # real part of the output
    add(out_a, a_i, a_j, half * cr * sA * tA)
    add(out_a, b_i, b_j, -half * cr * sB * tB)
    add(out_a, a_i, b_j, -half * ci * sA * tB)
    add(out_a, b_i, a_j, -half * ci * sB * tA)
    # imaginary part (sign flipped by the final conjugation)
    add(out_b, a_i, a_j, -half * ci * sA * tA)
    add(out_b, b_i, b_j, half * ci * sB * tB)
    add(out_b, a_i, b_j, -half * cr * sA * tB)
    add(out_b, b_i, a_j, -half * cr * sB * tA)

    i_idx = np.concatenate(rows_i)
    j_idx = np.concatenate(rows_j)
    l_idx = np.concatenate(rows_l)
    coefs = np.concatenate(rows_c)
    order = np.lexsort((l_idx, j_idx, i_idx))
    return i_idx[order], j_idx[order], l_idx[order], coefs[order]
