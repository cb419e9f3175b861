"""Operator-valued symbols and the semiclassical quantization Op_eps.

A symbol is a finite sum of terms a(x) (x) M(lam).  The x-profile a is a sum of
separable pieces coef * poly(v) * a_v(v) * a_z(z) sampled on a grid, so left-
invariant derivatives stay exact on the polynomial factor and spectral on the
sampled factors.  Flowed symbols carry a central shift coefficient c: the
profile is evaluated at (v, z + c * lam/|lam|).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fiber as fb
from .gft import (
    FiberField,
    inverse_gft,
    GridSpec,
    MixedState,
    PhysicalState,
    default_group,
    forward_gft,
    from_mixed,
    inverse_slices,
)
from .htype import GroupStructure, adapted_frame

# ---------------------------------------------------------------- x-profiles


def _poly_eval(poly: dict, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[0])
    for exps, c in poly.items():
        term = np.full(pts.shape[0], float(c))
        for i, e in enumerate(exps):
            if e:
                term = term * pts[:, i] ** e
        out += term
    return out


def _poly_diff(poly: dict, j: int) -> dict:
    out = {}
    for exps, c in poly.items():
        if exps[j]:
            e = list(exps)
            e[j] -= 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + c * exps[j]
    return out


def _poly_mul_linear(poly: dict, coeffs: np.ndarray) -> dict:
    out = {}
    for exps, c in poly.items():
        for i, a in enumerate(coeffs):
            if a == 0:
                continue
            e = list(exps)
            e[i] += 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + c * a
    return out


@dataclass(frozen=True)
class ProfileTerm:
    coef: complex
    poly: dict
    v_factor: np.ndarray | None
    z_factor: np.ndarray | None


@dataclass
class Profile:
    grid: GridSpec
    terms: list = field(default_factory=list)

    # constructors
    @classmethod
    def constant(cls, grid: GridSpec, value: complex = 1.0) -> "Profile":
        return cls(grid, [ProfileTerm(complex(value), {(0,) * (2 * grid.d): 1.0}, None, None)])

    @classmethod
    def gaussian(cls, grid: GridSpec, v_center=None, v_width=None, z_center=None, z_width=None, amplitude=1.0) -> "Profile":
        """exp(-|v - v_c|^2 / (2 wv^2)) exp(-|z - z_c|^2 / (2 wz^2)); a None width drops that factor."""
        va = za = None
        if v_width is not None:
            vc = np.zeros(2 * grid.d) if v_center is None else np.asarray(v_center, dtype=float)
            va = np.exp(-np.sum((grid.v_points() - vc) ** 2, axis=1) / (2 * v_width**2)).astype(complex)
        if z_width is not None:
            zc = np.zeros(grid.p) if z_center is None else np.atleast_1d(np.asarray(z_center, dtype=float))
            za = np.exp(-np.sum((grid.z_points() - zc) ** 2, axis=1) / (2 * z_width**2)).astype(complex)
        return cls(grid, [ProfileTerm(complex(amplitude), {(0,) * (2 * grid.d): 1.0}, va, za)])

    @classmethod
    def from_factors(cls, grid: GridSpec, v_factor=None, z_factor=None) -> "Profile":
        va = None if v_factor is None else np.asarray(v_factor, dtype=complex).ravel()
        za = None if z_factor is None else np.asarray(z_factor, dtype=complex).ravel()
        return cls(grid, [ProfileTerm(1.0 + 0j, {(0,) * (2 * grid.d): 1.0}, va, za)])

    # algebra
    def __add__(self, other: "Profile") -> "Profile":
        return Profile(self.grid, self.terms + other.terms)

    def scale(self, c: complex) -> "Profile":
        return Profile(self.grid, [replace(t, coef=t.coef * c) for t in self.terms])

    def conj(self) -> "Profile":
        return Profile(
            self.grid,
            [
                ProfileTerm(
                    np.conj(t.coef),
                    dict(t.poly),
                    None if t.v_factor is None else np.conj(t.v_factor),
                    None if t.z_factor is None else np.conj(t.z_factor),
                )
                for t in self.terms
            ],
        )

    @property
    def is_zero(self) -> bool:
        return not self.terms

    # sampling
    def v_values(self, term: ProfileTerm, pts=None) -> np.ndarray:
        pts = self.grid.v_points() if pts is None else pts
        out = term.coef * _poly_eval(term.poly, pts)
        if term.v_factor is not None:
            out = out * term.v_factor
        return np.asarray(out, dtype=complex)

    def z_values(self, term: ProfileTerm, shift=None) -> np.ndarray:
        if term.z_factor is None:
            return np.ones(self.grid.n_z**self.grid.p, dtype=complex)
        if shift is None or not np.any(shift):
            return term.z_factor
        return _shift_z(self.grid, term.z_factor, shift)

    def values(self, shift=None) -> np.ndarray:
        """Full samples on (n_pts, n_z^p); only sensible on small grids."""
        g = self.grid
        out = np.zeros((g.n_pts, g.n_z**g.p), dtype=complex)
        for t in self.terms:
            out += np.outer(self.v_values(t), self.z_values(t, shift))
        return out

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.values()))) if self.terms else 0.0

    # left-invariant derivatives
    def central_derivative(self, k: int) -> "Profile":
        out = []
        for t in self.terms:
            if t.z_factor is None:
                continue
            out.append(replace(t, z_factor=_spectral_diff(self.grid, t.z_factor, k, axis_kind="z")))
        return Profile(self.grid, out)

    def field_derivative(self, group: GroupStructure, j: int) -> "Profile":
        """V_j a with V_j = d/dv_j + sum_k c_jk(v) d/dz_k and c_jk(v) = -(1/2)(B_k v)_j."""
        out = []
        for t in self.terms:
            dp = _poly_diff(t.poly, j)
            if dp:
                out.append(replace(t, poly=dp))
            if t.v_factor is not None:
                out.append(replace(t, v_factor=_spectral_diff(self.grid, t.v_factor, j, axis_kind="v")))
            if t.z_factor is not None:
                for k in range(self.grid.p):
                    lin = -0.5 * group.B[k, j, :]
                    if not np.any(lin):
                        continue
                    poly = _poly_mul_linear(t.poly, lin)
                    if poly:
                        out.append(ProfileTerm(t.coef, poly, t.v_factor, _spectral_diff(self.grid, t.z_factor, k, "z")))
        return Profile(self.grid, out)

    def sublaplacian(self, group: GroupStructure) -> "Profile":
        acc = Profile(self.grid, [])
        for j in range(2 * self.grid.d):
            acc = acc + self.field_derivative(group, j).field_derivative(group, j)
        return acc


def _spectral_diff(grid: GridSpec, arr: np.ndarray, axis: int, axis_kind: str) -> np.ndarray:
    if axis_kind == "v":
        shape, n, h = grid.v_shape, grid.n_v, grid.dv
    else:
        shape, n, h = grid.z_shape, grid.n_z, grid.dz
    a = np.asarray(arr, dtype=complex).reshape(shape)
    kk = 2 * np.pi * np.fft.fftfreq(n, d=h)
    kk[n // 2] = 0.0
    bshape = [1] * len(shape)
    bshape[axis] = n
    out = np.fft.ifft(np.fft.fft(a, axis=axis) * (1j * kk).reshape(bshape), axis=axis)
    return out.ravel()


def _shift_z(grid: GridSpec, arr: np.ndarray, shift) -> np.ndarray:
    """Samples of a(z + shift) by an exact FFT phase shift."""
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    a = np.asarray(arr, dtype=complex).reshape(grid.z_shape)
    spec = np.fft.fftn(a)
    kk = 2 * np.pi * np.fft.fftfreq(grid.n_z, d=grid.dz)
    phase = np.ones(grid.z_shape, dtype=complex)
    for i in range(grid.p):
        bshape = [1] * grid.p
        bshape[i] = grid.n_z
        phase = phase * np.exp(1j * kk * shift[i]).reshape(bshape)
    return np.fft.ifftn(spec * phase).ravel()


# ---------------------------------------------------------------- fiber parts


class FiberPart:
    """A lambda-family of N x N matrices; ``lam`` is the (already rescaled) frequency."""

    def matrix(self, lam: np.ndarray, frame: fb.HermiteFrame, group: GroupStructure) -> np.ndarray:
        raise NotImplementedError

    def __matmul__(self, other: "FiberPart") -> "FiberPart":
        return Product((self, other))


class Identity(FiberPart):
    def matrix(self, lam, frame, group):
        return np.eye(frame.N, dtype=complex)


@dataclass(frozen=True)
class BandProjector(FiberPart):
    n: int

    def matrix(self, lam, frame, group):
        return fb.projector(self.n, lam, frame).mat


@dataclass(frozen=True)
class Hamiltonian(FiberPart):
    def matrix(self, lam, frame, group):
        return fb.hamiltonian(lam, frame).mat


@dataclass(frozen=True)
class Spectral(FiberPart):
    f: Callable

    def matrix(self, lam, frame, group):
        return fb.spectral_function(self.f, lam, frame).mat


@dataclass(frozen=True)
class FieldRep(FiberPart):
    """pi(P_j), pi(Q_j) in the adapted frame of lam, or pi(Z_k)."""

    which: str
    j: int = 0

    def matrix(self, lam, frame, group):
        return fb.vector_field_rep(lam, frame, self.which, self.j).mat


@dataclass(frozen=True)
class VFieldRep(FiberPart):
    """pi(V_k) for the fixed basis vector V_k: sum_i R[k, i] pi(X_i), X = (P_1..P_d, Q_1..Q_d)."""

    k: int

    def matrix(self, lam, frame, group):
        R = adapted_frame(group, lam).R
        d = frame.d
        out = np.zeros((frame.N, frame.N), dtype=complex)
        for i in range(d):
            if R[self.k, i]:
                out += R[self.k, i] * fb.vector_field_rep(lam, frame, "P", i).mat
            if R[self.k, d + i]:
                out += R[self.k, d + i] * fb.vector_field_rep(lam, frame, "Q", i).mat
        return out


@dataclass(frozen=True)
class Product(FiberPart):
    parts: tuple

    def matrix(self, lam, frame, group):
        out = self.parts[0].matrix(lam, frame, group)
        for p in self.parts[1:]:
            out = out @ p.matrix(lam, frame, group)
        return out


@dataclass(frozen=True)
class Combination(FiberPart):
    items: tuple  # ((coef, part), ...)

    def matrix(self, lam, frame, group):
        out = np.zeros((frame.N, frame.N), dtype=complex)
        for c, p in self.items:
            out += c * p.matrix(lam, frame, group)
        return out


@dataclass(frozen=True)
class Commutator(FiberPart):
    left: FiberPart
    right: FiberPart

    def matrix(self, lam, frame, group):
        a = self.left.matrix(lam, frame, group)
        b = self.right.matrix(lam, frame, group)
        return a @ b - b @ a


@dataclass(frozen=True)
class BandMask(FiberPart):
    """Keep entries whose (row band, column band) pass ``rule``: 'diag', 'offdiag' or a pair (n, n')."""

    part: FiberPart
    rule: object
    bound: int

    def matrix(self, lam, frame, group):
        M = self.part.matrix(lam, frame, group)
        deg = frame.degree
        rb, cb = deg[:, None], deg[None, :]
        inside = (rb <= self.bound) & (cb <= self.bound)
        if self.rule == "diag":
            keep = inside & (rb == cb)
        elif self.rule == "offdiag":
            keep = inside & (rb != cb)
        elif self.rule == "all":
            keep = inside
        else:
            n, n2 = self.rule
            keep = (rb == n) & (cb == n2)
        return np.where(keep, M, 0.0)


@dataclass(frozen=True)
class Scaled(FiberPart):
    """g(lam) * part, with g a scalar function of the frequency vector."""

    part: FiberPart
    g: Callable

    def matrix(self, lam, frame, group):
        return complex(self.g(lam)) * self.part.matrix(lam, frame, group)


@dataclass(frozen=True)
class Explicit(FiberPart):
    fn: Callable

    def matrix(self, lam, frame, group):
        return np.asarray(self.fn(lam, frame), dtype=complex)


@dataclass(frozen=True)
class Sigma1Part(FiberPart):
    """Fiber factor F_k of sigma_1 = sum_k (V_k a) (x) F_k:
    F_k = (-1/(2i|lam|)) sum_j (R[k,j] pi(Q_j) - R[k,d+j] pi(P_j)) M."""

    k: int
    part: FiberPart

    def matrix(self, lam, frame, group):
        R = adapted_frame(group, lam).R
        d = frame.d
        acc = np.zeros((frame.N, frame.N), dtype=complex)
        for j in range(d):
            acc += R[self.k, j] * fb.vector_field_rep(lam, frame, "Q", j).mat
            acc -= R[self.k, d + j] * fb.vector_field_rep(lam, frame, "P", j).mat
        nrm = np.linalg.norm(lam)
        return (-1.0 / (2j * nrm)) * acc @ self.part.matrix(lam, frame, group)


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def psi_cutoff(x):
    """Smooth psi with psi = 0 on (-inf, 1/2] and psi = 1 on [1, inf)."""
    return smooth_step(2.0 * np.asarray(x, dtype=float) - 1.0)


@dataclass(frozen=True)
class SmoothCutoff:
    """g(lam) = 1 for lo <= |lam| <= hi, smooth decay to 0 over ``ramp`` on both sides."""

    lo: float
    hi: float
    ramp: float

    def __post_init__(self):
        if not (0 < self.ramp and self.lo - self.ramp > 0 and self.hi >= self.lo):
            raise ValueError("cutoff must be supported away from lambda = 0")

    @property
    def support(self) -> tuple:
        return (self.lo - self.ramp, self.hi + self.ramp)

    def __call__(self, lam):
        r = np.linalg.norm(np.atleast_1d(lam))
        return float(smooth_step((r - self.lo + self.ramp) / self.ramp) * smooth_step((self.hi + self.ramp - r) / self.ramp))


# ---------------------------------------------------------------- symbols


@dataclass(frozen=True)
class SymbolTerm:
    profile: Profile
    fiber: FiberPart
    shift: float = 0.0
    bands: tuple | None = None


@dataclass
class Symbol:
    terms: list
    lam_support: tuple | None = None
    band_bound: int | None = None

    @property
    def in_AH(self) -> bool:
        return self.lam_support is not None and self.lam_support[0] > 0 and self.band_bound is not None

    @property
    def is_diagonal(self) -> bool:
        return all(t.bands is not None and t.bands[0] == t.bands[1] for t in self.terms)

    def __add__(self, other: "Symbol") -> "Symbol":
        lo = _merge_support(self.lam_support, other.lam_support)
        bb = None if self.band_bound is None or other.band_bound is None else max(self.band_bound, other.band_bound)
        return Symbol(self.terms + other.terms, lo, bb)

    def scale(self, c: complex) -> "Symbol":
        return Symbol([replace(t, profile=t.profile.scale(c)) for t in self.terms], self.lam_support, self.band_bound)

    def fiber_matrix(self, term: SymbolTerm, lam, frame, group) -> np.ndarray:
        M = term.fiber.matrix(np.atleast_1d(np.asarray(lam, dtype=float)), frame, group)
        if self.band_bound is not None:
            keep = frame.degree <= self.band_bound
            M = M * (keep[:, None] & keep[None, :])
        return M

    def evaluate(self, v_index: int, z_index: int, lam, frame, group) -> np.ndarray:
        """sigma(x, lam) at grid point (v_index, z_index)."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        out = np.zeros((frame.N, frame.N), dtype=complex)
        for t in self.terms:
            shift = t.shift * lam / np.linalg.norm(lam)
            a = 0.0
            for pt in t.profile.terms:
                a += t.profile.v_values(pt)[v_index] * t.profile.z_values(pt, shift)[z_index]
            out += a * self.fiber_matrix(t, lam, frame, group)
        return out


def _merge_support(a, b):
    if a is None or b is None:
        return None
    return (min(a[0], b[0]), max(a[1], b[1]))


def symbol(profile: Profile, fiber: FiberPart, lam_support=None, band_bound=None, bands=None) -> Symbol:
    return Symbol([SymbolTerm(profile, fiber, 0.0, bands)], lam_support, band_bound)


# ---------------------------------------------------------------- quantization


def _term_mixed(term: SymbolTerm, sym: Symbol, eps: float, F: FiberField, c0=None) -> np.ndarray:
    """Slices of the inverse transform of M(eps^2 lam) F(lam), shape (K, n_pts)."""
    mats = np.empty_like(F.mats)
    for i, l in enumerate(F.lam):
        mats[i] = sym.fiber_matrix(term, eps**2 * l, F.frame, F.group) @ F.mats[i]
    return inverse_slices(F, mats, c0)


def op_eps_apply_field(sym: Symbol, eps: float, F: FiberField, c0=None) -> PhysicalState:
    """Op_eps(sigma) applied to the state whose transform is F."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = F.grid
    out = np.zeros((g.n_pts, g.n_z**g.p), dtype=complex)
    lam = F.lam
    unit = lam / np.linalg.norm(lam, axis=1, keepdims=True)
    for term in sym.terms:
        if term.profile.is_zero:
            continue
        slices = _term_mixed(term, sym, eps, F, c0)
        if not np.any(slices):
            continue
        # group slices sharing the same central shift of the profile
        shifts = np.round(term.shift * unit, 12)
        for w in np.unique(shifts, axis=0):
            sel = np.all(shifts == w, axis=1)
            u = from_mixed(MixedState(g, F.kidx[sel], slices[sel])).values.reshape(g.n_pts, -1)
            out += term.profile.values(w) * u
    return PhysicalState(g, out.reshape(g.shape))


def op_eps_apply(sym: Symbol, eps: float, f: PhysicalState, frame: fb.HermiteFrame, group=None, c0=None) -> PhysicalState:
    group = group or default_group(f.grid)
    return op_eps_apply_field(sym, eps, forward_gft(f, frame, group), c0)


def inner(f: PhysicalState, g: PhysicalState) -> complex:
    gr = f.grid
    return complex(np.sum(f.values * np.conj(g.values)) * gr.cell_v * gr.cell_z)


def expectation(sym: Symbol, eps: float, f: PhysicalState, frame: fb.HermiteFrame, group=None, c0=None) -> complex:
    return inner(op_eps_apply(sym, eps, f, frame, group, c0), f)


# ---------------------------------------------------------------- symbol operations


def split_diag(sym: Symbol) -> tuple[Symbol, Symbol]:
    """(sigma_d, sigma_a): per-band diagonal compressions and the off-band remainder."""
    if sym.band_bound is None:
        raise ValueError("split_diag needs a finite band bound")
    B = sym.band_bound
    diag, anti = [], []
    for t in sym.terms:
        for n in range(B + 1):
            diag.append(SymbolTerm(t.profile, BandMask(t.fiber, (n, n), B), t.shift, (n, n)))
        anti.append(SymbolTerm(t.profile, BandMask(t.fiber, "offdiag", B), t.shift, None))
    return Symbol(diag, sym.lam_support, B), Symbol(anti, sym.lam_support, B)


def band_cutoff_symbol(sym: Symbol, n: int, n2: int, u: float, psi=psi_cutoff) -> Symbol:
    """chi(uH) Pi_n sigma Pi_n' chi(uH) with chi = 1 - psi, a cutoff equal to 1 on low energies.

    For u * |lam|(2 max(n, n') + d) <= 1/2 over the lambda-support this is exactly
    Pi_n sigma Pi_n'; for u large it removes the bands.
    """
    if not 0 < u <= 1:
        raise ValueError("u must lie in (0, 1]")
    chi = Spectral(lambda e: 1.0 - psi(u * e))
    terms = [
        SymbolTerm(t.profile, Product((chi, BandMask(t.fiber, (n, n2), max(n, n2)), chi)), t.shift, (n, n2))
        for t in sym.terms
    ]
    return Symbol(terms, sym.lam_support, max(n, n2))


def flow_phi(sym: Symbol, s: float) -> Symbol:
    """Band-n terms get their profile translated centrally by s (2n+d)/2 along lam/|lam|."""
    if not sym.is_diagonal:
        raise ValueError("flow_phi needs an H-diagonal symbol with per-band terms")
    out = []
    for t in sym.terms:
        n = t.bands[0]
        d = t.profile.grid.d
        out.append(replace(t, shift=t.shift + s * (2 * n + d) / 2.0))
    return Symbol(out, sym.lam_support, sym.band_bound)


def derivative_symbol(sym: Symbol, group: GroupStructure, kind: str) -> Symbol:
    """V.pi(V) sigma (kind="vpiv") or Delta_G sigma (kind="laplace") as new symbols."""
    terms = []
    for t in sym.terms:
        if kind == "vpiv":
            for k in range(2 * group.d):
                terms.append(SymbolTerm(t.profile.field_derivative(group, k), Product((VFieldRep(k), t.fiber)), t.shift, None))
        elif kind == "laplace":
            terms.append(SymbolTerm(t.profile.sublaplacian(group), t.fiber, t.shift, t.bands))
        else:
            raise ValueError("kind must be 'vpiv' or 'laplace'")
    return Symbol(terms, sym.lam_support, None)


def commutator_with_h(sym: Symbol) -> Symbol:
    terms = [SymbolTerm(t.profile, Commutator(Hamiltonian(), t.fiber), t.shift, None) for t in sym.terms]
    return Symbol(terms, sym.lam_support, None)


def commutator_expansion_check(
    sym: Symbol, eps: float, f: PhysicalState, g: PhysicalState, frame: fb.HermiteFrame, group=None, ordering="multiplier-first"
) -> dict:
    """Bilinear-form residual of
        [-eps^2 Delta, Op(sigma)] = Op([H, sigma]) - 2 eps Op(V.pi(V) sigma) - eps^2 Op(Delta sigma)
    with -eps^2 Delta applied spectrally to the band-limited states f and g.

    ``ordering="multiplier-last"`` swaps the factor order inside Op (a control that must fail).
    """
    group = group or default_group(f.grid)
    Ff = forward_gft(f, frame, group)
    Fg = forward_gft(g, frame, group)
    if sym.band_bound is not None:
        raise ValueError("commutator check expects symbols without band truncation")
    nyq = np.pi / f.grid.dz
    for F in (Ff, Fg):
        mag = np.abs(F.mats).max(axis=(1, 2))
        live = mag > 1e-12 * max(mag.max(), 1e-300)  # round-off fills every slice after a transform
        if live.any() and np.abs(F.lam[live]).max() > 0.6 * nyq:
            raise ValueError("states reach the central Nyquist band; products with the profile would alias")

    def H_field(F):
        e = np.linalg.norm(F.lam, axis=1)[:, None] * (2 * frame.degree + frame.d)[None, :]
        return F.with_mats(eps**2 * e[:, :, None] * F.mats)

    Lg = inverse_gft(H_field(Fg))

    def apply(s, F):
        if ordering == "multiplier-first":
            return op_eps_apply_field(s, eps, F)
        return _op_multiplier_last(s, eps, F, frame, group)

    t1 = inner(apply(sym, Ff), Lg)
    t2 = inner(apply(sym, H_field(Ff)), g)
    lhs = t1 - t2
    rhs = (
        inner(apply(commutator_with_h(sym), Ff), g)
        - 2 * eps * inner(apply(derivative_symbol(sym, group, "vpiv"), Ff), g)
        - eps**2 * inner(apply(derivative_symbol(sym, group, "laplace"), Ff), g)
    )
    # the commutator may vanish (x-independent H-commuting symbols); measure against its two halves
    scale = max(abs(t1), abs(t2), abs(rhs), 1e-300)
    return {"lhs": lhs, "rhs": rhs, "abs": abs(lhs - rhs), "rel": abs(lhs - rhs) / scale}


def _op_multiplier_last(sym: Symbol, eps: float, F: FiberField, frame, group) -> PhysicalState:
    """Opposite ordering: multiply by a(x) first, then apply the Fourier multiplier."""
    base = inverse_gft(F)
    g = F.grid
    out = np.zeros(g.shape, dtype=complex)
    for term in sym.terms:
        if term.shift:
            raise ValueError("multiplier-last control supports unflowed symbols only")
        prod = PhysicalState(g, (term.profile.values() * base.values.reshape(g.n_pts, -1)).reshape(g.shape))
        Fp = forward_gft(prod, frame, group, check=False)
        single = Symbol([SymbolTerm(Profile.constant(g), term.fiber)], sym.lam_support, sym.band_bound)
        out += op_eps_apply_field(single, eps, Fp).values
    return PhysicalState(g, out)


def sigma1_construct(sym: Symbol, group: GroupStructure) -> Symbol:
    """sigma_1 = sum_k (V_k a) (x) F_k(lam), the fixed-basis form of
    (-1/(2i|lam|)) sum_j (P_j a pi(Q_j) - Q_j a pi(P_j)) M."""
    if sym.lam_support is None or sym.lam_support[0] <= 0:
        raise ValueError("sigma1 needs a scalar cutoff supported away from lambda = 0")
    terms = []
    for t in sym.terms:
        for k in range(2 * group.d):
            terms.append(SymbolTerm(t.profile.field_derivative(group, k), Sigma1Part(k, t.fiber), t.shift, None))
    return Symbol(terms, sym.lam_support, None)


def _pointwise(profile: Profile, v_index: int, z_index: int, shift=None) -> complex:
    return complex(sum(profile.v_values(t)[v_index] * profile.z_values(t, shift)[z_index] for t in profile.terms))


def sigma1_commutator_residual(sym: Symbol, group, frame, lam, points, guard: int = fb.GUARD) -> dict:
    """Fiberwise check of [H, sigma_1] = V.pi(V) sigma at grid points (interior block).

    Also returns the residual of the opposite sign, [sigma_1, H] = V.pi(V) sigma.
    """
    s1 = sigma1_construct(sym, group)
    vp = derivative_symbol(sym, group, "vpiv")
    H = fb.hamiltonian(lam, frame).mat
    keep = frame.interior(guard)
    sel = np.ix_(keep, keep)
    worst, worst_other, scale = 0.0, 0.0, 0.0
    for vi, zi in points:
        S1 = s1.evaluate(vi, zi, lam, frame, group)
        T = vp.evaluate(vi, zi, lam, frame, group)
        comm = H @ S1 - S1 @ H
        worst = max(worst, float(np.abs(comm - T)[sel].max()))
        worst_other = max(worst_other, float(np.abs(-comm - T)[sel].max()))
        scale = max(scale, float(np.abs(T)[sel].max()))
    return {"residual": worst, "opposite_sign": worst_other, "scale": scale}


def sigma1_band_residual(sym: Symbol, group, frame, lam, n: int, points) -> dict:
    """Check Pi_n (V.pi(V) sigma_1) Pi_n = (1/4)((2n+d) i|lam|^{-1} Z^lam - Delta_G) Pi_n sigma Pi_n."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    s1 = sigma1_construct(sym, group)
    lhs_sym = derivative_symbol(s1, group, "vpiv")
    band = frame.band_mask(n)
    sel = np.ix_(band, band)
    nrm = np.linalg.norm(lam)
    worst, scale = 0.0, 0.0
    for vi, zi in points:
        L = lhs_sym.evaluate(vi, zi, lam, frame, group)[sel]
        R = np.zeros_like(L)
        for t in sym.terms:
            shift = t.shift * lam / nrm
            zder = sum(lam[k] * _pointwise(t.profile.central_derivative(k), vi, zi, shift) for k in range(group.p))
            lap = _pointwise(t.profile.sublaplacian(group), vi, zi, shift)
            M = sym.fiber_matrix(t, lam, frame, group)[sel]
            R += 0.25 * ((2 * n + frame.d) * 1j / nrm * zder - lap) * M
        worst = max(worst, float(np.abs(L - R).max()))
        scale = max(scale, float(np.abs(R).max()))
    return {"residual": worst, "scale": scale, "rel": worst / max(scale, 1e-300)}
