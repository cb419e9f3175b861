"""Spectral Schrodinger propagation, time windows, and a modal expectation engine.

The equation i eps^tau d/dt psi = -(eps^2/2) Delta psi is diagonal on the
Fourier side: row band n of the slice at lam picks up the phase
exp(-i eps^(2-tau) t |lam| (2n+d)/2).

Expectations along a trajectory are computed from the occupied (slice, band)
modes: with v-profiles U_p and phase rates w_p,
    (a u_L(t), u_R(t)) = sum_pq G_pq exp(-i (w_p - w_q) t),
so no physical state has to be built for a time sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gft import (
    FiberField,
    GridSpec,
    MixedState,
    calibrate_c0,
    default_group,
    inverse_slices,
    plancherel_norm_sq,
)
from .quantize import Profile, Symbol

# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class TimeWindow:
    """theta(t) = (1 + cos(pi (t - center)/half))^2 / (3 half) on [center - half, center + half]."""

    center: float = 0.0
    half: float = 1.0

    def __post_init__(self):
        if not self.half > 0:
            raise ValueError("window half-width must be positive")

    @property
    def support(self) -> tuple:
        return (self.center - self.half, self.center + self.half)

    def __call__(self, t):
        u = (np.asarray(t, dtype=float) - self.center) / self.half
        inside = np.abs(u) <= 1
        return np.where(inside, (1 + np.cos(np.pi * u)) ** 2 / (3 * self.half), 0.0)

    def derivative(self, t):
        u = (np.asarray(t, dtype=float) - self.center) / self.half
        inside = np.abs(u) <= 1
        val = -2 * (1 + np.cos(np.pi * u)) * np.sin(np.pi * u) * np.pi / (3 * self.half**2)
        return np.where(inside, val, 0.0)

    def shifted(self, s: float) -> "TimeWindow":
        """The window t -> theta(t - s)."""
        return TimeWindow(self.center + s, self.half)

    def to_dict(self) -> dict:
        return {"name": "cos2", "center": self.center, "half": self.half}


def quadrature(window: TimeWindow, n_intervals: int, derivative: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Uniform trapezoid nodes and weights over the window support (for theta or theta')."""
    if n_intervals < 4:
        raise ValueError("need at least 4 intervals")
    a, b = window.support
    t = np.linspace(a, b, n_intervals + 1)
    h = (b - a) / n_intervals
    w = (window.derivative(t) if derivative else window(t)) * h
    w[0] *= 0.5
    w[-1] *= 0.5
    return t, w


def intervals_for_rate(window: TimeWindow, max_rate: float, per_period: int = 20) -> int:
    """Smallest interval count with dt <= 2 pi / (per_period * max_rate)."""
    length = 2 * window.half
    if max_rate <= 0:
        return 8
    return max(8, math.ceil(length * per_period * max_rate / (2 * np.pi)))


@dataclass(frozen=True)
class EvolutionSpec:
    eps: float
    tau: float
    window: TimeWindow = field(default_factory=TimeWindow)
    per_period: int = 20

    def __post_init__(self):
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def speed(self) -> float:
        """eps^(2 - tau): the factor in front of t in every phase."""
        return self.eps ** (2.0 - self.tau)

    def samples(self, max_rate: float, refine: int = 1, derivative: bool = False) -> tuple[np.ndarray, np.ndarray]:
        n = intervals_for_rate(self.window, max_rate, self.per_period) * refine
        t, w = quadrature(self.window, n, derivative)
        if not derivative and abs(w.sum() - 1.0) > 1e-10:
            raise ArithmeticError("time quadrature weights do not integrate the window")
        return t, w

    def to_dict(self) -> dict:
        return {"eps": self.eps, "tau": self.tau, "window": self.window.to_dict()}


# ---------------------------------------------------------------- exact propagation


def phase_rates(F: FiberField, eps: float, tau: float) -> np.ndarray:
    """eps^(2-tau) |lam| (2|alpha| + d) / 2 per slice and row, shape (K, N)."""
    r = np.linalg.norm(F.lam, axis=1)
    return eps ** (2.0 - tau) * r[:, None] * (2 * F.frame.degree + F.frame.d)[None, :] / 2.0


def evolve(F: FiberField, t: float, eps: float, tau: float) -> FiberField:
    ph = np.exp(-1j * t * phase_rates(F, eps, tau))
    return F.with_mats(ph[:, :, None] * F.mats)


def euclidean_evolve(phi0: np.ndarray, t: float, eps: float, kappa: float, dv: float) -> np.ndarray:
    """Free propagator of i eps^kappa d/dt = -(eps^2/2) Delta on a periodic R^{2d} grid."""
    phi0 = np.asarray(phi0, dtype=complex)
    xi2 = np.zeros(phi0.shape)
    for ax, n in enumerate(phi0.shape):
        k = 2 * np.pi * np.fft.fftfreq(n, d=dv)
        shape = [1] * phi0.ndim
        shape[ax] = n
        xi2 = xi2 + (k**2).reshape(shape)
    mult = np.exp(-1j * eps ** (2.0 - kappa) * t * xi2 / 2.0)
    return np.fft.ifftn(np.fft.fftn(phi0) * mult)


# ---------------------------------------------------------------- mixed split-step


def _shear(f: np.ndarray, axis: int, other: int, coef: float, dv: float, coords: np.ndarray) -> np.ndarray:
    """g(v) = f(v + coef * v_other * e_axis) by an FFT phase along ``axis``."""
    n = f.shape[axis]
    k = 2 * np.pi * np.fft.fftfreq(n, d=dv)
    shape = [1] * f.ndim
    shape[axis] = n
    oshape = [1] * f.ndim
    oshape[other] = n
    phase = np.exp(1j * k.reshape(shape) * coef * coords.reshape(oshape))
    return np.fft.ifft(np.fft.fft(f, axis=axis) * phase, axis=axis)


def _rotate(f: np.ndarray, theta: float, d: int, dv: float, coords: np.ndarray) -> np.ndarray:
    """g(v) = f(exp(theta J) v) in every (p_j, q_j) plane, by three shears."""
    if theta == 0:
        return f
    a = math.tan(theta / 2)
    b = -math.sin(theta)
    for j in range(d):
        f = _shear(f, j, d + j, a, dv, coords)
        f = _shear(f, d + j, j, b, dv, coords)
        f = _shear(f, j, d + j, a, dv, coords)
    return f


def mixed_evolve(m: MixedState, t: float, eps: float, tau: float, group=None, max_substep: float | None = None) -> MixedState:
    """exp(i T Delta^lam) per central slice with T = eps^(2-tau) t / 2, where
    Delta^lam = Delta_v - i lam (J v).grad - lam^2 |v|^2 / 4 (Heisenberg groups).

    The rotation part commutes with the rest and is applied exactly; the
    harmonic part uses Strang splitting.  Works at lam = 0, unlike the fiber route.
    """
    g = m.grid
    group = group or default_group(g)
    from .htype import heisenberg

    if g.p != 1 or not np.array_equal(group.B, heisenberg(g.d).B):
        raise ValueError("mixed split-step implemented for Heisenberg groups in standard form")
    T = eps ** (2.0 - tau) * t / 2.0
    coords = g.v_axis()
    xi2 = np.zeros(g.v_shape)
    vv = np.zeros(g.v_shape)
    for ax in range(2 * g.d):
        shape = [1] * (2 * g.d)
        shape[ax] = g.n_v
        k = 2 * np.pi * np.fft.fftfreq(g.n_v, d=g.dv)
        xi2 = xi2 + (k**2).reshape(shape)
        vv = vv + (coords**2).reshape(shape)
    lam = m.lam[:, 0]
    out = np.empty_like(m.slices)
    for i, l in enumerate(lam):
        f = m.slices[i].reshape(g.v_shape)
        if T != 0:
            if l != 0:
                h_max = max_substep
                if h_max is None:
                    kmax = float(np.sqrt(xi2.max()))
                    h_max = 1e-2 / (abs(l) * kmax * max(math.sqrt(abs(T)), 1e-3))
                nsub = max(1, math.ceil(abs(T) / h_max))
                h = T / nsub
                half_pot = np.exp(-0.5j * h * l * l * vv / 4.0)
                kin = np.exp(-1j * h * xi2)
                for _ in range(nsub):
                    f = np.fft.ifftn(np.fft.fftn(half_pot * f) * kin) * half_pot
            else:
                f = np.fft.ifftn(np.fft.fftn(f) * np.exp(-1j * T * xi2))
            f = _rotate(f, T * l, g.d, g.dv, coords)
        out[i] = f.ravel()
    return MixedState(g, m.kidx.copy(), out)


# ---------------------------------------------------------------- modal engine


@dataclass
class Modes:
    """u(t)(v, z) = (2L)^-p sum_p U[p](v) exp(-i rate[p] t) exp(i lam[p].z)."""

    grid: GridSpec
    kidx: np.ndarray
    rate: np.ndarray
    U: np.ndarray
    band: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        return self.grid.lam_values(self.kidx)

    def __len__(self) -> int:
        return len(self.rate)


def occupied_modes(F: FiberField, tol: float = 0.0) -> list:
    """(slice index, band) pairs whose rows carry content."""
    out = []
    deg = F.frame.degree
    rows = np.sum(np.abs(F.mats) ** 2, axis=2)
    for i in range(len(F.kidx)):
        for n in np.unique(deg[rows[i] > tol]):
            out.append((i, int(n)))
    return out


def field_modes(F: FiberField, eps: float, tau: float, fiber_fn=None, c0=None, modes=None) -> Modes:
    """Modes of the state with transform F, optionally after a left multiplier M(lam) = fiber_fn(lam)."""
    modes = occupied_modes(F) if modes is None else modes
    if not modes:
        raise ValueError("the state has no occupied modes")
    deg = F.frame.degree
    idx = np.array([i for i, _ in modes])
    bands = np.array([n for _, n in modes])
    mats = np.empty((len(modes), F.frame.N, F.frame.N), dtype=complex)
    cache = {}
    for j, (i, n) in enumerate(modes):
        block = np.where((deg == n)[:, None], F.mats[i], 0.0)
        if fiber_fn is not None:
            if i not in cache:
                cache[i] = fiber_fn(F.lam[i])
            block = cache[i] @ block
        mats[j] = block
    sub = FiberField(F.grid, F.frame, F.kidx[idx], mats, F.group)
    U = inverse_slices(sub, c0=c0)
    r = np.linalg.norm(sub.lam, axis=1)
    rate = eps ** (2.0 - tau) * r * (2 * bands + F.frame.d) / 2.0
    return Modes(F.grid, sub.kidx, rate, U, bands)


def _zhat(grid: GridSpec, z_factor) -> np.ndarray | None:
    if z_factor is None:
        return None
    a = np.asarray(z_factor, dtype=complex).reshape(grid.z_shape)
    return np.fft.fftn(a) * grid.cell_z


def _central_factor(grid: GridSpec, zhat, kL: np.ndarray, kR: np.ndarray, shiftL: np.ndarray | None) -> np.ndarray:
    """sum_z a(z + w_p) exp(i (lam_p - lam_q).z) dz for all pairs, with w_p = shiftL[p]."""
    m = kR[None, :, :] - kL[:, None, :]  # (PL, PR, p)
    if zhat is None:
        return np.where(np.all(m == 0, axis=2), (2 * grid.z_extent) ** grid.p, 0.0).astype(complex)
    n = grid.n_z
    wrapped = m % n
    vals = zhat[tuple(np.moveaxis(wrapped, 2, 0))]
    sign = np.where(np.sum(m, axis=2) % 2 == 0, 1.0, -1.0)
    out = vals * sign
    if shiftL is not None and np.any(shiftL):
        kk = 2 * np.pi * np.fft.fftfreq(n, d=grid.dz)
        phase = np.zeros(m.shape[:2])
        for ax in range(grid.p):
            phase += kk[wrapped[:, :, ax]] * shiftL[:, None, ax]
        out = out * np.exp(1j * phase)
    return out


def pair_matrix(left: Modes, right: Modes, profile: Profile | None = None, shift: float = 0.0) -> np.ndarray:
    """G with (a u_L(t), u_R(t)) = sum_pq G_pq exp(-i (rate_L[p] - rate_R[q]) t).

    The profile is evaluated at (v, z + shift * lam_p/|lam_p|), lam_p the left mode frequency.
    """
    g = left.grid
    norm = (2 * g.z_extent) ** (-2 * g.p)
    URc = np.conj(right.U).T
    if profile is None:
        W = (left.U @ URc) * g.cell_v
        return norm * W * _central_factor(g, None, left.kidx, right.kidx, None)
    unit = None
    if shift:
        lam = left.lam
        unit = lam / np.linalg.norm(lam, axis=1, keepdims=True)
    G = np.zeros((len(left), len(right)), dtype=complex)
    for term in profile.terms:
        av = profile.v_values(term)
        W = ((left.U * av[None, :]) @ URc) * g.cell_v
        Z = _central_factor(g, _zhat(g, term.z_factor), left.kidx, right.kidx, shift * unit if shift else None)
        G += W * Z
    return norm * G


def trajectory(G: np.ndarray, left: Modes, right: Modes, times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    PL = np.exp(-1j * np.outer(times, left.rate))
    PR = np.exp(1j * np.outer(times, right.rate))
    return np.einsum("tq,tq->t", PL @ G, PR)


def max_rate(*mode_sets: Modes) -> float:
    return float(max(np.abs(m.rate).max() for m in mode_sets))


class ModalExpectation:
    """Expectations (Op_eps(sigma) psi(t), psi(t)) for a fixed initial transform F0."""

    def __init__(self, F0: FiberField, eps: float, tau: float, c0: float | None = None):
        self.F0 = F0
        self.eps = eps
        self.tau = tau
        self.c0 = calibrate_c0(F0.grid, F0.frame, F0.group) if c0 is None else c0
        self.modes = occupied_modes(F0)
        self.right = field_modes(F0, eps, tau, c0=self.c0, modes=self.modes)

    def norm_sq(self) -> float:
        return plancherel_norm_sq(self.F0, self.c0)

    def pair_terms(self, sym: Symbol) -> list:
        """[(G, left modes)] per symbol term."""
        out = []
        frame, group = self.F0.frame, self.F0.group
        for term in sym.terms:
            if term.profile.is_zero:
                continue
            left = field_modes(
                self.F0,
                self.eps,
                self.tau,
                fiber_fn=lambda l, term=term: sym.fiber_matrix(term, self.eps**2 * l, frame, group),
                c0=self.c0,
                modes=self.modes,
            )
            out.append((pair_matrix(left, self.right, term.profile, term.shift), left))
        return out

    def trajectory(self, sym: Symbol, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        acc = np.zeros(times.shape, dtype=complex)
        for G, left in self.pair_terms(sym):
            acc += trajectory(G, left, self.right, times)
        return acc

    def time_average(self, sym: Symbol, spec: EvolutionSpec, window: TimeWindow | None = None, derivative: bool = False) -> dict:
        """Trapezoid quadrature of theta(t) e(t) (or theta'(t) e(t)), with a doubled-grid convergence check."""
        window = window or spec.window
        pairs = self.pair_terms(sym)
        rate = max([max_rate(left, self.right) for _, left in pairs], default=0.0)
        spec_w = EvolutionSpec(spec.eps, spec.tau, window, spec.per_period)
        vals = []
        for refine in (1, 2):
            t, w = spec_w.samples(rate, refine, derivative)
            e = np.zeros(t.shape, dtype=complex)
            for G, left in pairs:
                e += trajectory(G, left, self.right, t)
            vals.append(complex(np.sum(w * e)))
            l1 = float(np.sum(np.abs(w * e)))
        change = abs(vals[1] - vals[0])
        scale = max(abs(vals[1]), 1e-8 * l1, 1e-300)
        return {
            "value": vals[1],
            "coarse": vals[0],
            "rel_change": change / scale,
            "converged": change <= 1e-4 * scale,
            "n_times": len(t),
        }


def time_averaged_expectation(sym: Symbol, spec: EvolutionSpec, F0: FiberField, c0=None) -> dict:
    return ModalExpectation(F0, spec.eps, spec.tau, c0).time_average(sym, spec)


def time_averaged_expectation_direct(sym: Symbol, spec: EvolutionSpec, F0: FiberField, n_intervals: int, c0=None) -> complex:
    """Reference route: rebuild psi(t) physically at every node and apply Op_eps (small grids only)."""
    from .gft import inverse_gft
    from .quantize import inner, op_eps_apply_field

    t, w = quadrature(spec.window, n_intervals)
    acc = 0.0 + 0.0j
    for ti, wi in zip(t, w):
        if wi == 0:
            continue
        Ft = evolve(F0, ti, spec.eps, spec.tau)
        acc += wi * inner(op_eps_apply_field(sym, spec.eps, Ft, c0), inverse_gft(Ft, c0))
    return acc


def energy_derivative_check(sym: Symbol, F0: FiberField, eps: float, tau: float, t: float, dt: float, c0=None) -> dict:
    """i eps^tau d/dt (Op psi, psi) by centred differences against ([Op, -(eps^2/2) Delta] psi, psi)."""
    from .gft import inverse_gft
    from .quantize import inner, op_eps_apply_field

    eng = ModalExpectation(F0, eps, tau, c0)
    e = eng.trajectory(sym, [t - dt, t + dt])
    lhs = 1j * eps**tau * (e[1] - e[0]) / (2 * dt)
    Ft = evolve(F0, t, eps, tau)
    r = np.linalg.norm(Ft.lam, axis=1)[:, None] * (2 * Ft.frame.degree + Ft.frame.d)[None, :]
    LF = Ft.with_mats(0.5 * eps**2 * r[:, :, None] * Ft.mats)
    psi = inverse_gft(Ft, eng.c0)
    Lpsi = inverse_gft(LF, eng.c0)
    rhs = inner(op_eps_apply_field(sym, eps, LF, eng.c0), psi) - inner(op_eps_apply_field(sym, eps, Ft, eng.c0), Lpsi)
    return {"lhs": lhs, "rhs": rhs, "abs": abs(lhs - rhs)}
