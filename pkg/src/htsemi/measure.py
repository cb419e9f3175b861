"""Measurements on semiclassical families: packet factories, time-averaged
pairings, transport and dispersion diagnostics, oscillation profiles and the
split of the energy density into its central and first-stratum parts.

Packets concentrate at a central frequency lam0/eps^2 in one Hermite band,
so every trajectory quantity is evaluated with the modal engine of
``propagate`` and never on a full physical grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fiber as fb
from .gft import (
    FiberField,
    GridSpec,
    MixedState,
    PhysicalState,
    calibrate_c0,
    default_group,
    inverse_gft,
    plancherel_norm_sq,
    resolvable_band,
    spectral_cutoff,
    to_mixed,
)
from .htype import GroupPoint, GroupStructure
from .propagate import EvolutionSpec, ModalExpectation, Modes, TimeWindow, pair_matrix, quadrature
from .quantize import (
    BandMask,
    Profile,
    Scaled,
    Symbol,
    SymbolTerm,
    derivative_symbol,
    flow_phi,
    psi_cutoff,
    sigma1_construct,
)

ENVELOPE_CUT = 6.5  # exp(-6.5^2) ~ 5e-19: Gaussian envelope spectra are negligible beyond this many widths

# ---------------------------------------------------------------- packets


@dataclass(frozen=True)
class WavePacketSpec:
    """Data concentrated at (x0, lam0/eps^2) in the given bands.

    ``bands`` holds (n, amplitude) pairs; the z-envelope is
    g(z) = (2 pi w^2)^(-1/4) exp(-z^2 / (4 w^2)), so |g|^2 has standard deviation w.
    """

    x0: GroupPoint
    lam0: float
    eps: float
    bands: tuple = ((0, 1.0),)
    w_z: float = 0.5

    def __post_init__(self):
        if self.lam0 == 0:
            raise ValueError("lam0 must be nonzero")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if not self.w_z > 0:
            raise ValueError("envelope width must be positive")

    @property
    def n_max(self) -> int:
        return max(n for n, _ in self.bands)

    def envelope(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (2 * np.pi * self.w_z**2) ** -0.25 * np.exp(-(z**2) / (4 * self.w_z**2))

    def envelope_hat(self, mu) -> np.ndarray:
        return np.exp(-(self.w_z**2) * np.asarray(mu, dtype=float) ** 2)

    def to_dict(self) -> dict:
        return {
            "x0": {"v": self.x0.v.tolist(), "z": self.x0.z.tolist()},
            "lam0": self.lam0,
            "eps": self.eps,
            "bands": [list(b) for b in self.bands],
            "w_z": self.w_z,
        }


def _pow2(n: float, lo: int = 8) -> int:
    return max(lo, 1 << max(0, math.ceil(math.log2(max(n, 1)))))


def packet_grid(spec: WavePacketSpec, z_extent: float = 16.0, extra_bands: int = 2) -> tuple[GridSpec, float]:
    """A Heisenberg (d = 1) grid whose lambda-lattice holds lam0/eps^2 and whose
    v-grid resolves the occupied bands there; returns (grid, snapped eps)."""
    dlam = np.pi / z_extent
    target = abs(spec.lam0) / spec.eps**2
    k0 = max(1, round(target / dlam))
    eps = math.sqrt(abs(spec.lam0) / (k0 * dlam))
    if abs(eps / spec.eps - 1) > 0.01:
        raise ValueError(f"eps={spec.eps} cannot be snapped within 1% on this lambda lattice; max admissible eps is {math.sqrt(abs(spec.lam0) / dlam):.4g}")
    halfw = ENVELOPE_CUT / spec.w_z
    lam_lo, lam_hi = k0 * dlam - halfw, k0 * dlam + halfw
    if lam_lo <= 0:
        raise ValueError(f"envelope reaches lambda = 0; eps must be below {math.sqrt(abs(spec.lam0) / (halfw + dlam)):.4g}")
    nb = spec.n_max + extra_bands
    v_extent = 1.05 * math.sqrt((64.0 + 16.0 * nb) / lam_lo)
    dv = np.pi / math.sqrt(lam_hi * (20.0 + 2.0 * nb)) / 1.05
    n_v = _pow2(2 * v_extent / dv, 32)
    n_z = _pow2(2 * (k0 + halfw / dlam + 2), 64)
    grid = GridSpec(v_extent, z_extent, n_v, n_z)
    return grid, eps


def packet_field(spec: WavePacketSpec, grid: GridSpec, frame: fb.HermiteFrame, group: GroupStructure | None = None, c0=None) -> FiberField:
    """Transform of the packet: ghat(lam - lam_c) (pi_x0)^* sum_n c_n |h_n><e_0|, unit norm."""
    group = group or default_group(grid)
    if grid.p != 1:
        raise ValueError("packet factory supports one central dimension")
    dlam = grid.dlam
    sgn = 1 if spec.lam0 > 0 else -1
    k0 = round(abs(spec.lam0) / spec.eps**2 / dlam)
    halfw = ENVELOPE_CUT / spec.w_z
    span = int(math.ceil(halfw / dlam))
    ks = np.arange(k0 - span, k0 + span + 1)
    ks = ks[ks > 0]
    if ks.max() >= grid.n_z // 2:
        raise ValueError("lambda lattice of the grid cannot hold the packet; refine n_z")
    lam_abs = ks * dlam
    nb = resolvable_band(grid, lam_abs)
    if nb.min() < spec.n_max:
        raise ValueError(f"v-grid resolves only band {int(nb.min())} at |lam|={lam_abs[np.argmin(nb)]:.3g}")
    col = np.zeros(frame.N, dtype=complex)
    for n, c in spec.bands:
        if n > frame.A:
            raise ValueError("band above the Hermite cutoff")
        col[np.flatnonzero(frame.degree == n)[0]] += c
    kidx = (sgn * ks)[:, None]
    lam = grid.lam_values(kidx)[:, 0]
    weights = spec.envelope_hat(lam_abs - k0 * dlam) * np.exp(-1j * lam * spec.x0.z[0])
    v0 = spec.x0.v
    mats = np.zeros((len(ks), frame.N, frame.N), dtype=complex)
    for i, l in enumerate(lam):
        vec = col
        if np.any(v0):
            M = fb.matrix_coefficient(np.array([l]), frame, v0[: grid.d], v0[grid.d :])
            vec = np.conj(M.T) @ col
            if abs(np.linalg.norm(vec) - np.linalg.norm(col)) > 1e-8 * np.linalg.norm(col):
                raise ValueError("displaced packet leaks past the Hermite cutoff; use v0 = 0 or a larger A")
        mats[i, :, 0] = weights[i] * vec
    F = FiberField(grid, frame, kidx, mats, group)
    c0 = calibrate_c0(grid, frame, group) if c0 is None else c0
    return F.with_mats(F.mats / math.sqrt(plancherel_norm_sq(F, c0)))


def synthesize_packet(spec: WavePacketSpec, grid: GridSpec, frame: fb.HermiteFrame, group=None, c0=None) -> PhysicalState:
    """Physical samples of the packet (only sensible on moderate grids)."""
    F = packet_field(spec, grid, frame, group, c0)
    return inverse_gft(F, c0)


def synthesize_euclidean_packet(
    grid: GridSpec, x0: GroupPoint, omega0, eps: float, w_v: float = 0.5, w_z: float = 2.0
) -> PhysicalState:
    """eta(x) exp(i omega0.v / eps) with a Gaussian eta centred at x0, unit L^2 norm."""
    omega0 = np.asarray(omega0, dtype=float).reshape(2 * grid.d)
    kmax = float(np.max(np.abs(omega0))) / eps + 8.0 / w_v
    if kmax > np.pi / grid.dv:
        raise ValueError(f"omega0/eps exceeds the v-grid Nyquist range ({kmax:.3g} > {np.pi / grid.dv:.3g})")
    v = grid.v_points() - x0.v
    z = grid.z_points() - x0.z
    ev = np.exp(-np.sum(v**2, axis=1) / (4 * w_v**2) + 1j * (grid.v_points() @ omega0) / eps)
    ez = np.exp(-np.sum(z**2, axis=1) / (4 * w_z**2))
    vals = np.outer(ev, ez)
    vals /= math.sqrt(np.sum(np.abs(vals) ** 2) * grid.cell_v * grid.cell_z)
    return PhysicalState(grid, vals.reshape(grid.shape))


# ---------------------------------------------------------------- fits


def fit_slope(eps, values) -> tuple[float, float]:
    """Least-squares slope and r^2 of log|value| against log eps."""
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.abs(np.asarray(values, dtype=complex)))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    return float(coef[0]), r2


# ---------------------------------------------------------------- central marginals


def _diff_index(modes: Modes) -> tuple[np.ndarray, np.ndarray]:
    """Unique central index differences m = k_p - k_q and the inverse map (P, P)."""
    k = modes.kidx[:, 0]
    m = k[:, None] - k[None, :]
    uniq, inv = np.unique(m, return_inverse=True)
    return uniq, inv.reshape(m.shape)


def _slab_sum(grid: GridSpec, mu: np.ndarray, z0: float, h: np.ndarray) -> np.ndarray:
    """sum over grid z_j with |z_j - z0| <= h of exp(i mu z_j) dz, for mu (M,) and h (V,) -> (M, V).

    Closed-form geometric sums; z0 is not wrapped, so the slab must stay inside the box.
    """
    z_first = -grid.z_extent
    dz = grid.dz
    j0 = np.ceil((z0 - h - z_first) / dz - 1e-12).astype(np.int64).clip(0, grid.n_z)
    j1 = np.floor((z0 + h - z_first) / dz + 1e-12).astype(np.int64).clip(-1, grid.n_z - 1)
    count = np.maximum(j1 - j0 + 1, 0)
    q = np.exp(1j * mu * dz)[:, None]
    start = np.exp(1j * mu[:, None] * (z_first + j0[None, :] * dz))
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = np.where(np.abs(q - 1) < 1e-14, count[None, :], (1 - q ** count[None, :]) / (1 - q))
    return start * geo * dz


def _gram_by_difference(modes: Modes, kernel: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """G_pq = (2L)^-2 sum_v U_p conj(U_q) kernel[m(p, q), v] dv; a 1-d kernel does not depend on v."""
    g = modes.grid
    U = modes.U
    Uc = np.conj(U)
    if kernel.ndim == 1:
        G = (U @ Uc.T) * kernel[inv]
    else:
        G = np.zeros((len(modes), len(modes)), dtype=complex)
        for mi in range(kernel.shape[0]):
            ps, qs = np.nonzero(inv == mi)
            if len(ps):
                G[ps, qs] = np.sum(U[ps] * Uc[qs] * kernel[mi][None, :], axis=1)
    return G * g.cell_v / (2 * g.z_extent) ** 2


def _evaluate(G: np.ndarray, modes: Modes, times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    ph = np.exp(-1j * np.outer(times, modes.rate))
    return np.real(np.einsum("tp,pq,tq->t", ph, G, np.conj(ph), optimize=False))


@dataclass
class CentralMarginal:
    """Mass, first z-moment and out-of-box tail of |psi(t)|^2 from modes (p = 1)."""

    modes: Modes
    mass: np.ndarray = field(init=False)
    moment: np.ndarray = field(init=False)
    inner: np.ndarray = field(init=False)

    def __post_init__(self):
        g = self.modes.grid
        if g.p != 1:
            raise ValueError("central marginals implemented for p = 1")
        uniq, inv = _diff_index(self.modes)
        mu = uniq * g.dlam
        z = g.z_axis()
        E = np.exp(1j * np.outer(mu, z)) * g.dz
        k0 = E.sum(axis=1)
        k1 = E @ z
        kin = _slab_sum(g, mu, 0.0, np.array([g.z_extent / 2]))[:, 0]
        self.mass = _gram_by_difference(self.modes, k0, inv)
        self.moment = _gram_by_difference(self.modes, k1, inv)
        self.inner = _gram_by_difference(self.modes, kin, inv)

    def centroid(self, times) -> tuple[np.ndarray, np.ndarray]:
        """(z-centroid, tail mass outside |z| < L/2) per time."""
        m = _evaluate(self.mass, self.modes, times)
        c = _evaluate(self.moment, self.modes, times) / m
        tail = 1.0 - _evaluate(self.inner, self.modes, times) / m
        return c, tail


def centroid_track(modes: Modes, times, tail_tol: float = 1e-3) -> dict:
    """z-centroid per time and a linear drift fit; aborts if the density wraps around the box."""
    times = np.asarray(times, dtype=float)
    c, tail = CentralMarginal(modes).centroid(times)
    if np.max(tail) > tail_tol:
        raise RuntimeError(f"density reaches the box edge (tail {np.max(tail):.2e}); enlarge z_extent")
    slope, icpt = np.polyfit(times, c, 1)
    return {"times": times, "centroid": c, "tail": tail, "velocity": float(slope), "offset": float(icpt)}


def v_centroid(m: MixedState) -> np.ndarray:
    """First-stratum centroid of |psi|^2 from a mixed state (all central slices present)."""
    g = m.grid
    w = np.sum(np.abs(m.slices) ** 2, axis=0)
    pts = g.v_points()
    return (w @ pts) / w.sum()


def v_marginal(m: MixedState) -> np.ndarray:
    g = m.grid
    return np.sum(np.abs(m.slices) ** 2, axis=0) * g.cell_v / (2 * g.z_extent) ** g.p


def ball_mass_matrix(modes: Modes, x0: GroupPoint, radius: float) -> np.ndarray:
    """Pair matrix of the mass in the quasi-norm ball {|v - v0|^4 + |z - z0 - (1/2)[v0, v]|^2 <= r^4}, v0 = 0."""
    g = modes.grid
    if g.p != 1:
        raise ValueError("ball mass implemented for p = 1")
    if np.any(x0.v):
        raise ValueError("ball centres with v0 != 0 are not supported")
    if abs(x0.z[0]) + radius**2 > g.z_extent:
        raise ValueError("ball must lie inside the grid box")
    vv = np.sum(g.v_points() ** 2, axis=1)
    h = np.sqrt(np.clip(radius**4 - vv**2, 0.0, None))
    h = np.where(vv**2 <= radius**4, h, -1.0)
    uniq, inv = _diff_index(modes)
    kernel = _slab_sum(g, uniq * g.dlam, float(x0.z[0]), h)
    kernel[:, h < 0] = 0.0
    return _gram_by_difference(modes, kernel, inv)


def dispersion_mass(modes: Modes, x0: GroupPoint, radius: float, times) -> np.ndarray:
    return _evaluate(ball_mass_matrix(modes, x0, radius), modes, times)


def averaged_ball_mass(modes: Modes, x0: GroupPoint, radius: float, window: TimeWindow, per_period: int = 20) -> dict:
    G = ball_mass_matrix(modes, x0, radius)
    rate = float(np.ptp(modes.rate)) if len(modes) > 1 else 0.0
    vals = []
    for refine in (1, 2):
        n = max(64, math.ceil(2 * window.half * per_period * rate / (2 * np.pi))) * refine
        t, w = quadrature(window, n)
        vals.append(float(np.sum(w * _evaluate(G, modes, t))))
    return {"value": vals[1], "coarse": vals[0], "rel_change": abs(vals[1] - vals[0]) / max(abs(vals[1]), 1e-300)}


# ---------------------------------------------------------------- transport and pairing residuals


def egorov_residual(
    sym_d: Symbol, spec: EvolutionSpec, F0: FiberField, s: float, window_shift: str = "consistent", c0=None
) -> dict:
    """|ell(theta, sigma) - ell(theta', Phi^{-s} sigma)| with theta' a shifted window at tau = 2.

    ``window_shift="consistent"`` uses theta(t - s), which matches transport at speed
    (2n+d)/2 for the propagator of ``propagate``; ``"plus"`` uses theta(t + s).
    For tau != 2 the window is not shifted.
    """
    if window_shift not in ("consistent", "plus"):
        raise ValueError("window_shift must be 'consistent' or 'plus'")
    eng = ModalExpectation(F0, spec.eps, spec.tau, c0)
    lhs = eng.time_average(sym_d, spec)
    flowed = flow_phi(sym_d, -s)
    if spec.tau == 2:
        w = spec.window.shifted(s if window_shift == "consistent" else -s)
    else:
        w = spec.window
    rhs = eng.time_average(flowed, spec, w)
    return {
        "lhs": lhs["value"],
        "rhs": rhs["value"],
        "residual": abs(lhs["value"] - rhs["value"]),
        "converged": lhs["converged"] and rhs["converged"],
    }


def antidiagonal_decay(sym_a: Symbol, eps_list, tau: float, field_for_eps, window: TimeWindow | None = None, c0_for=None) -> dict:
    """Time-averaged anti-diagonal pairings over an eps sweep and their log-log slope.

    ``field_for_eps(eps)`` returns (FiberField, snapped eps).
    """
    window = window or TimeWindow()
    rows = []
    for eps in eps_list:
        F, e = field_for_eps(eps)
        spec = EvolutionSpec(e, tau, window)
        res = ModalExpectation(F, e, tau).time_average(sym_a, spec)
        rows.append((e, res["value"], res["converged"]))
    vals = np.array([r[1] for r in rows])
    if np.all(np.abs(vals) < 1e-300):
        raise ArithmeticError("degenerate observable: every pairing vanishes")
    slope, r2 = fit_slope([r[0] for r in rows], vals)
    return {"eps": [r[0] for r in rows], "values": vals, "converged": [r[2] for r in rows], "slope": slope, "r2": r2}


def central_derivative_symbol(sym: Symbol, n: int, d: int) -> Symbol:
    """i (2n+d)/(2|lam|) Z^(lam) Pi_n sigma Pi_n as a symbol: profile derivative along lam/|lam|."""
    terms = []
    p = sym.terms[0].profile.grid.p
    for t in sym.terms:
        for k in range(p):
            prof = t.profile.central_derivative(k).scale(1j * (2 * n + d) / 2.0)
            fib = Scaled(BandMask(t.fiber, (n, n), n), lambda l, k=k: l[k] / np.linalg.norm(l))
            terms.append(SymbolTerm(prof, fib, t.shift, (n, n)))
    return Symbol(terms, sym.lam_support, None)


def j_eps_diagnostic(sym: Symbol, spec: EvolutionSpec, F0: FiberField, bands, group=None, c0=None) -> dict:
    """2 ell(V.pi(V) sigma_1) + (1/2) ell(Delta sigma) against sum_n ell(i (2n+d)/(2|lam|) Z Pi_n sigma Pi_n)."""
    group = group or F0.group
    eng = ModalExpectation(F0, spec.eps, spec.tau, c0)
    s1 = sigma1_construct(sym, group)
    lhs = 2 * eng.time_average(derivative_symbol(s1, group, "vpiv"), spec)["value"]
    lhs += 0.5 * eng.time_average(derivative_symbol(sym, group, "laplace"), spec)["value"]
    rhs = 0.0 + 0.0j
    for n in bands:
        rhs += eng.time_average(central_derivative_symbol(sym, n, F0.frame.d), spec)["value"]
    return {"lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs)}


def stationarity(sym: Symbol, spec: EvolutionSpec, F0: FiberField, c0=None) -> complex:
    """ell(theta', sigma): the pairing against the window derivative."""
    eng = ModalExpectation(F0, spec.eps, spec.tau, c0)
    return eng.time_average(sym, spec, derivative=True)["value"]


# ---------------------------------------------------------------- oscillation and marginals


@dataclass
class OscillationProfile:
    R: list
    high: list
    delta: list
    low: list
    norm_sq: float

    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.high) <= 1e-15) and np.all(np.diff(self.low) >= -1e-15))


def oscillation_profile(F: FiberField, eps: float, R_list, delta_list, c0=None) -> OscillationProfile:
    """Masses of 1_{-eps^2 Delta > R} psi and 1_{-eps^2 Delta < delta} psi."""
    R_list = sorted(float(r) for r in R_list)
    delta_list = sorted(float(d) for d in delta_list)
    if not R_list or not delta_list or min(R_list + delta_list) <= 0:
        raise ValueError("thresholds must be positive and nonempty")
    c0 = calibrate_c0(F.grid, F.frame, F.group) if c0 is None else c0
    hi = [plancherel_norm_sq(spectral_cutoff(F, "high", r, eps), c0) for r in R_list]
    lo = [plancherel_norm_sq(spectral_cutoff(F, "low", d, eps), c0) for d in delta_list]
    prof = OscillationProfile(R_list, hi, delta_list, lo, plancherel_norm_sq(F, c0))
    if not prof.monotone():
        raise ArithmeticError("tail masses are not monotone in the thresholds")
    return prof


def central_mass_fraction(f: PhysicalState, eps: float, threshold: float) -> float:
    """Share of |psi|^2 carried by central frequencies with eps^2 |lam| >= threshold."""
    m = to_mixed(f)
    r = np.linalg.norm(m.lam, axis=1)
    w = np.sum(np.abs(m.slices) ** 2, axis=1)
    return float(w[eps**2 * r >= threshold].sum() / w.sum())


def marginal_split(m: MixedState, eps: float, profile: Profile, delta: float, v_cut) -> dict:
    """(a chi(eps^2|D_z|) psi, psi) and (a (1 - chi) c(eps D_v) psi, psi) from a mixed state.

    chi = psi_cutoff(s / delta) vanishes for s <= delta/2 and is 1 for s >= delta;
    ``v_cut(omega)`` is the first-stratum multiplier c.
    """
    g = m.grid
    r = np.linalg.norm(m.lam, axis=1)
    chi = psi_cutoff(eps**2 * r / delta)
    shape = (len(m.kidx),) + g.v_shape
    spec = np.fft.fftn(m.slices.reshape(shape), axes=tuple(range(1, 1 + 2 * g.d)))
    omega = np.zeros(g.v_shape + (2 * g.d,))
    k = 2 * np.pi * np.fft.fftfreq(g.n_v, d=g.dv)
    for ax in range(2 * g.d):
        sh = [1] * (2 * g.d)
        sh[ax] = g.n_v
        omega[..., ax] = np.broadcast_to(k.reshape(sh), g.v_shape)
    c = np.asarray(v_cut(eps * omega), dtype=complex)
    filtered = np.fft.ifftn(spec * c[None], axes=tuple(range(1, 1 + 2 * g.d))).reshape(len(m.kidx), -1)
    zero = np.zeros(len(m.kidx))
    right = Modes(g, m.kidx, zero, m.slices, zero.astype(int))
    left_z = Modes(g, m.kidx, zero, chi[:, None] * m.slices, zero.astype(int))
    left_v = Modes(g, m.kidx, zero, (1 - chi)[:, None] * filtered, zero.astype(int))
    # pair matrices include the (2L)^-2p normalisation of the mode expansion; mixed
    # slices here carry the plain central FFT normalisation, which matches it
    z_part = complex(np.sum(pair_matrix(left_z, right, profile)))
    v_part = complex(np.sum(pair_matrix(left_v, right, profile)))
    total = complex(np.sum(pair_matrix(right, right, profile)))
    return {"z_part": z_part, "v_part": v_part, "total": total, "deficit": abs(total - z_part - v_part) / max(abs(total), 1e-300)}
