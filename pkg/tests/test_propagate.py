import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from htsemi.fiber import HermiteFrame
from htsemi.gft import (
    GridSpec,
    MixedState,
    calibrate_c0,
    inverse_gft,
    inverse_mixed,
    plancherel_norm_sq,
    random_band_limited,
    spectral_cutoff,
)
from htsemi.propagate import (
    EvolutionSpec,
    ModalExpectation,
    TimeWindow,
    energy_derivative_check,
    euclidean_evolve,
    evolve,
    intervals_for_rate,
    mixed_evolve,
    phase_rates,
    quadrature,
    time_averaged_expectation,
    time_averaged_expectation_direct,
)
from htsemi.htype import quaternionic
from htsemi.quantize import FieldRep, Identity, Profile, inner, op_eps_apply_field, symbol

SMALL = GridSpec(8.0, 8.0, 32, 16)
FRAME = HermiteFrame(1, 10)


@pytest.fixture(scope="module")
def field():
    c0 = calibrate_c0(SMALL, FRAME)
    return random_band_limited(SMALL, FRAME, np.random.default_rng(0), band=2), c0


def gauss_P(grid):
    return symbol(Profile.gaussian(grid, v_center=[0.3, -0.2], v_width=1.5, z_center=0.5, z_width=2.0), FieldRep("P"))


# ---------------------------------------------------------------- windows


@pytest.mark.parametrize("center,half", [(0.0, 1.0), (2.5, 0.4)])
def test_window_integrates_to_one(center, half):
    w = TimeWindow(center, half)
    val, _ = quad(lambda t: float(w(t)), *w.support)
    assert val == pytest.approx(1.0, abs=1e-12)
    assert w(center - half - 1e-9) == 0 and w(center + half + 1e-9) == 0


def test_window_derivative_matches_finite_difference():
    w = TimeWindow(0.3, 0.8)
    t = np.linspace(-0.4, 1.0, 17)
    h = 1e-6
    assert np.allclose(w.derivative(t), (w(t + h) - w(t - h)) / (2 * h), atol=1e-6)


def test_window_shift_and_validation():
    w = TimeWindow(0.0, 1.0).shifted(0.5)
    assert w.support == (-0.5, 1.5)
    with pytest.raises(ValueError):
        TimeWindow(0.0, 0.0)


def test_quadrature_weights():
    w = TimeWindow(0.0, 1.0)
    t, wt = quadrature(w, 40)
    assert len(t) == 41 and wt.sum() == pytest.approx(1.0, abs=1e-12)
    _, wd = quadrature(w, 40, derivative=True)
    assert abs(wd.sum()) <= 1e-14
    with pytest.raises(ValueError):
        quadrature(w, 2)


def test_intervals_for_rate():
    w = TimeWindow(0.0, 1.0)
    assert intervals_for_rate(w, 0.0) == 8
    n = intervals_for_rate(w, 100.0)
    assert 2.0 / n <= 2 * np.pi / (20 * 100.0)


def test_evolution_spec():
    s = EvolutionSpec(0.25, 1.0)
    assert s.speed == pytest.approx(0.25)
    assert EvolutionSpec(0.5, 2.0).speed == 1.0
    with pytest.raises(ValueError):
        EvolutionSpec(0.0, 2.0)
    with pytest.raises(ValueError):
        EvolutionSpec(0.5, 0.0)


# ---------------------------------------------------------------- spectral propagation


def test_phase_rates_values(field):
    F, _ = field
    r = phase_rates(F, 0.5, 1.0)
    lam = np.abs(F.lam[:, 0])
    assert np.allclose(r[:, 0], 0.5 * lam / 2)
    assert np.allclose(r[:, 2], 0.5 * lam * 5 / 2)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 1.0), st.floats(0.5, 3.0))
def test_unitarity(t, eps, tau):
    F = random_band_limited(SMALL, FRAME, np.random.default_rng(1), band=2)
    c0 = calibrate_c0(SMALL, FRAME)
    assert plancherel_norm_sq(evolve(F, t, eps, tau), c0) == pytest.approx(plancherel_norm_sq(F, c0), rel=1e-13)


def test_group_law(field):
    F, _ = field
    a = evolve(evolve(F, 0.4, 0.3, 1.5), -1.1, 0.3, 1.5)
    b = evolve(F, -0.7, 0.3, 1.5)
    assert np.allclose(a.mats, b.mats, atol=1e-13)
    assert np.array_equal(evolve(F, 0.0, 0.3, 1.5).mats, F.mats)


def test_single_band_phase(field):
    F, _ = field
    deg = FRAME.degree
    G = F.with_mats(np.where((deg == 1)[None, :, None], F.mats, 0))
    t, eps, tau = 0.9, 0.5, 2.0
    out = evolve(G, t, eps, tau)
    lam = np.abs(F.lam[:, 0])
    phase = np.exp(-1j * t * lam * 3 / 2)
    assert np.allclose(out.mats, phase[:, None, None] * G.mats)


def test_commutes_with_spectral_cutoffs(field):
    F, _ = field
    for kind, thr in (("low", 1.0), ("high", 2.0)):
        a = spectral_cutoff(evolve(F, 0.6, 0.5, 2.0), kind, thr, 0.5)
        b = evolve(spectral_cutoff(F, kind, thr, 0.5), 0.6, 0.5, 2.0)
        assert np.allclose(a.mats, b.mats)


def test_fiber_route_matches_split_step(field):
    # the split-step solver works on physical slices and shares no code with the fiber route
    F, c0 = field
    eps, tau, t = 0.5, 2.0, 0.7
    a = inverse_mixed(evolve(F, t, eps, tau), c0)
    b = mixed_evolve(inverse_mixed(F, c0), t, eps, tau)
    assert np.abs(a.slices - b.slices).max() <= 1e-5 * np.abs(a.slices).max()


def test_split_step_rejects_non_heisenberg():
    g = GridSpec(4.0, 4.0, 8, 8, d=2, p=3)
    m = MixedState(g, [[1, 0, 0]], np.zeros((1, g.n_pts)))
    with pytest.raises(ValueError):
        mixed_evolve(m, 0.1, 0.5, 2.0, group=quaternionic())


def test_euclidean_gaussian_spreading():
    # i eps^k d/dt phi = -(eps^2/2) phi'' from exp(-x^2/2): phi = (1 + i s)^{-1/2} exp(-x^2 / (2 (1 + i s))) per axis
    n, L = 256, 20.0
    dv = 2 * L / n
    x = -L + dv * np.arange(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    phi0 = np.exp(-(X**2 + Y**2) / 2)
    eps, kappa, t = 0.5, 1.0, 0.8
    s = eps ** (2 - kappa) * t
    out = euclidean_evolve(phi0, t, eps, kappa, dv)
    expect = np.exp(-(X**2 + Y**2) / (2 * (1 + 1j * s))) / (1 + 1j * s)
    assert np.abs(out - expect).max() <= 1e-12
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(phi0), rel=1e-13)


# ---------------------------------------------------------------- modal engine


def test_modal_trajectory_at_zero_is_expectation(field):
    F, c0 = field
    sym = gauss_P(SMALL)
    eng = ModalExpectation(F, 0.5, 2.0, c0)
    direct = inner(op_eps_apply_field(sym, 0.5, F, c0), inverse_gft(F, c0))
    assert eng.trajectory(sym, [0.0])[0] == pytest.approx(direct, rel=1e-12)
    assert eng.norm_sq() == pytest.approx(plancherel_norm_sq(F, c0))


def test_modal_trajectory_matches_rebuilt_state(field):
    F, c0 = field
    sym = gauss_P(SMALL)
    eps, tau = 0.5, 1.5
    eng = ModalExpectation(F, eps, tau, c0)
    for t in (0.3, -1.2):
        Ft = evolve(F, t, eps, tau)
        direct = inner(op_eps_apply_field(sym, eps, Ft, c0), inverse_gft(Ft, c0))
        assert eng.trajectory(sym, [t])[0] == pytest.approx(direct, rel=1e-11)


def test_modal_time_average_matches_direct(field):
    F, c0 = field
    sym = gauss_P(SMALL)
    spec = EvolutionSpec(0.5, 2.0, TimeWindow(0.0, 1.0))
    m = time_averaged_expectation(sym, spec, F, c0)
    assert m["converged"]
    d = time_averaged_expectation_direct(sym, spec, F, m["n_times"] - 1, c0)
    assert m["value"] == pytest.approx(d, rel=1e-12)


def test_energy_derivative(field):
    F, c0 = field
    r = energy_derivative_check(gauss_P(SMALL), F, 0.5, 2.0, 0.3, 1e-4, c0)
    assert r["abs"] <= 1e-7 * abs(r["rhs"])


def test_norm_is_conserved_along_trajectory(field):
    F, c0 = field
    eng = ModalExpectation(F, 0.5, 2.0, c0)
    traj = eng.trajectory(symbol(Profile.constant(SMALL), Identity()), np.linspace(-2, 2, 9))
    assert np.allclose(traj, eng.norm_sq(), rtol=1e-12)
