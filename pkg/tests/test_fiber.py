import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_hermite, factorial, roots_hermite

from htsemi.fiber import (
    FiberOperator,
    HermiteFrame,
    assembled_hamiltonian,
    band_T_identity_check,
    bracket_identity_check,
    central_field_rep,
    displacement_coefficient,
    hamiltonian,
    hermite_eval,
    hermite_table,
    ladder,
    matrix_coefficient,
    projector,
    projector_contour,
    spectral_function,
    unitarity_residual,
    vector_field_rep,
)
from htsemi.htype import GroupPoint, heisenberg, multiply


def hermite_closed_form(n, x):
    return eval_hermite(n, x) * np.exp(-x * x / 2) / np.sqrt(2.0**n * factorial(n) * np.sqrt(np.pi))


# ---------------------------------------------------------------- frame


def test_frame_ordering():
    fr = HermiteFrame(2, 2)
    assert fr.N == 6
    assert [tuple(a) for a in fr.index] == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert fr.band_mask(1).sum() == 2
    with pytest.raises(ValueError):
        HermiteFrame(0, 3)


# ---------------------------------------------------------------- Hermite functions


@pytest.mark.parametrize("n", [0, 1, 2, 5, 10, 20, 40])
def test_hermite_matches_closed_form(n):
    x = np.linspace(-6, 6, 101)
    assert np.allclose(hermite_eval(n, x), hermite_closed_form(n, x), atol=1e-12)


def test_hermite_orthonormal_gauss_hermite():
    nodes, w = roots_hermite(128)
    H = hermite_table(60, nodes) * np.exp(nodes**2 / 2)
    G = (H * w) @ H.T
    assert np.max(np.abs(G - np.eye(61))) <= 1e-12


def test_hermite_range():
    with pytest.raises(ValueError):
        hermite_eval(-1, 0.0)
    with pytest.raises(ValueError):
        hermite_eval(201, 0.0)


# ---------------------------------------------------------------- basic operators


def test_hamiltonian_diagonal():
    fr = HermiteFrame(1, 5)
    H = hamiltonian([2.0], fr)
    assert np.allclose(np.diag(H.mat).real, 2.0 * (2 * np.arange(6) + 1))
    H2 = hamiltonian([0.6, 0.8, 0.0], HermiteFrame(2, 3))
    assert np.allclose(np.diag(H2.mat).real[:3], [2, 4, 4])


def test_zero_lambda_rejected():
    with pytest.raises(ValueError):
        hamiltonian([0.0], HermiteFrame(1, 3))


@pytest.mark.parametrize("lam", [[1.0], [-2.5], [0.3]])
def test_assembled_hamiltonian_interior(lam):
    fr = HermiteFrame(1, 12)
    H = hamiltonian(lam, fr).mat
    Ha = assembled_hamiltonian(lam, fr).mat
    keep = fr.interior()
    assert np.max(np.abs((Ha - H)[np.ix_(keep, keep)])) <= 1e-10
    # the truncation corrupts the top band
    assert np.max(np.abs(Ha - H)) > 1e-3


def test_assembled_hamiltonian_d2():
    fr = HermiteFrame(2, 8)
    lam = [0.4, -1.1, 0.2]
    keep = fr.interior()
    diff = assembled_hamiltonian(lam, fr).mat - hamiltonian(lam, fr).mat
    assert np.max(np.abs(diff[np.ix_(keep, keep)])) <= 1e-10


def test_ladder_entries():
    fr = HermiteFrame(1, 4)
    lo = ladder([1.0], fr, 0, "lower").mat
    hi = ladder([1.0], fr, 0, "raise").mat
    assert np.isclose(lo[0, 1], np.sqrt(0.5)) and np.isclose(lo[2, 3], np.sqrt(1.5))
    assert np.isclose(hi[1, 0], -np.sqrt(0.5)) and np.isclose(hi[4, 3], -np.sqrt(2.0))
    # sqrt|lam| scaling
    assert np.allclose(ladder([4.0], fr, 0, "lower").mat, 2 * lo)
    with pytest.raises(ValueError):
        ladder([1.0], fr, 0, "sideways")
    with pytest.raises(IndexError):
        ladder([1.0], fr, 1, "lower")


@pytest.mark.parametrize("lam", [[1.0], [-0.7]])
def test_ladder_product_identity(lam):
    # R Rbar is diagonal with entries -|lam|(n + 1)/2 below the top band
    fr = HermiteFrame(1, 10)
    lo = ladder(lam, fr, 0, "lower").mat
    hi = ladder(lam, fr, 0, "raise").mat
    nrm = abs(lam[0])
    keep = fr.interior(1)
    expect = -nrm * (np.arange(11) + 1) / 2
    assert np.allclose(np.diag(lo @ hi)[keep], expect[keep])


def test_ladder_shifts_band():
    fr = HermiteFrame(2, 6)
    lo = ladder([1.0], fr, 1, "lower").mat
    for n in range(1, 6):
        out = lo[:, fr.band_mask(n)]
        assert np.all(out[~fr.band_mask(n - 1)] == 0)


@pytest.mark.parametrize("lam", [[1.0], [-1.3], [0.5, 0.5, -0.2]])
def test_canonical_commutator(lam):
    d = 1 if len(lam) == 1 else 2
    fr = HermiteFrame(d, 10)
    keep = fr.interior(1)
    for j in range(d):
        P = vector_field_rep(lam, fr, "P", j).mat
        Q = vector_field_rep(lam, fr, "Q", j).mat
        C = P @ Q - Q @ P
        expect = 1j * np.linalg.norm(lam) * np.eye(fr.N)
        assert np.max(np.abs((C - expect)[np.ix_(keep, keep)])) <= 1e-12


def test_field_reps_skew_and_central():
    fr = HermiteFrame(1, 6)
    for which in ("P", "Q"):
        M = vector_field_rep([1.2], fr, which).mat
        assert np.allclose(M, -M.conj().T)
    Z = vector_field_rep([1.2, -0.5], HermiteFrame(2, 3), "Z", 1).mat
    assert np.allclose(Z, -0.5j * np.eye(10))
    assert np.allclose(central_field_rep([3.0, 4.0], HermiteFrame(2, 2)).mat, 25j * np.eye(6))
    with pytest.raises(ValueError):
        vector_field_rep([1.0], fr, "W")


# ---------------------------------------------------------------- projectors


def test_projector_properties():
    fr = HermiteFrame(2, 6)
    total = np.zeros((fr.N, fr.N), dtype=complex)
    for n in range(7):
        P = projector(n, [1.0], fr).mat
        assert np.allclose(P @ P, P) and np.allclose(P, P.conj().T)
        assert int(round(np.trace(P).real)) == n + 1
        total += P
    assert np.allclose(total, np.eye(fr.N))
    with pytest.raises(ValueError):
        projector(7, [1.0], fr)


@pytest.mark.parametrize("radius", [0.5, 1.0])
def test_projector_contour_accurate(radius):
    fr = HermiteFrame(1, 10)
    for n in (0, 3, 8):
        diff = projector_contour(n, [1.0], fr, radius=radius).mat - projector(n, [1.0], fr).mat
        assert np.max(np.abs(diff)) <= 1e-8


@pytest.mark.parametrize("radius,nodes", [(1.9, 64), (1.5, 32), (1.2, 16)])
def test_projector_contour_error_matches_trapezoid_formula(radius, nodes):
    # neighbours at distance 2 from the centre: the periodic trapezoid error is r^m / (1 - r^m), r = radius / 2
    fr = HermiteFrame(1, 10)
    diff = projector_contour(4, [1.0], fr, quad_nodes=nodes, radius=radius).mat - projector(4, [1.0], fr).mat
    r = (radius / 2) ** nodes
    assert np.isclose(np.max(np.abs(diff)), r / (1 - r), rtol=1e-6)


def test_projector_contour_arguments():
    fr = HermiteFrame(1, 4)
    with pytest.raises(ValueError):
        projector_contour(0, [1.0], fr, radius=2.5)
    with pytest.raises(ValueError):
        projector_contour(0, [1.0], fr, quad_nodes=8)


def test_spectral_function():
    fr = HermiteFrame(1, 5)
    E = spectral_function(lambda e: e, [0.5], fr).mat
    assert np.allclose(E, hamiltonian([0.5], fr).mat)
    with pytest.raises(ValueError), np.errstate(divide="ignore"):
        spectral_function(lambda e: 1 / (e - 1.5), [0.5], fr)


# ---------------------------------------------------------------- matrix coefficients


def test_matrix_coefficient_origin_is_identity():
    fr = HermiteFrame(2, 6)
    M = matrix_coefficient([1.0], fr, [0, 0], [0, 0])
    assert np.allclose(M, np.eye(fr.N), atol=1e-13)


def test_matrix_coefficient_ground_state():
    # <pi_x h_0, h_0> = exp(-|lam|(p^2 + q^2)/4) for the unit Gaussian
    fr = HermiteFrame(1, 4)
    for lam, p, q in [(1.0, 0.7, 0.0), (2.0, 0.3, -0.4), (-0.5, 1.0, 1.0)]:
        M = matrix_coefficient([lam], fr, [p], [q])
        assert np.isclose(abs(M[0, 0]), np.exp(-abs(lam) * (p * p + q * q) / 4), atol=1e-13)


def test_matrix_coefficient_central_phase():
    fr = HermiteFrame(1, 3)
    base = matrix_coefficient([1.5], fr, [0.2], [0.1])
    with_z = matrix_coefficient([1.5], fr, [0.2], [0.1], z=[0.4])
    assert np.allclose(with_z, base * np.exp(1j * 1.5 * 0.4))


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-2.0, 2.0).filter(lambda x: abs(x) > 0.05),
    st.floats(-1.5, 1.5),
    st.floats(-1.5, 1.5),
)
def test_quadrature_matches_displacement_recurrence(lam, p, q):
    fr = HermiteFrame(1, 16)
    A = matrix_coefficient([lam], fr, [p], [q])
    B = displacement_coefficient([lam], fr, [p], [q])
    assert np.max(np.abs(A - B)) <= 1e-10


def test_quadrature_matches_displacement_d2():
    fr = HermiteFrame(2, 8)
    A = matrix_coefficient([0.8, 0.1, 0.3], fr, [0.3, -0.5], [0.2, 0.9], z=[0.1, 0.0, 0.2])
    B = displacement_coefficient([0.8, 0.1, 0.3], fr, [0.3, -0.5], [0.2, 0.9], z=[0.1, 0.0, 0.2])
    assert np.max(np.abs(A - B)) <= 1e-10


def test_unitarity_with_extended_rows():
    fr = HermiteFrame(1, 20)
    assert unitarity_residual([1.0], fr, [1.0], [0.5], extra_rows=80) <= 1e-10
    # without extra rows the truncated block leaks norm
    assert unitarity_residual([1.0], fr, [1.0], [0.5]) > 1e-6


def test_homomorphism_on_interior():
    # heisenberg with lam > 0: the adapted frame is the identity, coordinates are (p, q, z)
    g = heisenberg(1)
    lam = [1.0]
    fr = HermiteFrame(1, 60)
    x = GroupPoint([0.3, -0.2], [0.15])
    y = GroupPoint([-0.1, 0.4], [-0.3])
    xy = multiply(g, x, y)
    Mx = matrix_coefficient(lam, fr, x.v[:1], x.v[1:], z=x.z)
    My = matrix_coefficient(lam, fr, y.v[:1], y.v[1:], z=y.z)
    Mxy = matrix_coefficient(lam, fr, xy.v[:1], xy.v[1:], z=xy.z)
    k = 15
    assert np.max(np.abs((Mx @ My)[:k, :k] - Mxy[:k, :k])) <= 1e-10


# ---------------------------------------------------------------- identities and serialisation


@pytest.mark.parametrize("lam", [[1.0], [-0.6], [0.2, -0.9, 0.4]])
def test_bracket_identity(lam):
    fr = HermiteFrame(1 if len(lam) == 1 else 2, 10)
    res = bracket_identity_check(lam, fr)
    assert res["interior"] <= 1e-10
    assert res["full"] > res["interior"]


def test_bracket_identity_needs_room():
    with pytest.raises(ValueError):
        bracket_identity_check([1.0], HermiteFrame(1, 3))


@pytest.mark.parametrize("n", [0, 1, 2])
def test_band_T_identity(n):
    fr = HermiteFrame(1, 10)
    res = band_T_identity_check([1.0], fr, n)
    assert res["residual"] <= 1e-10 * max(1.0, res["scale"])


def test_fiber_operator_roundtrip_and_checks():
    op = hamiltonian([0.5, -0.2], HermiteFrame(2, 3))
    back = FiberOperator.loads(op.dumps())
    assert np.array_equal(back.mat, op.mat) and np.array_equal(back.lam, op.lam)
    assert op.hermitian_residual() == 0
    with pytest.raises(ValueError):
        FiberOperator(np.array([1.0]), HermiteFrame(1, 2), np.eye(2))
    with pytest.raises(ValueError):
        FiberOperator(np.array([1.0]), HermiteFrame(1, 1), np.array([[np.nan, 0], [0, 1]]))


def test_quadrature_silent_when_converged():
    fr = HermiteFrame(1, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        matrix_coefficient([1.0], fr, [0.5], [0.5])
