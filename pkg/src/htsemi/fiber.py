"""Operators on one representation fiber, in a truncated Hermite basis.

Matrices are written in the fixed basis h_alpha of L^2(R^d), |alpha| <= A, in
graded order.  The lambda-dependence enters only through sqrt|lambda| scalings
(and the central phase of matrix coefficients).
"""
from __future__ import annotations

import base64
import itertools
import json
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import comb

import numpy as np
from scipy.special import roots_hermite

from . import _kernels

GUARD = 2
# rows beyond the cutoff used when measuring unitarity of a truncated block
EXTRA_ROWS = 80


@dataclass(frozen=True)
class HermiteFrame:
    d: int
    A: int

    def __post_init__(self):
        if self.d < 1 or self.A < 0:
            raise ValueError("HermiteFrame needs d >= 1 and A >= 0")

    @cached_property
    def index(self) -> np.ndarray:
        """Multi-indices (N, d): sorted by total degree, then reverse-lexicographically."""
        rows = []
        for n in range(self.A + 1):
            block = [a for a in itertools.product(range(n + 1), repeat=self.d) if sum(a) == n]
            rows.extend(sorted(block, reverse=True))
        return np.array(rows, dtype=np.int64).reshape(-1, self.d)

    @cached_property
    def degree(self) -> np.ndarray:
        return self.index.sum(axis=1)

    @cached_property
    def position(self) -> dict:
        return {tuple(int(x) for x in a): i for i, a in enumerate(self.index)}

    @property
    def N(self) -> int:
        return comb(self.A + self.d, self.d)

    def band_mask(self, n: int) -> np.ndarray:
        return self.degree == n

    def interior(self, guard: int = GUARD) -> np.ndarray:
        return self.degree <= self.A - guard


def _lam(lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if not np.any(lam != 0):
        raise ValueError("fiber operators need lambda != 0")
    return lam


@dataclass(frozen=True)
class FiberOperator:
    lam: np.ndarray
    frame: HermiteFrame
    mat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", _lam(self.lam))
        mat = np.asarray(self.mat, dtype=complex)
        if mat.shape != (self.frame.N, self.frame.N):
            raise ValueError("matrix does not match the Hermite frame")
        if not np.all(np.isfinite(mat)):
            raise ValueError("fiber operator has non-finite entries")
        object.__setattr__(self, "mat", mat)

    def __matmul__(self, other: "FiberOperator") -> "FiberOperator":
        return FiberOperator(self.lam, self.frame, self.mat @ other.mat)

    def hermitian_residual(self) -> float:
        return float(np.max(np.abs(self.mat - self.mat.conj().T)))

    def dumps(self) -> str:
        header = {"lam": self.lam.tolist(), "d": self.frame.d, "A": self.frame.A}
        data = base64.b64encode(np.ascontiguousarray(self.mat, dtype="<c16").tobytes()).decode()
        return json.dumps({"header": header, "data": data})

    @classmethod
    def loads(cls, text: str) -> "FiberOperator":
        obj = json.loads(text)
        h = obj["header"]
        frame = HermiteFrame(h["d"], h["A"])
        mat = np.frombuffer(base64.b64decode(obj["data"]), dtype="<c16").reshape(frame.N, frame.N)
        return cls(np.array(h["lam"]), frame, mat.copy())


def hermite_table(nmax: int, xi) -> np.ndarray:
    """Rows h_0..h_nmax evaluated at xi via the three-term recurrence."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((nmax + 1,) + xi.shape)
    out[0] = np.pi**-0.25 * np.exp(-0.5 * xi**2)
    if nmax >= 1:
        out[1] = np.sqrt(2.0) * xi * out[0]
    for n in range(1, nmax):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * xi * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def hermite_eval(n: int, xi):
    if n < 0 or n > 200:
        raise ValueError("hermite_eval supports 0 <= n <= 200")
    return hermite_table(n, xi)[n]


def _hermite_poly_table(nmax: int, x) -> np.ndarray:
    """h_n(x) * exp(x^2/2): same recurrence without the Gaussian."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((nmax + 1,) + x.shape)
    out[0] = np.pi**-0.25
    if nmax >= 1:
        out[1] = np.sqrt(2.0) * x * out[0]
    for n in range(1, nmax):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * x * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def _op(lam, frame, mat) -> FiberOperator:
    return FiberOperator(lam, frame, mat)


def hamiltonian(lam, frame: HermiteFrame) -> FiberOperator:
    lam = _lam(lam)
    diag = np.linalg.norm(lam) * (2 * frame.degree + frame.d)
    return _op(lam, frame, np.diag(diag).astype(complex))


@lru_cache(maxsize=64)
def _ladder_unit(d: int, A: int, j: int, kind: str) -> np.ndarray:
    frame = HermiteFrame(d, A)
    M = np.zeros((frame.N, frame.N))
    pos = frame.position
    for col, alpha in enumerate(frame.index):
        a = [int(x) for x in alpha]
        if kind == "lower":
            if a[j] == 0:
                continue
            a[j] -= 1
            row = pos[tuple(a)]
            M[row, col] = np.sqrt(alpha[j] / 2.0)
        else:
            a[j] += 1
            row = pos.get(tuple(a))
            if row is None:
                continue
            M[row, col] = -np.sqrt((alpha[j] + 1) / 2.0)
    M.setflags(write=False)
    return M


def ladder(lam, frame: HermiteFrame, j: int, kind: str) -> FiberOperator:
    """pi(R_j) ("lower") or pi(Rbar_j) ("raise"); ``j`` is 0-based."""
    lam = _lam(lam)
    if not 0 <= j < frame.d:
        raise IndexError("ladder index out of range")
    if kind not in ("lower", "raise"):
        raise ValueError("kind must be 'lower' or 'raise'")
    scale = np.sqrt(np.linalg.norm(lam))
    return _op(lam, frame, scale * _ladder_unit(frame.d, frame.A, j, kind))


def vector_field_rep(lam, frame: HermiteFrame, which: str, j: int = 0) -> FiberOperator:
    """pi(P_j), pi(Q_j) (adapted frame, 0-based j) or pi(Z_k) = i lam_k."""
    lam = _lam(lam)
    if which == "Z":
        if not 0 <= j < lam.size:
            raise IndexError("central index out of range")
        return _op(lam, frame, 1j * lam[j] * np.eye(frame.N))
    lo = ladder(lam, frame, j, "lower").mat
    hi = ladder(lam, frame, j, "raise").mat
    if which == "P":
        return _op(lam, frame, lo + hi)
    if which == "Q":
        return _op(lam, frame, 1j * (lo - hi))
    raise ValueError(f"unknown field selector {which!r}")


def central_field_rep(lam, frame: HermiteFrame) -> FiberOperator:
    """pi(Z^(lam)) = sum_k lam_k pi(Z_k) = i|lam|^2."""
    lam = _lam(lam)
    return _op(lam, frame, 1j * float(lam @ lam) * np.eye(frame.N))


def assembled_hamiltonian(lam, frame: HermiteFrame) -> FiberOperator:
    """-sum_j (pi(P_j)^2 + pi(Q_j)^2) built from ladder matrices (exact only off the top bands)."""
    lam = _lam(lam)
    acc = np.zeros((frame.N, frame.N), dtype=complex)
    for j in range(frame.d):
        P = vector_field_rep(lam, frame, "P", j).mat
        Q = vector_field_rep(lam, frame, "Q", j).mat
        acc -= P @ P + Q @ Q
    return _op(lam, frame, acc)


def projector(n: int, lam, frame: HermiteFrame) -> FiberOperator:
    if not 0 <= n <= frame.A:
        raise ValueError(f"band {n} lies outside the cutoff A={frame.A}")
    return _op(lam, frame, np.diag(frame.band_mask(n)).astype(complex))


def projector_contour(n: int, lam, frame: HermiteFrame, quad_nodes: int = 64, radius: float = 1.0) -> FiberOperator:
    """Trapezoid rule for the resolvent integral of |lam|^{-1} H around 2n+d.

    The integrand is (D - z)^{-1}; the circle is traversed clockwise so that the
    result is +Pi_n (counter-clockwise traversal of this integrand gives -Pi_n).
    """
    if not 0 <= n <= frame.A:
        raise ValueError(f"band {n} lies outside the cutoff A={frame.A}")
    if not 0 < radius < 2:
        raise ValueError("radius must lie in (0, 2)")
    if quad_nodes < 16:
        raise ValueError("need at least 16 quadrature nodes")
    lam = _lam(lam)
    D = (2 * frame.degree + frame.d).astype(float)
    centre = 2 * n + frame.d
    theta = 2 * np.pi * np.arange(quad_nodes) / quad_nodes
    nodes = centre + radius * np.exp(-1j * theta)
    gap = np.min(np.abs(D[None, :] - nodes[:, None]))
    if gap < 1e-12:
        raise ArithmeticError("quadrature node coincides with the spectrum")
    # dz = -i r e^{-i theta} dtheta on the clockwise circle
    dz = -1j * radius * np.exp(-1j * theta) * (2 * np.pi / quad_nodes)
    resolvent = 1.0 / (D[None, :] - nodes[:, None])
    diag = (dz[:, None] * resolvent).sum(axis=0) / (2j * np.pi)
    return _op(lam, frame, np.diag(diag))


def spectral_function(f, lam, frame: HermiteFrame) -> FiberOperator:
    """f evaluated on the spectrum |lam|(2|alpha|+d); ``f`` must accept arrays."""
    lam = _lam(lam)
    vals = np.asarray(f(np.linalg.norm(lam) * (2 * frame.degree + frame.d).astype(float)), dtype=complex)
    vals = np.broadcast_to(vals, (frame.N,))
    if not np.all(np.isfinite(vals)):
        raise ValueError("spectral function undefined on the truncated spectrum")
    return _op(lam, frame, np.diag(vals))


# ---------------------------------------------------------------- matrix coefficients


def _gh_table_1d(P: float, Q: float, nrows: int, ncols: int, nodes: int) -> np.ndarray:
    """<pi h_b, h_a> for the 1-d unit-scale representation at (P, Q) by Gauss-Hermite.

    With eta = xi + P/2 the integrand becomes exp(-eta^2 - P^2/4) times polynomials,
    so the quadrature weight absorbs the Gaussian.
    """
    eta, w = roots_hermite(nodes)
    Ha = _hermite_poly_table(nrows - 1, eta - 0.5 * P)
    Hb = _hermite_poly_table(ncols - 1, eta + 0.5 * P)
    phase = w * np.exp(1j * Q * eta)
    return np.exp(-0.25 * P * P) * (Ha * phase) @ Hb.T


def _gh_converged(P: float, Q: float, nrows: int, ncols: int, start: int, cap: int = 256):
    nodes = start
    prev = _gh_table_1d(P, Q, nrows, ncols, nodes)
    while nodes < cap:
        nodes = min(2 * nodes, cap)
        cur = _gh_table_1d(P, Q, nrows, ncols, nodes)
        if np.max(np.abs(cur - prev)) <= 1e-13:
            return cur, True
        prev = cur
    return prev, False


def _assemble(tables, frame: HermiteFrame) -> np.ndarray:
    idx = frame.index
    M = np.ones((frame.N, frame.N), dtype=complex)
    for j, tab in enumerate(tables):
        M = M * tab[idx[:, j][:, None], idx[:, j][None, :]]
    return M


def _scaled(lam, p, q):
    s = np.sqrt(np.linalg.norm(lam))
    return s * np.atleast_1d(np.asarray(p, dtype=float)), s * np.atleast_1d(np.asarray(q, dtype=float))


def matrix_coefficient(lam, frame: HermiteFrame, p, q, z=None) -> np.ndarray:
    """Matrix of <pi^lam_x h_b, h_a> for x with adapted coordinates (p, q, z), by quadrature.

    Nodes start at max(4A, 32) and double until successive tables agree (cap 256).
    A warning is issued when the column-unitarity residual on the interior block,
    measured against EXTRA_ROWS extended rows, exceeds 1e-6.
    """
    lam = _lam(lam)
    P, Q = _scaled(lam, p, q)
    if P.size != frame.d or Q.size != frame.d:
        raise ValueError("adapted coordinates must have length d")
    start = max(4 * frame.A, 32)
    tables = []
    worst = 0.0
    for j in range(frame.d):
        ext = frame.A + EXTRA_ROWS
        tab, ok = _gh_converged(P[j], Q[j], ext + 1, frame.A + 1, start)
        inner = tab[:, : max(frame.A + 1 - GUARD, 1)]
        worst = max(worst, float(np.max(np.abs(inner.conj().T @ inner - np.eye(inner.shape[1])))))
        if not ok:
            worst = max(worst, 1.0)
        tables.append(tab[: frame.A + 1])
    if worst > 1e-6:
        warnings.warn(f"matrix coefficient quadrature unreliable (unitarity residual {worst:.2e})", RuntimeWarning)
    M = _assemble(tables, frame)
    if z is not None:
        M = M * np.exp(1j * float(lam @ np.atleast_1d(np.asarray(z, dtype=float))))
    return M


def unitarity_residual(lam, frame: HermiteFrame, p, q, extra_rows: int | None = None) -> float:
    """Column-orthonormality residual of the interior block, with or without extended rows."""
    lam = _lam(lam)
    P, Q = _scaled(lam, p, q)
    rows = frame.A + 1 if extra_rows is None else frame.A + 1 + extra_rows
    worst = 0.0
    for j in range(frame.d):
        tab, _ = _gh_converged(P[j], Q[j], rows, frame.A + 1, max(4 * frame.A, 32))
        inner = tab[:, : frame.A + 1 - GUARD]
        worst = max(worst, float(np.max(np.abs(inner.conj().T @ inner - np.eye(inner.shape[1])))))
    return worst


def displacement_coefficient(lam, frame: HermiteFrame, p, q, z=None) -> np.ndarray:
    """Same matrix as :func:`matrix_coefficient`, via the displacement-operator recurrence."""
    lam = _lam(lam)
    P, Q = _scaled(lam, p, q)
    beta = (-P + 1j * Q) / np.sqrt(2.0)
    tables = [_kernels.displacement_tables(np.array([b]), frame.A)[0] for b in beta]
    M = _assemble(tables, frame)
    if z is not None:
        M = M * np.exp(1j * float(lam @ np.atleast_1d(np.asarray(z, dtype=float))))
    return M


# ---------------------------------------------------------------- identity checks


def bracket_identity_check(lam, frame: HermiteFrame, guard: int = GUARD) -> dict:
    """Residuals of [pi(Delta), pi(P_j)] = -2|lam|^{-1} pi(Z^lam) pi(Q_j) and the Q_j partner.

    pi(Delta) = sum_j pi(P_j)^2 + pi(Q_j)^2 is assembled from the ladders, so the
    top bands are wrong; ``interior`` restricts to |alpha| <= A - guard.
    """
    lam = _lam(lam)
    if frame.A < 4:
        raise ValueError("bracket check needs A >= 4")
    nrm = np.linalg.norm(lam)
    lap = -assembled_hamiltonian(lam, frame).mat
    Z = central_field_rep(lam, frame).mat
    keep = frame.interior(guard)
    inner, full = 0.0, 0.0
    for j in range(frame.d):
        P = vector_field_rep(lam, frame, "P", j).mat
        Q = vector_field_rep(lam, frame, "Q", j).mat
        for lhs, rhs in (
            (lap @ P - P @ lap, -2.0 / nrm * Z @ Q),
            (lap @ Q - Q @ lap, 2.0 / nrm * Z @ P),
        ):
            diff = np.abs(lhs - rhs)
            full = max(full, float(diff.max()))
            inner = max(inner, float(diff[np.ix_(keep, keep)].max()))
    return {"interior": inner, "full": full}


def band_T_identity_check(lam, frame: HermiteFrame, n: int, guard: int = GUARD) -> dict:
    """Residual of the band identity for T on a two-factor tensor space.

    The first factor carries the x-fields, realised by an independent copy of
    pi^lam; the second carries the fiber.  The identity compared is
        (1 x Pi_n) T (1 x Pi_n) = (|lam|/2)(|lam|^{-1} pi(Z^lam)(2n+d) + i pi(Delta)) x Pi_n,
    restricted to the interior block of the first factor.
    """
    lam = _lam(lam)
    if n > frame.A - guard:
        raise ValueError("band beyond the truncation guard")
    nrm = np.linalg.norm(lam)
    fields = []
    for j in range(frame.d):
        fields.append((vector_field_rep(lam, frame, "P", j).mat, vector_field_rep(lam, frame, "Q", j).mat))
    band = frame.band_mask(n)
    keep = frame.interior(guard)
    # fiber factor compressed to band n from the start: Pi_n X Pi_n
    sel = np.ix_(band, band)
    lhs = 0.0
    for P1, Q1 in fields:
        for X1 in (P1, Q1):
            for P2, Q2 in fields:
                lhs = lhs + np.kron(X1 @ P2, (X1 @ Q2)[sel]) - np.kron(X1 @ Q2, (X1 @ P2)[sel])
    lap = -assembled_hamiltonian(lam, frame).mat
    Zx = central_field_rep(lam, frame).mat
    xpart = 0.5 * nrm * (Zx * (2 * n + frame.d) / nrm + 1j * lap)
    rhs = np.kron(xpart, np.eye(int(band.sum())))
    m = int(band.sum())
    mask = np.repeat(keep, m)
    diff = np.abs(lhs - rhs)[np.ix_(mask, mask)]
    return {"residual": float(diff.max()), "scale": float(np.abs(rhs[np.ix_(mask, mask)]).max())}
