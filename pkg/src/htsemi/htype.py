"""Step-2 H-type group algebra.

Points are written x = (v, z) with v in R^{2d} (first stratum) and z in R^p
(centre).  The structure matrices B_k define the bracket [U, V]_k = U^T B_k V.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def standard_j(d: int) -> np.ndarray:
    """The block matrix [[0, I], [-I, 0]] of size 2d."""
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.block([[zero, eye], [-eye, zero]])


@dataclass(frozen=True)
class GroupStructure:
    d: int
    p: int
    B: np.ndarray = field(repr=False)

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.shape != (self.p, 2 * self.d, 2 * self.d):
            raise ValueError(f"B has shape {B.shape}, expected {(self.p, 2 * self.d, 2 * self.d)}")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    @property
    def dim_v(self) -> int:
        return 2 * self.d

    @property
    def homogeneous_dimension(self) -> int:
        return 2 * self.d + 2 * self.p

    def skew(self, lam) -> np.ndarray:
        """B(lam) = sum_k lam_k B_k."""
        lam = np.asarray(lam, dtype=float).reshape(self.p)
        return np.tensordot(lam, self.B, axes=1)

    def bracket(self, u, w) -> np.ndarray:
        """Central part of [u, w]; u and w may carry leading batch axes."""
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        return np.einsum("...i,kij,...j->...k", u, self.B, w)

    def skew_residual(self) -> float:
        return float(np.max(np.abs(self.B + np.transpose(self.B, (0, 2, 1)))))

    def htype_residual(self, n_samples: int = 16, seed: int = 0) -> float:
        """Max Frobenius norm of B(lam)^2 + |lam|^2 I over random unit lam."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_samples):
            lam = rng.normal(size=self.p)
            lam /= np.linalg.norm(lam)
            K = self.skew(lam)
            res = np.linalg.norm(K @ K + lam @ lam * np.eye(self.dim_v))
            worst = max(worst, float(res))
        return worst

    def validate(self, tol: float = 1e-12) -> None:
        if self.skew_residual() > tol:
            raise ValueError("structure matrices are not skew-symmetric")
        if self.htype_residual() > tol:
            raise ValueError("structure matrices fail the H-type condition")

    def to_json(self) -> str:
        return json.dumps({"d": self.d, "p": self.p, "B": [b.ravel().tolist() for b in self.B]})

    @classmethod
    def from_json(cls, text: str) -> "GroupStructure":
        data = json.loads(text) if isinstance(text, str) else text
        d, p = int(data["d"]), int(data["p"])
        B = np.array(data["B"], dtype=float).reshape(p, 2 * d, 2 * d)
        return cls(d, p, B)


def heisenberg(d: int = 1) -> GroupStructure:
    return GroupStructure(d, 1, standard_j(d)[None])


def quaternionic() -> GroupStructure:
    """d=2, p=3: left multiplication by i, j, k on the quaternions as real 4x4 matrices."""
    qi = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]], dtype=float)
    qj = np.array([[0, 0, -1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, -1, 0, 0]], dtype=float)
    qk = np.array([[0, 0, 0, -1], [0, 0, -1, 0], [0, 1, 0, 0], [1, 0, 0, 0]], dtype=float)
    return GroupStructure(2, 3, np.stack([qi, qj, qk]))


BUILTIN_GROUPS = {"heisenberg1": lambda: heisenberg(1), "heisenberg2": lambda: heisenberg(2), "quaternionic23": quaternionic}


def builtin_group(name: str) -> GroupStructure:
    try:
        return BUILTIN_GROUPS[name]()
    except KeyError:
        raise ValueError(f"unknown group preset {name!r}; known: {sorted(BUILTIN_GROUPS)}") from None


@dataclass(frozen=True)
class GroupPoint:
    v: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.v, dtype=float)).copy()
        z = np.atleast_1d(np.asarray(self.z, dtype=float)).copy()
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(z))):
            raise ValueError("group point coordinates must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls, g: GroupStructure) -> "GroupPoint":
        return cls(np.zeros(g.dim_v), np.zeros(g.p))


def _check(g: GroupStructure, *xs: GroupPoint) -> None:
    for x in xs:
        if x.v.shape != (g.dim_v,) or x.z.shape != (g.p,):
            raise ValueError(f"point of shape ({x.v.shape}, {x.z.shape}) does not fit d={g.d}, p={g.p}")


def multiply(g: GroupStructure, x: GroupPoint, y: GroupPoint) -> GroupPoint:
    _check(g, x, y)
    return GroupPoint(x.v + y.v, x.z + y.z + 0.5 * g.bracket(x.v, y.v))


def inverse(x: GroupPoint) -> GroupPoint:
    return GroupPoint(-x.v, -x.z)


def dilate(t: float, x: GroupPoint) -> GroupPoint:
    if not t > 0:
        raise ValueError("dilation factor must be positive")
    return GroupPoint(t * x.v, t * t * x.z)


def quasi_norm(x: GroupPoint) -> float:
    return float((np.sum(x.v**2) ** 2 + np.sum(x.z**2)) ** 0.25)


def left_field_coeffs(g: GroupStructure, j: int, v) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of the left-invariant field V_j = d/dv_j + sum_k c_k d/dz_k at v.

    From x.Exp(tE_j) = (v + t e_j, z + (t/2)[v, e_j]) one gets c_k = (1/2) v^T B_k e_j,
    which is -(1/2)(B_k v)_j.  ``j`` is 0-based.
    """
    if not 0 <= j < g.dim_v:
        raise IndexError(f"field index {j} out of range for dim_v={g.dim_v}")
    v = np.asarray(v, dtype=float)
    e = np.zeros(g.dim_v)
    e[j] = 1.0
    return e, field_coefficients(g, v)[j]


def field_coefficients(g: GroupStructure, v) -> np.ndarray:
    """Central coefficients of all fields at once: array (2d, ..., p) with c[j, ..., k] = -(1/2)(B_k v)_j."""
    v = np.asarray(v, dtype=float)
    return np.moveaxis(-0.5 * np.einsum("kjb,...b->...jk", g.B, v), -2, 0)


@dataclass(frozen=True)
class AdaptedFrame:
    lam: np.ndarray
    R: np.ndarray

    @property
    def d(self) -> int:
        return self.R.shape[0] // 2

    def residual(self, g: GroupStructure) -> float:
        lam = self.lam
        target = np.linalg.norm(lam) * standard_j(g.d)
        return float(np.max(np.abs(self.R.T @ g.skew(lam) @ self.R - target)))


def adapted_frame(g: GroupStructure, lam) -> AdaptedFrame:
    """Orthonormal (P_1..P_d, Q_1..Q_d) with R^T B(lam) R = |lam| J.

    Greedy rule: P_j is the standard basis vector with the largest residual after
    projecting out the span already chosen (first index on ties), normalised so its
    largest-magnitude entry is positive; then Q_j = -K P_j with K = B(lam)/|lam|.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.shape != (g.p,):
        raise ValueError("lambda has the wrong dimension")
    norm = float(np.linalg.norm(lam))
    if norm == 0.0:
        raise ValueError("adapted frame needs lambda != 0")
    K = g.skew(lam) / norm
    n = g.dim_v
    Ps, Qs = [], []
    chosen = np.zeros((n, 0))
    for _ in range(g.d):
        resid = np.eye(n) - chosen @ (chosen.T @ np.eye(n))
        norms = np.linalg.norm(resid, axis=0)
        i = int(np.flatnonzero(norms >= norms.max() - 1e-12)[0])
        P = resid[:, i] / norms[i]
        k = int(np.argmax(np.abs(P)))
        if P[k] < 0:
            P = -P
        Q = -K @ P
        Ps.append(P)
        Qs.append(Q)
        chosen = np.column_stack([chosen, P, Q])
    R = np.column_stack(Ps + Qs)
    return AdaptedFrame(lam.copy(), R)
