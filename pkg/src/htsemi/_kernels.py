"""Hot loops for the fiber and transform modules.

The matrix coefficients of the Schrodinger representation at a first-stratum
point are products over coordinates of displacement-operator entries
<m|D(b)|n>, with b = (-P + iQ)/sqrt(2).  Each kernel exists twice: a numba
version (parallel over lambda slices, sequential over points so results do not
depend on the thread count) and a numpy version used when numba is disabled.
"""
import numpy as np

from ._accel import USE_NUMBA, optional_njit, prange

_CHUNK = 2048


@optional_njit(cache=True)
def _disp_fill(b, A, out):
    bc = np.conj(b)
    out[0, 0] = np.exp(-0.5 * (b.real * b.real + b.imag * b.imag))
    for m in range(1, A + 1):
        out[m, 0] = b * out[m - 1, 0] / np.sqrt(m)
    for n in range(A):
        s = 1.0 / np.sqrt(n + 1)
        out[0, n + 1] = -bc * out[0, n] * s
        for m in range(1, A + 1):
            out[m, n + 1] = (np.sqrt(m) * out[m - 1, n] - bc * out[m, n]) * s


def displacement_tables_numpy(beta, A):
    """Tables <m|D(b)|n> for a flat array of b; returns shape (len(b), A+1, A+1)."""
    beta = np.asarray(beta, dtype=complex).ravel()
    out = np.zeros((beta.size, A + 1, A + 1), dtype=complex)
    bc = np.conj(beta)
    out[:, 0, 0] = np.exp(-0.5 * np.abs(beta) ** 2)
    for m in range(1, A + 1):
        out[:, m, 0] = beta * out[:, m - 1, 0] / np.sqrt(m)
    sq = np.sqrt(np.arange(A + 1))
    for n in range(A):
        col = -bc[:, None] * out[:, :, n]
        col[:, 1:] += sq[1:] * out[:, :-1, n]
        out[:, :, n + 1] = col / np.sqrt(n + 1)
    return out


@optional_njit(cache=True)
def _displacement_tables_nb(beta, A):
    out = np.zeros((beta.size, A + 1, A + 1), dtype=np.complex128)
    for i in range(beta.size):
        _disp_fill(beta[i], A, out[i])
    return out


def displacement_tables(beta, A):
    beta = np.ascontiguousarray(np.asarray(beta, dtype=complex).ravel())
    if USE_NUMBA:
        return _displacement_tables_nb(beta, int(A))
    return displacement_tables_numpy(beta, A)


@optional_njit(parallel=True, cache=True)
def _forward_nb(fhat, beta, idx, A, nkeep, out):
    K, npts = fhat.shape
    d = beta.shape[2]
    for k in prange(K):
        N = nkeep[k]
        tab = np.zeros((d, A + 1, A + 1), dtype=np.complex128)
        acc = np.zeros((N, N), dtype=np.complex128)
        for pt in range(npts):
            w = fhat[k, pt]
            if w == 0:
                continue
            for j in range(d):
                _disp_fill(beta[k, pt, j], A, tab[j])
            for a in range(N):
                for b in range(N):
                    val = 1.0 + 0.0j
                    for j in range(d):
                        val *= tab[j, idx[b, j], idx[a, j]]
                    acc[a, b] += w * np.conj(val)
        out[k, :N, :N] = acc


@optional_njit(parallel=True, cache=True)
def _inverse_nb(F, beta, idx, A, out):
    K, npts = out.shape
    d = beta.shape[2]
    N = idx.shape[0]
    for k in prange(K):
        tab = np.zeros((d, A + 1, A + 1), dtype=np.complex128)
        Fk = F[k]
        for pt in range(npts):
            for j in range(d):
                _disp_fill(beta[k, pt, j], A, tab[j])
            acc = 0.0 + 0.0j
            for a in range(N):
                for b in range(N):
                    f = Fk[b, a]
                    if f == 0:
                        continue
                    val = 1.0 + 0.0j
                    for j in range(d):
                        val *= tab[j, idx[a, j], idx[b, j]]
                    acc += val * f
            out[k, pt] = acc


def _matrices_numpy(beta_pts, idx, A):
    """Full matrices M[pt, a, b] for points with per-coordinate b values (npts, d)."""
    npts, d = beta_pts.shape
    M = None
    for j in range(d):
        tab = displacement_tables_numpy(beta_pts[:, j], A)
        part = tab[:, idx[:, j][:, None], idx[:, j][None, :]]
        M = part if M is None else M * part
    return M


def forward_contract(fhat, beta, idx, A, nkeep=None):
    """out[k, a, b] = sum_pt fhat[k, pt] * conj(M_k(pt)[b, a]) for a, b < nkeep[k]; zero elsewhere.

    ``idx`` must be in graded order so that a prefix of it is a union of bands.
    """
    fhat = np.ascontiguousarray(fhat, dtype=complex)
    beta = np.ascontiguousarray(beta, dtype=complex)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    K = fhat.shape[0]
    N = idx.shape[0]
    nkeep = np.full(K, N, dtype=np.int64) if nkeep is None else np.ascontiguousarray(nkeep, dtype=np.int64)
    out = np.zeros((K, N, N), dtype=complex)
    if USE_NUMBA:
        _forward_nb(fhat, beta, idx, int(A), nkeep, out)
        return out
    for k in range(K):
        n = int(nkeep[k])
        acc = np.zeros((n, n), dtype=complex)
        for s in range(0, fhat.shape[1], _CHUNK):
            M = _matrices_numpy(beta[k, s : s + _CHUNK], idx[:n], A)
            acc += np.einsum("p,pba->ab", fhat[k, s : s + _CHUNK], np.conj(M), optimize=False)
        out[k, :n, :n] = acc
    return out


def inverse_contract(F, beta, idx, A):
    """out[k, pt] = sum_{a,b} M_k(pt)[a, b] * F[k, b, a] = Tr(M F)."""
    F = np.ascontiguousarray(F, dtype=complex)
    beta = np.ascontiguousarray(beta, dtype=complex)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    K, npts = beta.shape[0], beta.shape[1]
    out = np.zeros((K, npts), dtype=complex)
    if USE_NUMBA:
        _inverse_nb(F, beta, idx, int(A), out)
        return out
    for k in range(K):
        for s in range(0, npts, _CHUNK):
            M = _matrices_numpy(beta[k, s : s + _CHUNK], idx, A)
            out[k, s : s + _CHUNK] = np.einsum("pab,ba->p", M, F[k], optimize=False)
    return out
