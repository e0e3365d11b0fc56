"""Dense matrix / order-3 tensor kernel.

Matrices and tensors are plain float64 numpy arrays. An order-3 tensor of
dims (m, p, q) is stored C-contiguous, i.e. slice-major then row-major.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# above this size the one-sided Jacobi sweep is too slow in Python
JACOBI_MAX_DIM = 64
JACOBI_MAX_SWEEPS = 60

# entries below this magnitude are skipped when fixing singular-vector signs
_SIGN_TOL = 1.5e-8


class SvdConvergenceError(RuntimeError):
    pass


class SvdResult(NamedTuple):
    u: np.ndarray  # rows x k, orthonormal columns
    s: np.ndarray  # k, non-negative, non-increasing
    v: np.ndarray  # k x cols, orthonormal rows


@dataclass
class MulCounter:
    """Caller-owned accumulator of scalar multiplications.

    An (n x m) @ (m x p) product adds n*m*p.
    """

    count: int = 0

    def add(self, n: int, m: int, p: int) -> None:
        self.count += int(n) * int(m) * int(p)


def as_matrix(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_tensor3(t, name="tensor") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"{name} must be 3-D, got shape {t.shape}")
    return t


def matmul(a, b, counter: MulCounter | None = None) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    if counter is not None:
        counter.add(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # in place: make the first significant entry of every column of u positive
    for j in range(u.shape[1]):
        col = u[:, j]
        idx = np.flatnonzero(np.abs(col) > _SIGN_TOL)
        if idx.size and col[idx[0]] < 0:
            u[:, j] *= -1.0
            v[j, :] *= -1.0


def complete_orthonormal(q: np.ndarray, k: int) -> np.ndarray:
    """Extend the orthonormal columns of ``q`` (n x r) to k columns.

    Candidates are the standard basis vectors in order, so the result is
    deterministic.
    """
    n, r = q.shape
    if k > n:
        raise ValueError(f"cannot build {k} orthonormal vectors in R^{n}")
    cols = [q[:, j] for j in range(r)]
    for i in range(n):
        if len(cols) >= k:
            break
        e = np.zeros(n)
        e[i] = 1.0
        # two passes of Gram-Schmidt for stability
        for _ in range(2):
            for c in cols:
                e -= (c @ e) * c
        nrm = np.linalg.norm(e)
        if nrm > 0.5:
            cols.append(e / nrm)
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint pairs covering all pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if max(a, b) < n]
        rounds.append((np.array([a for a, _ in pairs], dtype=int), np.array([b for _, b in pairs], dtype=int)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _jacobi_tall(a: np.ndarray):
    """One-sided (Hestenes) Jacobi on a tall matrix, m >= n.

    Each round rotates a set of disjoint column pairs at once.
    """
    m, n = a.shape
    w = a.copy()
    vt = np.eye(n)
    eps = np.finfo(np.float64).eps
    rounds = _round_robin(n)
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            act = (np.abs(gamma) > eps * np.sqrt(alpha * beta)) & (gamma != 0.0)
            if not act.any():
                continue
            rotated = True
            p, q, alpha, beta, gamma = p[act], q[act], alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (w, vt):
                xp, xq = mat[:, p], mat[:, q]
                mat[:, p] = c * xp - s * xq
                mat[:, q] = s * xp + c * xq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(
            f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = vt[:, order].T
    tol = max(m, n) * eps * (s[0] if s.size else 0.0)
    rank = int(np.count_nonzero(s > tol))
    u = w[:, :rank] / s[:rank]
    u = complete_orthonormal(u, n)
    s[rank:] = 0.0
    return u, s, v


def _svd_jacobi(a: np.ndarray):
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a)
    u, s, v = _jacobi_tall(a.T)
    return v.T, s, u.T


def _svd_lapack(a: np.ndarray):
    try:
        u, s, v = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(str(exc)) from exc
    return u, s, v


def svd(a, k: int | None = None, method: str = "auto") -> SvdResult:
    """Truncated SVD, ``a ~= u @ diag(s) @ v`` with rank ``k``.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi when the
    small dimension is at most JACOBI_MAX_DIM). Signs are fixed so the
    first significant entry of each left singular vector is positive.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")
    kmax = min(a.shape)
    if k is None:
        k = kmax
    if not 1 <= k <= kmax:
        raise ValueError(f"rank k={k} outside [1, {kmax}]")
    if method == "auto":
        method = "jacobi" if kmax <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        u, s, v = _svd_jacobi(a)
    elif method == "lapack":
        u, s, v = _svd_lapack(a)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    u = np.ascontiguousarray(u[:, :k])
    s = np.ascontiguousarray(s[:k])
    v = np.ascontiguousarray(v[:k, :])
    _fix_signs(u, v)
    return SvdResult(u, s, v)


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def unfold(t, mode: int) -> np.ndarray:
    """Mode-k matricization.

    Columns run over the remaining modes in ascending order with the
    first remaining mode varying fastest.
    """
    t = as_tensor3(t)
    ax = _check_mode(mode)
    return np.reshape(np.moveaxis(t, ax, 0), (t.shape[ax], -1), order="F")


def fold(m, mode: int, dims) -> np.ndarray:
    m = as_matrix(m)
    ax = _check_mode(mode)
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3:
        raise ValueError(f"dims must have 3 entries, got {dims}")
    rest = [dims[i] for i in range(3) if i != ax]
    if m.shape != (dims[ax], rest[0] * rest[1]):
        raise ValueError(f"matrix of shape {m.shape} cannot fold to {dims} along mode {mode}")
    moved = np.reshape(m, (dims[ax], rest[0], rest[1]), order="F")
    return np.ascontiguousarray(np.moveaxis(moved, 0, ax))


def mode_product(t, m, mode: int) -> np.ndarray:
    t = as_tensor3(t)
    m = as_matrix(m)
    ax = _check_mode(mode)
    if m.shape[1] != t.shape[ax]:
        raise ValueError(
            f"mode-{mode} product: matrix has {m.shape[1]} columns, tensor mode size is {t.shape[ax]}"
        )
    dims = list(t.shape)
    dims[ax] = m.shape[0]
    return fold(m @ unfold(t, mode), mode, dims)


def pca_variance(a) -> np.ndarray:
    """Cumulative captured-variance ratios of the column-centered matrix.

    Rows are observations. A matrix that is zero after centering yields an
    all-ones curve.
    """
    # a fixed memory layout keeps results independent of how ``a`` was built
    a = np.ascontiguousarray(as_matrix(a))
    if a.shape[0] < 2:
        raise ValueError("pca_variance needs at least 2 rows")
    centered = a - a.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    energy = s**2
    total = energy.sum()
    if total == 0.0:
        return np.ones_like(s)
    curve = np.cumsum(energy) / total
    curve = np.minimum(curve, 1.0)
    curve[-1] = 1.0
    return curve
