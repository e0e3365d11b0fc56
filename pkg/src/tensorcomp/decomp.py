"""Compression of a weight stack by per-slice SVD, shared-basis TT, and Tucker
with a matrix bank, plus reconstruction and the TKF file format.

Every factorization approximates slice ``i`` of the stack as

    per-slice SVD (alpha):  u_i @ diag(s_i) @ v_i
    per-slice SVD (beta):   a_i @ b_i
    tensor train:           u @ core_i @ v
    Tucker / matrix bank:   u @ (sum_k p[i, k] * bank[k]) @ v
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import SvdConvergenceError, complete_orthonormal, mode_product, svd, unfold
from .stack import SLICES_PER_LAYER, FormatError, WeightStack

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITERS = 50

KIND_SVD_ALPHA = 0
KIND_SVD_BETA = 1
KIND_TT = 2
KIND_TUCKER = 3

TKF_MAGIC = b"TKF1"
_TKF_HEADER = struct.Struct("<4sIIIIBB2x")


@dataclass
class SvdFactors:
    variant: str  # "alpha" or "beta"
    u: np.ndarray  # (n, D, d); a_i for beta
    v: np.ndarray  # (n, d, D); b_i for beta
    s: np.ndarray | None = None  # (n, d), alpha only

    @property
    def rank(self) -> int:
        return self.u.shape[2]

    @property
    def n_slices(self) -> int:
        return self.u.shape[0]

    @property
    def D(self) -> int:
        return self.u.shape[1]


@dataclass
class TTFactors:
    u: np.ndarray  # (D, d)
    cores: np.ndarray  # (n, d, d), not necessarily diagonal
    v: np.ndarray  # (d, D)

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def n_slices(self) -> int:
        return self.cores.shape[0]

    @property
    def D(self) -> int:
        return self.u.shape[0]


@dataclass
class TuckerFit:
    errors: list = field(default_factory=list)  # relative error after HOSVD, then per HOOI sweep
    iterations: int = 0
    converged: bool = False

    @property
    def error(self) -> float:
        return self.errors[-1]


@dataclass
class TuckerFactors:
    u: np.ndarray  # (D, d)
    v: np.ndarray  # (d, D)
    bank: np.ndarray  # (l, d, d)
    p: np.ndarray  # (n, l)
    fit: TuckerFit | None = None

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def bank_size(self) -> int:
        return self.bank.shape[0]

    @property
    def n_slices(self) -> int:
        return self.p.shape[0]

    @property
    def D(self) -> int:
        return self.u.shape[0]

    def mixed(self, i: int) -> np.ndarray:
        """P_i C: the d x d bank combination for slice i."""
        return np.tensordot(self.p[i], self.bank, axes=1)


Factors = SvdFactors | TTFactors | TuckerFactors


def _check_rank(name, value, upper):
    if not isinstance(value, (int, np.integer)) or not 1 <= value <= upper:
        raise ValueError(f"{name}={value!r} must be an integer in [1, {upper}]")


def leading_left_vectors(mat: np.ndarray, k: int) -> np.ndarray:
    """Top-k left singular vectors; padded with an orthonormal complement
    when k exceeds the smaller dimension of ``mat``."""
    r = min(k, min(mat.shape))
    u = svd(mat, r).u
    if r < k:
        u = complete_orthonormal(u, k)
    return u


def decompose_svd(ws: WeightStack, d: int, variant: str = "alpha", threads: int = 1) -> SvdFactors:
    if variant not in ("alpha", "beta"):
        raise ValueError(f"variant must be 'alpha' or 'beta', got {variant!r}")
    D = ws.config.D
    _check_rank("d", d, D)

    def one(i):
        try:
            return svd(ws.tensor[i], d)
        except SvdConvergenceError as exc:
            raise SvdConvergenceError(f"slice {i}: {exc}") from exc

    idx = range(ws.n_slices)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    u = np.stack([r.u for r in results])
    s = np.stack([r.s for r in results])
    v = np.stack([r.v for r in results])
    if variant == "alpha":
        return SvdFactors("alpha", u, v, s)
    root = np.sqrt(s)
    return SvdFactors("beta", u * root[:, None, :], root[:, :, None] * v)


def decompose_tt(ws: WeightStack, d: int) -> TTFactors:
    """Shared u, v from the mode-2/3 unfoldings; cores by orthogonal projection."""
    _check_rank("d", d, ws.config.D)
    W = ws.tensor
    u = leading_left_vectors(unfold(W, 2), d)
    vt = leading_left_vectors(unfold(W, 3), d)
    cores = np.einsum("ja,ijk,kb->iab", u, W, vt, optimize=True)
    return TTFactors(u=u, cores=cores, v=np.ascontiguousarray(vt.T))


def _tucker_core(W, a1, a2, a3):
    g = mode_product(W, a1.T, 1)
    g = mode_product(g, a2.T, 2)
    return mode_product(g, a3.T, 3)


def _relative_error(W, approx, wnorm):
    diff = np.linalg.norm(W - approx)
    return diff / wnorm if wnorm > 0 else diff


def decompose_tucker(
    ws: WeightStack,
    l: int,
    d: int,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> TuckerFactors:
    """HOSVD initialisation followed by HOOI sweeps.

    Stops when a sweep improves the relative Frobenius error by less than
    ``tol`` or after ``max_iters`` sweeps (``max_iters=0`` returns the
    HOSVD fit). The error trace is kept in ``factors.fit``.
    """
    _check_rank("d", d, ws.config.D)
    _check_rank("l", l, ws.n_slices)
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iters < 0:
        raise ValueError(f"max_iters must be >= 0, got {max_iters}")
    W = ws.tensor
    wnorm = np.linalg.norm(W)

    a1 = leading_left_vectors(unfold(W, 1), l)
    a2 = leading_left_vectors(unfold(W, 2), d)
    a3 = leading_left_vectors(unfold(W, 3), d)

    def evaluate(a1, a2, a3):
        g = _tucker_core(W, a1, a2, a3)
        approx = mode_product(mode_product(mode_product(g, a1, 1), a2, 2), a3, 3)
        return g, _relative_error(W, approx, wnorm)

    core, err = evaluate(a1, a2, a3)
    fit = TuckerFit(errors=[err])
    for it in range(1, max_iters + 1):
        y = mode_product(mode_product(W, a2.T, 2), a3.T, 3)
        a1 = leading_left_vectors(unfold(y, 1), l)
        y = mode_product(mode_product(W, a1.T, 1), a3.T, 3)
        a2 = leading_left_vectors(unfold(y, 2), d)
        y = mode_product(mode_product(W, a1.T, 1), a2.T, 2)
        a3 = leading_left_vectors(unfold(y, 3), d)
        core, new_err = evaluate(a1, a2, a3)
        fit.errors.append(new_err)
        fit.iterations = it
        improvement = err - new_err
        err = new_err
        if improvement < tol:
            fit.converged = True
            break
    if max_iters == 0:
        fit.converged = True
    return TuckerFactors(
        u=np.ascontiguousarray(a2),
        v=np.ascontiguousarray(a3.T),
        bank=np.ascontiguousarray(core),
        p=np.ascontiguousarray(a1),
        fit=fit,
    )


def reconstruct_slice(f: Factors, i: int) -> np.ndarray:
    n = f.n_slices
    if not 0 <= i < n:
        raise IndexError(f"slice index {i} out of range [0, {n})")
    if isinstance(f, SvdFactors):
        if f.variant == "alpha":
            return (f.u[i] * f.s[i]) @ f.v[i]
        return f.u[i] @ f.v[i]
    if isinstance(f, TTFactors):
        return f.u @ f.cores[i] @ f.v
    if isinstance(f, TuckerFactors):
        return f.u @ f.mixed(i) @ f.v
    raise TypeError(f"unsupported factor type {type(f).__name__}")


def reconstruct(f: Factors) -> np.ndarray:
    return np.stack([reconstruct_slice(f, i) for i in range(f.n_slices)])


def reconstruction_error(ws: WeightStack, f: Factors):
    """Relative Frobenius error of the whole stack and of each slice.

    A zero reference (whole stack or slice) falls back to the absolute error.
    """
    W = ws.tensor
    if f.n_slices != ws.n_slices or f.D != ws.config.D:
        raise ValueError("factors do not match the stack shape")
    approx = reconstruct(f)
    diff = np.linalg.norm(W - approx, axis=(1, 2))
    ref = np.linalg.norm(W, axis=(1, 2))
    per_slice = np.where(ref > 0, diff / np.where(ref > 0, ref, 1.0), diff)
    total_ref = np.sqrt(np.sum(ref**2))
    total_diff = np.sqrt(np.sum(diff**2))
    total = total_diff / total_ref if total_ref > 0 else total_diff
    return float(total), per_slice


def tucker_from_tt(tt: TTFactors) -> TuckerFactors:
    n = tt.n_slices
    return TuckerFactors(u=tt.u.copy(), v=tt.v.copy(), bank=tt.cores.copy(), p=np.eye(n))


def merge_bank(tk: TuckerFactors) -> TTFactors:
    cores = np.tensordot(tk.p, tk.bank, axes=1)
    return TTFactors(u=tk.u.copy(), cores=cores, v=tk.v.copy())


def albert_factors(core, L: int) -> TuckerFactors:
    """Layer sharing as a matrix bank: u = v = I, p = L stacked 12x12 identities."""
    core = np.asarray(core, dtype=np.float64)
    if core.ndim != 3 or core.shape[0] != SLICES_PER_LAYER or core.shape[1] != core.shape[2]:
        raise ValueError(f"expected 12 square slices, got shape {core.shape}")
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    D = core.shape[1]
    eye = np.eye(D)
    p = np.tile(np.eye(SLICES_PER_LAYER), (L, 1))
    return TuckerFactors(u=eye, v=eye.copy(), bank=core.copy(), p=p)


# --- TKF format -----------------------------------------------------------

def _kind_of(f: Factors) -> int:
    if isinstance(f, SvdFactors):
        return KIND_SVD_ALPHA if f.variant == "alpha" else KIND_SVD_BETA
    if isinstance(f, TTFactors):
        return KIND_TT
    if isinstance(f, TuckerFactors):
        return KIND_TUCKER
    raise TypeError(f"unsupported factor type {type(f).__name__}")


def write_tkf(path, f: Factors) -> None:
    kind = _kind_of(f)
    n = f.n_slices
    if n % SLICES_PER_LAYER:
        raise ValueError(f"slice count {n} is not a multiple of 12")
    L = n // SLICES_PER_LAYER
    D, d = f.D, f.rank
    if kind == KIND_SVD_ALPHA:
        l = n
        blocks = []
        for i in range(n):
            blocks += [f.u[i].ravel(), f.s[i], f.v[i].ravel()]
    elif kind == KIND_SVD_BETA:
        l = n
        blocks = []
        for i in range(n):
            blocks += [f.u[i].ravel(), f.v[i].ravel()]
    else:
        tk = tucker_from_tt(f) if kind == KIND_TT else f
        l = tk.bank_size
        blocks = [tk.u.ravel(), tk.v.ravel(), tk.bank.ravel(), tk.p.ravel()]
    payload = np.concatenate(blocks).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_TKF_HEADER.pack(TKF_MAGIC, L, D, d, l, kind, 1))
        fh.write(payload.tobytes())


def read_tkf(path) -> Factors:
    data = Path(path).read_bytes()
    hs = _TKF_HEADER.size
    if len(data) < hs:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, L, D, d, l, kind, dtype = _TKF_HEADER.unpack_from(data, 0)
    if magic != TKF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {TKF_MAGIC!r}")
    if dtype != 1:
        raise FormatError(f"{path}: unsupported dtype code {dtype} at offset 21")
    if kind not in (0, 1, 2, 3):
        raise FormatError(f"{path}: unknown kind {kind} at offset 20")
    if L < 1 or d < 1 or d > D or l < 1:
        raise FormatError(f"{path}: inconsistent header L={L} D={D} d={d} l={l}")
    n = SLICES_PER_LAYER * L
    if kind == KIND_SVD_ALPHA:
        sizes = [D * d, d, d * D] * n
    elif kind == KIND_SVD_BETA:
        sizes = [D * d, d * D] * n
    else:
        sizes = [D * d, d * D, l * d * d, n * l]
    body = data[hs:]
    if len(body) != 8 * sum(sizes):
        raise FormatError(
            f"{path}: payload at offset {hs} has {len(body)} bytes, expected {8 * sum(sizes)}"
        )
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{path}: non-finite values in payload")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    if kind == KIND_SVD_ALPHA:
        u = np.stack([parts[3 * i].reshape(D, d) for i in range(n)])
        s = np.stack([parts[3 * i + 1] for i in range(n)])
        v = np.stack([parts[3 * i + 2].reshape(d, D) for i in range(n)])
        return SvdFactors("alpha", u, v, s)
    if kind == KIND_SVD_BETA:
        u = np.stack([parts[2 * i].reshape(D, d) for i in range(n)])
        v = np.stack([parts[2 * i + 1].reshape(d, D) for i in range(n)])
        return SvdFactors("beta", u, v)
    u, v = parts[0].reshape(D, d), parts[1].reshape(d, D)
    bank = parts[2].reshape(l, d, d)
    p = parts[3].reshape(n, l)
    if kind == KIND_TT:
        if l != n or not np.array_equal(p, np.eye(n)):
            raise FormatError(f"{path}: kind 2 requires l = 12L and an identity mixing matrix")
        return TTFactors(u=u, cores=bank, v=v)
    return TuckerFactors(u=u, v=v, bank=bank, p=p)
