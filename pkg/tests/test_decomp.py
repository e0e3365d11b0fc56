import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorcomp.decomp import (
    TTFactors, TuckerFactors, albert_factors, decompose_svd, decompose_tt,
    decompose_tucker, merge_bank, read_tkf, reconstruct, reconstruct_slice, reconstruction_error,
    tucker_from_tt, write_tkf,
)
from tensorcomp.stack import FormatError, TransformerConfig, WeightStack, random_stack


def orthonormal(rng, n, k):
    q, _ = np.linalg.qr(rng.normal(size=(n, k)))
    return q


def stack_of(tensor):
    n, D, _ = tensor.shape
    return WeightStack(TransformerConfig(L=n // 12, D=D), tensor)


# --- per-slice SVD --------------------------------------------------------

def test_svd_full_rank_and_rank_one():
    ws = random_stack(1, 6, seed=0)
    _, per = reconstruction_error(ws, decompose_svd(ws, 6))
    assert per.max() < 1e-10
    rng = np.random.default_rng(1)
    ones = np.stack([np.outer(rng.normal(size=5), rng.normal(size=5)) for _ in range(12)])
    f = decompose_svd(stack_of(ones), 1)
    assert reconstruction_error(stack_of(ones), f)[0] < 1e-12


def test_svd_alpha_beta_identical():
    ws = random_stack(2, 8, seed=2)
    a = reconstruct(decompose_svd(ws, 3, "alpha"))
    b = reconstruct(decompose_svd(ws, 3, "beta"))
    assert np.max(np.abs(a - b)) < 1e-12


def test_svd_threads_bitwise_equal():
    ws = random_stack(2, 8, seed=3)
    one = decompose_svd(ws, 4, threads=1)
    four = decompose_svd(ws, 4, threads=4)
    assert np.array_equal(one.u, four.u) and np.array_equal(one.v, four.v)


def test_rank_validation():
    ws = random_stack(1, 4, seed=0)
    for bad in (0, 5):
        with pytest.raises(ValueError):
            decompose_svd(ws, bad)
        with pytest.raises(ValueError):
            decompose_tt(ws, bad)
    with pytest.raises(ValueError):
        decompose_tucker(ws, 0, 2)
    with pytest.raises(ValueError):
        decompose_tucker(ws, 13, 2)
    with pytest.raises(ValueError):
        decompose_tucker(ws, 4, 2, tol=0)
    with pytest.raises(ValueError):
        decompose_svd(ws, 2, "gamma")


# --- tensor train ---------------------------------------------------------

def test_tt_full_rank():
    ws = random_stack(2, 6, seed=4)
    assert reconstruction_error(ws, decompose_tt(ws, 6))[0] < 1e-10


def test_tt_planted_factors_recovered():
    rng = np.random.default_rng(5)
    D, d = 10, 3
    u0, v0 = rng.normal(size=(D, d)), rng.normal(size=(d, D))
    W = np.stack([u0 @ rng.normal(size=(d, d)) @ v0 for _ in range(24)])
    assert reconstruction_error(stack_of(W), decompose_tt(stack_of(W), d))[0] < 1e-9


def test_tt_matches_concatenated_svd_oracle():
    ws = random_stack(1, 4, seed=6)
    W = ws.tensor
    # row space spanned by [W_0 W_1 ...], column space by [W_0^T W_1^T ...]
    uo = np.linalg.svd(np.hstack(list(W)))[0][:, :2]
    vo = np.linalg.svd(np.hstack([w.T for w in W]))[0][:, :2]
    approx = np.stack([uo @ uo.T @ w @ vo @ vo.T for w in W])
    want = np.linalg.norm(W - approx) / np.linalg.norm(W)
    got, _ = reconstruction_error(ws, decompose_tt(ws, 2))
    assert abs(got - want) < 1e-9


# --- Tucker ---------------------------------------------------------------

def test_tucker_full_rank():
    ws = random_stack(1, 5, seed=7)
    tk = decompose_tucker(ws, 12, 5)
    assert tk.fit.error < 1e-10
    assert reconstruction_error(ws, tk)[0] < 1e-10


def test_tucker_planted_recovery():
    rng = np.random.default_rng(8)
    D, d, l, n = 9, 3, 4, 24
    u, v = orthonormal(rng, D, d), orthonormal(rng, D, d).T
    bank, p = rng.normal(size=(l, d, d)), rng.normal(size=(n, l))
    W = reconstruct(TuckerFactors(u, v, bank, p))
    tk = decompose_tucker(stack_of(W), l, d)
    assert reconstruction_error(stack_of(W), tk)[0] < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_hooi_error_non_increasing(seed):
    ws = random_stack(1, 8, seed=seed)
    tk = decompose_tucker(ws, 5, 3, tol=1e-12, max_iters=30)
    errs = np.array(tk.fit.errors)
    assert len(errs) >= 2
    assert np.all(np.diff(errs) <= 1e-12)
    assert tk.fit.iterations == len(errs) - 1


def test_hosvd_only_and_fit_report():
    ws = random_stack(1, 6, seed=9)
    tk = decompose_tucker(ws, 4, 3, max_iters=0)
    assert tk.fit.iterations == 0 and tk.fit.converged and len(tk.fit.errors) == 1
    assert np.isclose(tk.fit.error, reconstruction_error(ws, tk)[0], atol=1e-12)


def test_tucker_deterministic():
    ws = random_stack(1, 6, seed=10)
    a, b = decompose_tucker(ws, 5, 3), decompose_tucker(ws, 5, 3)
    assert np.array_equal(reconstruct(a), reconstruct(b))


def test_tucker_bank_larger_than_unfolding_rank():
    # l = 12 exceeds the rank (4) of the mode-1 unfolding of a D=2 stack
    ws = random_stack(1, 2, seed=11)
    tk = decompose_tucker(ws, 12, 2)
    assert np.allclose(tk.p.T @ tk.p, np.eye(12), atol=1e-12)
    assert reconstruction_error(ws, tk)[0] < 1e-10


# --- nested-model and special-case identities ----------------------------

@pytest.mark.parametrize("seed", range(20))
def test_error_ordering_tucker_tt_svd(seed):
    # The bank model is a restriction of the TT model once u, v are fixed,
    # so compare fits that share their bases.
    ws = random_stack(1, 8, seed=100 + seed)
    d = 3
    e_svd = reconstruction_error(ws, decompose_svd(ws, d))[0]
    e_tt = reconstruction_error(ws, decompose_tt(ws, d))[0]
    e_hosvd = reconstruction_error(ws, decompose_tucker(ws, 6, d, max_iters=0))[0]
    assert e_hosvd >= e_tt - 1e-12
    assert e_tt >= e_svd - 1e-12

    tk = decompose_tucker(ws, 6, d)
    cores = np.einsum("ja,ijk,bk->iab", tk.u, ws.tensor, tk.v)
    e_tk = reconstruction_error(ws, tk)[0]
    e_proj = reconstruction_error(ws, TTFactors(tk.u, cores, tk.v))[0]
    assert e_tk >= e_proj - 1e-12
    assert e_proj >= e_svd - 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_tt_equals_tucker_with_full_bank_at_hosvd(seed):
    ws = random_stack(1, 6, seed=seed)
    tt = decompose_tt(ws, 3)
    tk = decompose_tucker(ws, 12, 3, max_iters=0)
    assert np.max(np.abs(reconstruct(tt) - reconstruct(tk))) < 1e-9


def test_tucker_from_tt_and_merge_bank():
    rng = np.random.default_rng(12)
    tt = TTFactors(rng.normal(size=(5, 3)), rng.normal(size=(24, 3, 3)), rng.normal(size=(3, 5)))
    tk = tucker_from_tt(tt)
    assert np.array_equal(tk.p, np.eye(24))
    assert np.array_equal(reconstruct(tk), reconstruct(tt))
    back = merge_bank(tk)
    assert np.array_equal(back.cores, tt.cores)

    rk = TuckerFactors(rng.normal(size=(5, 3)), rng.normal(size=(3, 5)),
                       rng.normal(size=(4, 3, 3)), rng.normal(size=(24, 4)))
    merged = merge_bank(rk)
    assert np.max(np.abs(reconstruct(merged) - reconstruct(rk))) < 1e-12
    assert np.max(np.abs(reconstruct(tucker_from_tt(merged)) - reconstruct(rk))) < 1e-12


def test_albert_factors_tile_shared_layer():
    rng = np.random.default_rng(13)
    core = rng.normal(size=(12, 4, 4))
    tk = albert_factors(core, 3)
    rec = reconstruct(tk)
    for j in range(3):
        for k in range(12):
            assert np.array_equal(rec[12 * j + k], core[k])
    assert tk.bank.size + tk.p.size == 12 * 16 + 36 * 12
    assert np.array_equal(reconstruct(albert_factors(core, 1)), core)
    with pytest.raises(ValueError):
        albert_factors(core[:11], 2)


# --- reconstruction -------------------------------------------------------

def test_reconstruct_slice_selection_and_triple_sum():
    rng = np.random.default_rng(14)
    D, d, l = 4, 2, 3
    tk = TuckerFactors(rng.normal(size=(D, d)), rng.normal(size=(d, D)),
                       rng.normal(size=(l, d, d)), rng.normal(size=(12, l)))
    unit = TuckerFactors(tk.u, tk.v, tk.bank, np.eye(l)[[1] * 12])
    assert np.allclose(reconstruct_slice(unit, 0), tk.u @ tk.bank[1] @ tk.v)
    i = 7
    want = np.zeros((D, D))
    for r in range(D):
        for c in range(D):
            for k in range(l):
                for a in range(d):
                    for b in range(d):
                        want[r, c] += tk.p[i, k] * tk.bank[k, a, b] * tk.u[r, a] * tk.v[b, c]
    assert np.max(np.abs(reconstruct_slice(tk, i) - want)) < 1e-12
    with pytest.raises(IndexError):
        reconstruct_slice(tk, 12)


def test_reconstruction_error_definition_and_zero_stack():
    ws = random_stack(1, 5, seed=15)
    f = decompose_svd(ws, 2)
    approx = reconstruct(f)
    total, per = reconstruction_error(ws, f)
    assert np.isclose(total, np.sqrt(np.sum((ws.tensor - approx) ** 2) / np.sum(ws.tensor**2)), rtol=1e-13)
    assert np.isclose(per[3], np.linalg.norm(ws.tensor[3] - approx[3]) / np.linalg.norm(ws.tensor[3]))
    zero = stack_of(np.zeros((12, 3, 3)))
    zf = TuckerFactors(np.zeros((3, 1)), np.zeros((1, 3)), np.zeros((1, 1, 1)), np.zeros((12, 1)))
    total, per = reconstruction_error(zero, zf)
    assert total == 0 and not per.any()


# --- TKF format -----------------------------------------------------------

@pytest.mark.parametrize("method", ["alpha", "beta", "tt", "tucker"])
def test_tkf_roundtrip(tmp_path, method):
    ws = random_stack(1, 6, seed=16)
    if method in ("alpha", "beta"):
        f = decompose_svd(ws, 3, method)
    elif method == "tt":
        f = decompose_tt(ws, 3)
    else:
        f = decompose_tucker(ws, 5, 3)
    path = tmp_path / "f.tkf"
    write_tkf(path, f)
    back = read_tkf(path)
    assert type(back) is type(f)
    assert np.array_equal(reconstruct(back), reconstruct(f))


def test_tkf_header_layout(tmp_path):
    ws = random_stack(1, 6, seed=17)
    path = tmp_path / "f.tkf"
    write_tkf(path, decompose_tucker(ws, 5, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"TKF1"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 6, 3, 5]
    assert raw[20] == 3 and raw[21] == 1
    assert len(raw) == 24 + 8 * (18 + 18 + 45 + 60)


@pytest.mark.parametrize("offset, value, needle", [(0, 0x58, "offset 0"), (20, 9, "offset 20"), (21, 4, "offset 21")])
def test_tkf_format_errors(tmp_path, offset, value, needle):
    path = tmp_path / "f.tkf"
    write_tkf(path, decompose_tt(random_stack(1, 4, seed=0), 2))
    raw = bytearray(path.read_bytes())
    raw[offset] = value
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=needle):
        read_tkf(path)


def test_tkf_truncated_and_non_identity_tt(tmp_path):
    path = tmp_path / "f.tkf"
    write_tkf(path, decompose_tt(random_stack(1, 4, seed=0), 2))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="offset 24"):
        read_tkf(path)
    bad = bytearray(raw)
    bad[-8:] = np.float64(0.5).tobytes()  # last entry of p, a diagonal 1
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="identity"):
        read_tkf(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31))
def test_reconstructions_always_finite_and_deterministic(D, d, l, seed):
    d = min(d, D)
    ws = random_stack(1, D, seed=seed % 1000)
    for f in (decompose_svd(ws, d), decompose_tt(ws, d), decompose_tucker(ws, l, d, max_iters=5)):
        r = reconstruct(f)
        assert np.all(np.isfinite(r))
    assert np.array_equal(reconstruct(decompose_tt(ws, d)), reconstruct(decompose_tt(ws, d)))
