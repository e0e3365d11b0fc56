import csv
import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorcomp import budget as bd
from tensorcomp.decomp import SvdFactors, TTFactors, TuckerFactors, decompose_tucker
from tensorcomp.stack import LayerWeights, TransformerConfig, WeightStack, stack_weights
from tensorcomp.transformer import EncoderParams, FactorCache, transformer_forward


def q(method, L=12, D=768, **kw):
    return bd.BudgetQuery(method, L, D, **kw)


def test_reference_core_counts():
    assert bd.core_params(q("I")) == 84_934_656
    assert bd.core_params(q("III", d=384)) == 21_823_488
    assert bd.core_params(q("IV", d=384, l=72)) == 11_217_024


def test_method_aliases_and_validation():
    assert q("svd", d=4).method == "II-alpha"
    assert q("svd-balanced", d=4).method == "II-beta"
    assert q("tt", d=4).method == "III"
    assert q("iv", d=4, l=3).method == "IV"
    with pytest.raises(ValueError):
        q("V")
    with pytest.raises(ValueError):
        q("III", d=0)
    with pytest.raises(ValueError):
        q("IV", d=4, l=145)
    with pytest.raises(ValueError):
        q("IV", d=4)
    with pytest.raises(ValueError):
        bd.flops_forward(q("I"))


def built(method, L, D, d, l):
    n = 12 * L
    z = np.zeros
    if method == "I":
        return WeightStack(TransformerConfig(L, D), z((n, D, D)))
    if method == "II-alpha":
        return SvdFactors("alpha", z((n, D, d)), z((n, d, D)), z((n, d)))
    if method == "II-beta":
        return SvdFactors("beta", z((n, D, d)), z((n, d, D)))
    if method == "III":
        return TTFactors(z((D, d)), z((n, d, d)), z((d, D)))
    return TuckerFactors(z((D, d)), z((d, D)), z((l, d, d)), z((n, l)))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(bd.METHODS), st.integers(1, 3), st.integers(1, 12), st.data())
def test_core_params_equal_enumeration(method, L, D, data):
    d = data.draw(st.integers(1, D))
    l = data.draw(st.integers(1, 12 * L))
    got = bd.core_params(bd.BudgetQuery(method, L, D, d=d, l=l))
    f = built(method, L, D, d, l)
    if method == "II-alpha":
        # the closed form charges each Sigma_i as a dense d x d block
        dense_sigma = np.stack([np.diag(s) for s in f.s])
        assert got == bd.count_elements(f.u) + bd.count_elements(f.v) + bd.count_elements(dense_sigma)
        assert got - bd.count_elements(f) == 12 * L * (d * d - d)
    else:
        assert got == bd.count_elements(f)


@pytest.mark.parametrize("D", [2, 5, 8])
def test_overhead_equals_enumerated_biases_and_norms(D):
    rng = np.random.default_rng(D)
    L = 3
    enc = EncoderParams.random(TransformerConfig(L, D), 2, rng)
    biases = sum(getattr(lw, b).size for lw in enc.layers for b in ("bq", "bk", "bv", "bo", "b_in", "b_out"))
    assert bd.overhead_params(q("I", L=L, D=D, overhead=True)) == biases + enc.ln_gamma.size + enc.ln_beta.size


def test_embedding_and_total():
    r = bd.report(q("III", d=64, V=100, n_ctx=10, overhead=True))
    assert r.embedding_params == 110 * 768
    assert r.total == r.core_params + r.overhead_params + r.embedding_params
    dense = bd.param_count(q("I", V=100, n_ctx=10, overhead=True))
    assert r.ratio == Fraction(dense, r.total)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 48), st.integers(4, 4096), st.data())
def test_tt_cheaper_than_balanced_svd_cheaper_than_dense(L, D, data):
    d = data.draw(st.integers(1, (D - 1) // 2))
    p = {m: bd.core_params(q(m, L=L, D=D, d=d)) for m in ("I", "II-beta", "III")}
    assert p["III"] < p["II-beta"] < p["I"]


def test_table4_offset_is_constant():
    rows = bd.table4_rows()
    assert [r["paper_params"] for r in rows] == [86.0e6, 23.0e6, 1.8e6, 12.3e6, 3.9e6, 1.9e6]
    offsets = [r["offset"] for r in rows]
    assert max(offsets) - min(offsets) <= 0.3e6
    mid = (max(offsets) + min(offsets)) / 2
    assert all(abs(o - mid) <= 0.15e6 for o in offsets)


@pytest.mark.parametrize("name, paper", [
    ("BERT-base", 22.5e9), ("BERT-III-64", 4.3e9), ("BERT-IV-36-256", 15.2e9), ("BERT-IV-36-128", 8.0e9),
])
def test_table4_flops_within_5_percent(name, paper):
    row = next(r for r in bd.table4_rows() if r["name"] == name)
    assert row["paper_flops"] == paper
    assert abs(row["flops"] / paper - 1) < 0.05


def test_reference_flops():
    assert bd.flops_forward(q("I", b=1, n=128)) == 22_347_251_712
    assert abs(bd.flops_forward(q("III", d=64, b=1, n=128)) / 4.3e9 - 1) < 0.02


@pytest.mark.parametrize("method", ["I", "III", "IV"])
def test_flops_equal_twice_instrumented_forward(method):
    b, n, D, d, L = 1, 8, 16, 4, 1
    rng = np.random.default_rng(0)
    cfg = TransformerConfig(L, D, n_heads=2)
    enc = EncoderParams.random(cfg, 2, rng)
    x = rng.normal(size=(b, n, D))
    l = 12 if method == "III" else 6
    if method == "I":
        count = transformer_forward(x, enc).count
    else:
        tk = decompose_tucker(stack_weights(enc.layers, cfg), l, d, max_iters=0)
        cache = FactorCache(tk).warm()
        count = transformer_forward(x, enc, tk, "IV3", cache=cache).count
    assert bd.flops_forward(q(method, L=L, D=D, d=d, l=l, b=b, n=n)) == 2 * count


def test_table7_within_tolerance_and_monotone_per_family():
    reports = bd.compression_table(bd.table7_rows())
    for rep, row in zip(reports, bd.TABLE7):
        name, family = row[0], row[1]
        tol = 0.03 if name in ("BERT-base-uncased", "GPT-3 175B") else 0.10
        assert abs(rep.total / row[6] - 1) < tol, name
        assert float(rep.ratio) < 8
    for family in ("BERT", "GPT-3"):
        ratios = [float(r.ratio) for r, row in zip(reports, bd.TABLE7) if row[1] == family]
        assert ratios == sorted(ratios) and len(set(ratios)) == len(ratios)


def test_reference_compression_rows():
    base, = bd.compression_table([("b", 12, 768, 30522, 72, 384, 514)])
    assert base.total == 35_052_672
    big, = bd.compression_table([("g", 96, 12288, 50257, 576, 6144, 2048)])
    assert abs(big.total / 22.5e9 - 1) < 0.01


def test_reports_csv():
    buf = io.StringIO()
    bd.write_reports_csv(buf, [bd.report(q("IV", d=384, l=72)), bd.report(q("I", b=1, n=128))])
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert list(rows[0]) == bd.CSV_FIELDS
    assert rows[0]["core_params"] == "11217024" and rows[0]["flops"] == ""
    assert rows[1]["flops"] == "22347251712" and float(rows[1]["ratio"]) == 1.0


def test_count_elements_rejects_unknown():
    with pytest.raises(TypeError):
        bd.count_elements(LayerWeights)
