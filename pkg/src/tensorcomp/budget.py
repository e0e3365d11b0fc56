"""Parameter and FLOP accounting for the dense and compressed encoders.

Cost conventions:
  * one multiply-accumulate = 2 FLOPs; bias, residual, softmax, GELU and
    LayerNorm work is not counted;
  * compressed encoders are charged only activation-dependent products,
    i.e. (P_i C) V and friends are assumed precomputed offline;
  * attention charges Q K^T and A V, b * n^2 * D multiplications each.
"""
import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .decomp import SvdFactors, TTFactors, TuckerFactors
from .stack import WeightStack

METHODS = ("I", "II-alpha", "II-beta", "III", "IV")
_ALIASES = {
    "i": "I", "dense": "I",
    "ii-alpha": "II-alpha", "ii-α": "II-alpha", "svd": "II-alpha", "iia": "II-alpha",
    "ii-beta": "II-beta", "ii-β": "II-beta", "svd-balanced": "II-beta", "iib": "II-beta",
    "iii": "III", "tt": "III",
    "iv": "IV", "tucker": "IV",
}


def normalize_method(name: str) -> str:
    key = str(name).strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class BudgetQuery:
    method: str
    L: int
    D: int
    d: int | None = None
    l: int | None = None
    V: int | None = None  # vocabulary size, adds V*D
    n_ctx: int | None = None  # position (+ token type) rows, adds n_ctx*D
    b: int | None = None
    n: int | None = None
    n_heads: int = 1
    overhead: bool = False  # biases and LayerNorms

    def __post_init__(self):
        object.__setattr__(self, "method", normalize_method(self.method))
        if self.L < 1 or self.D < 1:
            raise ValueError("L and D must be positive")
        if self.method != "I":
            if self.d is None or not 1 <= self.d <= self.D:
                raise ValueError(f"rank d={self.d} must be in [1, {self.D}] for method {self.method}")
        if self.method == "IV":
            if self.l is None or not 1 <= self.l <= 12 * self.L:
                raise ValueError(f"bank size l={self.l} must be in [1, {12 * self.L}]")

    def dense(self) -> "BudgetQuery":
        return BudgetQuery("I", self.L, self.D, V=self.V, n_ctx=self.n_ctx, b=self.b, n=self.n,
                           n_heads=self.n_heads, overhead=self.overhead)


@dataclass
class BudgetReport:
    name: str
    method: str
    core_params: int
    overhead_params: int
    embedding_params: int
    flops: int | None
    ratio: Fraction

    @property
    def total(self) -> int:
        return self.core_params + self.overhead_params + self.embedding_params


def core_params(q: BudgetQuery) -> int:
    L, D, d, l = q.L, q.D, q.d, q.l
    if q.method == "I":
        return 12 * L * D * D
    if q.method == "II-alpha":
        return 24 * L * D * d + 12 * L * d * d
    if q.method == "II-beta":
        return 24 * L * D * d
    if q.method == "III":
        return 12 * L * d * d + 2 * D * d
    return l * d * d + 12 * L * l + 2 * D * d


def overhead_params(q: BudgetQuery) -> int:
    if not q.overhead:
        return 0
    # q/k/v/o biases, b_in, b_out, two LayerNorms (gain + shift)
    return q.L * (4 * q.D + 4 * q.D + q.D + 2 * 2 * q.D)


def embedding_params(q: BudgetQuery) -> int:
    return (q.V or 0) * q.D + (q.n_ctx or 0) * q.D


def param_count(q: BudgetQuery) -> int:
    """Core + optional overhead + optional embedding parameters."""
    return core_params(q) + overhead_params(q) + embedding_params(q)


def forward_multiplications(q: BudgetQuery) -> int:
    if q.b is None or q.n is None:
        raise ValueError("FLOPs need batch size b and sequence length n")
    bn = q.b * q.n
    per_block = bn * q.D * q.D if q.method == "I" else 2 * bn * q.D * q.d
    attention = 2 * q.b * q.n * q.n * q.D
    return 12 * q.L * per_block + q.L * attention


def flops_forward(q: BudgetQuery) -> int:
    return 2 * forward_multiplications(q)


def report(q: BudgetQuery, name: str = "") -> BudgetReport:
    flops = flops_forward(q) if q.b is not None and q.n is not None else None
    ratio = Fraction(param_count(q.dense()), param_count(q))
    return BudgetReport(name or q.method, q.method, core_params(q), overhead_params(q),
                        embedding_params(q), flops, ratio)


def count_elements(obj) -> int:
    """Enumeration oracle: number of stored scalars in a constructed object."""
    if isinstance(obj, WeightStack):
        return int(obj.tensor.size)
    if isinstance(obj, SvdFactors):
        return int(obj.u.size + obj.v.size + (obj.s.size if obj.variant == "alpha" else 0))
    if isinstance(obj, TTFactors):
        return int(obj.u.size + obj.cores.size + obj.v.size)
    if isinstance(obj, TuckerFactors):
        return int(obj.u.size + obj.v.size + obj.bank.size + obj.p.size)
    if isinstance(obj, np.ndarray):
        return int(obj.size)
    raise TypeError(f"cannot count elements of {type(obj).__name__}")


# --- presets --------------------------------------------------------------

# (name, method, d, l, reported Para., reported FLOPS); BERT-base shape, b=1, n=128
TABLE4 = [
    ("BERT-base", "I", None, None, 86.0e6, 22.5e9),
    ("BERT-III-384", "III", 384, None, 23.0e6, 22.5e9),
    ("BERT-III-64", "III", 64, None, 1.8e6, 4.3e9),
    ("BERT-IV-72-384", "IV", 384, 72, 12.3e6, 22.5e9),
    ("BERT-IV-36-256", "IV", 256, 36, 3.9e6, 15.2e9),
    ("BERT-IV-36-128", "IV", 128, 36, 1.9e6, 8.0e9),
]

BERT_POSITIONS = 512 + 2  # positions + token types
GPT3_POSITIONS = 2048

# (name, family, L, D, V, n_ctx, reported compressed total, reported ratio)
TABLE7 = [
    ("BERT-base-uncased", "BERT", 12, 768, 30522, BERT_POSITIONS, 35.7e6, 3.1),
    ("BERT-large-uncased", "BERT", 24, 1024, 30522, BERT_POSITIONS, 75.8e6, 4.5),
    ("GPT-3 Small", "GPT-3", 12, 768, 50257, GPT3_POSITIONS, 50.7e6, 2.5),
    ("GPT-3 Medium", "GPT-3", 24, 1024, 50257, GPT3_POSITIONS, 85.8e6, 4.1),
    ("GPT-3 Large", "GPT-3", 24, 1536, 50257, GPT3_POSITIONS, 165.5e6, 4.6),
    ("GPT-3 XL", "GPT-3", 24, 2048, 50257, GPT3_POSITIONS, 243.0e6, 5.3),
    ("GPT-3 2.7B", "GPT-3", 32, 2560, 50257, GPT3_POSITIONS, 498.0e6, 5.4),
    ("GPT-3 6.7B", "GPT-3", 32, 4096, 50257, GPT3_POSITIONS, 1.1e9, 6.3),
    ("GPT-3 13B", "GPT-3", 40, 5140, 50257, GPT3_POSITIONS, 1.9e9, 6.8),
    ("GPT-3 175B", "GPT-3", 96, 12288, 50257, GPT3_POSITIONS, 22.8e9, 7.7),
]


def table4_rows(b=1, n=128, L=12, D=768):
    out = []
    for name, method, d, l, paper_params, paper_flops in TABLE4:
        q = BudgetQuery(method, L, D, d=d, l=l, b=b, n=n)
        out.append({
            "name": name,
            "core_params": core_params(q),
            "paper_params": paper_params,
            "offset": paper_params - core_params(q),
            "flops": flops_forward(q),
            "paper_flops": paper_flops,
            "flops_rel_err": flops_forward(q) / paper_flops - 1.0,
        })
    return out


def compression_table(rows):
    """Tucker compression with embedding, one report per row.

    ``rows`` holds (name, L, D, V, l, d, n_ctx) tuples.
    """
    out = []
    for name, L, D, V, l, d, n_ctx in rows:
        q = BudgetQuery("IV", L, D, d=d, l=l, V=V, n_ctx=n_ctx)
        out.append(report(q, name))
    return out


def table7_rows():
    """Half layer rank (l = 6L) and half dimension rank (d = D/2)."""
    return [(name, L, D, V, 6 * L, D // 2, n_ctx) for name, _, L, D, V, n_ctx, _, _ in TABLE7]


CSV_FIELDS = ["name", "method", "core_params", "overhead_params", "embedding_params", "total", "ratio", "flops"]


def write_reports_csv(fh, reports) -> None:
    w = csv.writer(fh)
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow([r.name, r.method, r.core_params, r.overhead_params, r.embedding_params,
                    r.total, f"{float(r.ratio):.17g}", "" if r.flops is None else r.flops])
