"""Toy post-LN Transformer encoder, dense or on matrix-bank factors.

Activations are (b, n, D) arrays and weights act on the right (``x @ W``).
Only the encoder's matrix products are charged to a MulCounter; the
classification head is not.
"""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .decomp import TuckerFactors
from .linalg import MulCounter, matmul
from .stack import SLICES_PER_LAYER, LayerWeights, TransformerConfig

ORDERS = ("IV1", "IV2", "IV3")
LN_EPS = 1e-5


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _check_x(x, D):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != D or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"activations must have shape (b, n, {D}), got {x.shape}")
    return x


def _attention(q, k, v, cfg: TransformerConfig, counter):
    """q, k, v: (b, n, D). Returns context (b, n, D) and maps (b, N_h, n, n)."""
    b, n, D = q.shape
    nh, dh = cfg.n_heads, cfg.d_head
    qh = q.reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
    maps = softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh))
    ctx = maps @ vh
    if counter is not None:
        counter.add(b * nh * n, dh, n)  # Q K^T
        counter.add(b * nh * n, n, dh)  # A V
    return ctx.transpose(0, 2, 1, 3).reshape(b, n, D), maps


def _dense_lin(layer: LayerWeights, D: int, counter):
    def lin(k, xf):
        if k < 4:
            w = (layer.wq, layer.wk, layer.wv, layer.wo)[k]
        elif k < 8:
            h = k - 4
            w = layer.w_in[:, h * D:(h + 1) * D]
        else:
            h = k - 8
            w = layer.w_out[h * D:(h + 1) * D, :]
        return matmul(xf, w, counter)

    return lin


def _san(x, lin, layer: LayerWeights, cfg, counter):
    b, n, D = x.shape
    xf = x.reshape(b * n, D)
    q = (lin(0, xf) + layer.bq).reshape(b, n, D)
    k = (lin(1, xf) + layer.bk).reshape(b, n, D)
    v = (lin(2, xf) + layer.bv).reshape(b, n, D)
    ctx, maps = _attention(q, k, v, cfg, counter)
    y = lin(3, ctx.reshape(b * n, D)) + layer.bo
    return y.reshape(b, n, D), maps


def san_forward(x, layer: LayerWeights, cfg: TransformerConfig, mode="monolithic", counter=None):
    """Multi-head self-attention; ``headsum`` evaluates it as a sum of
    independently computed per-head outputs."""
    x = _check_x(x, cfg.D)
    layer.check(cfg)
    if mode == "monolithic":
        return _san(x, _dense_lin(layer, cfg.D, counter), layer, cfg, counter)
    if mode != "headsum":
        raise ValueError(f"unknown SAN mode {mode!r}")
    b, n, D = x.shape
    dh = cfg.d_head
    xf = x.reshape(b * n, D)
    y = np.zeros((b * n, D))
    maps = []
    for h in range(cfg.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = (xf @ layer.wq[:, cols] + layer.bq[cols]).reshape(b, n, dh)
        k = (xf @ layer.wk[:, cols] + layer.bk[cols]).reshape(b, n, dh)
        v = (xf @ layer.wv[:, cols] + layer.bv[cols]).reshape(b, n, dh)
        a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
        maps.append(a)
        y += (a @ v).reshape(b * n, dh) @ layer.wo[cols, :]
    y += layer.bo
    return y.reshape(b, n, D), np.stack(maps, axis=1)


def _ffn_subsum(x, lin, layer: LayerWeights, H=4):
    b, n, D = x.shape
    xf = x.reshape(b * n, D)
    y = np.zeros((b * n, D))
    for h in range(H):
        hidden = gelu(lin(4 + h, xf) + layer.b_in[h * D:(h + 1) * D])
        y += lin(8 + h, hidden) + layer.b_out / H
    return y.reshape(b, n, D)


def ffn_forward(x, layer: LayerWeights, mode="monolithic", n_splits=4, counter=None):
    """GELU feed-forward; ``subsum`` sums ``n_splits`` thin sub-FFNs, each
    taking ``b_out / n_splits`` of the output bias."""
    D = layer.D
    x = _check_x(x, D)
    d_ff = layer.w_in.shape[1]
    if layer.w_in.shape != (D, d_ff) or layer.w_out.shape != (d_ff, D):
        raise ValueError("w_in / w_out shapes are inconsistent")
    b, n, _ = x.shape
    xf = x.reshape(b * n, D)
    if mode == "monolithic":
        hidden = gelu(matmul(xf, layer.w_in, counter) + layer.b_in)
        return (matmul(hidden, layer.w_out, counter) + layer.b_out).reshape(b, n, D)
    if mode != "subsum":
        raise ValueError(f"unknown FFN mode {mode!r}")
    if d_ff % n_splits:
        raise ValueError(f"d_ff={d_ff} not divisible by {n_splits}")
    w = d_ff // n_splits
    y = np.zeros((b * n, D))
    for h in range(n_splits):
        cols = slice(h * w, (h + 1) * w)
        hidden = gelu(matmul(xf, layer.w_in[:, cols], counter) + layer.b_in[cols])
        y += matmul(hidden, layer.w_out[cols, :], counter) + layer.b_out / n_splits
    return y.reshape(b, n, D)


class FactorCache:
    """Offline products that do not depend on the activations.

    For slice i: (P_i C) V, and for transposed application (U P_i C)^T.
    """

    def __init__(self, tk: TuckerFactors):
        self.tk = tk
        self._store = {}

    def warm(self):
        for i in range(self.tk.n_slices):
            # only Out blocks (8..11 in each layer) are applied transposed
            self.get(i, i % SLICES_PER_LAYER >= 8)
        return self

    def get(self, i, transpose):
        key = (i, transpose)
        if key not in self._store:
            m = self.tk.mixed(i)
            self._store[key] = (self.tk.u @ m).T if transpose else m @ self.tk.v
        return self._store[key]


def factored_linear(x_flat, i, tk: TuckerFactors, order="IV3", counter=None, transpose=False, cache=None):
    """``x_flat @ W_i`` (or ``@ W_i.T``) with W_i = U (P_i C) V, evaluated in
    the given multiplication order. With ``cache`` the activation-independent
    product is taken from the cache and not charged to the counter."""
    if not 0 <= i < tk.n_slices:
        raise IndexError(f"slice index {i} out of range [0, {tk.n_slices})")
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
    if cache is not None and order == "IV3":
        # X U [(P_i C) V]   or   X V^T [(U P_i C)^T]
        left = tk.v.T if transpose else tk.u
        return matmul(matmul(x_flat, left, counter), cache.get(i, transpose), counter)

    l, d = tk.bank_size, tk.rank
    pc = matmul(tk.p[i][None, :], tk.bank.reshape(l, d * d), counter).reshape(d, d)
    u, v = tk.u, tk.v
    if transpose:
        # W^T = V^T (P_i C)^T U^T has the same chain structure
        u, v, pc = v.T, u.T, pc.T
    if order == "IV1":
        w = matmul(matmul(u, pc, counter), v, counter)
        return matmul(x_flat, w, counter)
    xu = matmul(x_flat, u, counter)
    if order == "IV2":
        return matmul(matmul(xu, pc, counter), v, counter)
    return matmul(xu, matmul(pc, v, counter), counter)


def table3_count(order, b, n, D, d, l) -> int:
    """Closed-form multiplication counts of the three orderings."""
    bn = b * n
    if order == "IV1":
        return bn * D * D + D * d * d + D * D * d + l * d * d
    if order == "IV2":
        return 2 * bn * D * d + bn * d * d + l * d * d
    if order == "IV3":
        return 2 * bn * D * d + D * d * d + l * d * d
    raise ValueError(f"unknown order {order!r}")


@dataclass
class EncoderParams:
    """Dense layer weights plus everything that is never decomposed.

    In factored mode only the biases of ``layers`` are used.
    """

    config: TransformerConfig
    layers: list
    ln_gamma: np.ndarray  # (L, 2, D)
    ln_beta: np.ndarray  # (L, 2, D)
    head_w: np.ndarray  # (D, n_classes)
    head_b: np.ndarray  # (n_classes,)

    @classmethod
    def random(cls, cfg: TransformerConfig, n_classes: int, rng: np.random.Generator):
        layers = [LayerWeights.random(cfg.D, rng) for _ in range(cfg.L)]
        return cls(
            config=cfg,
            layers=layers,
            ln_gamma=np.ones((cfg.L, 2, cfg.D)),
            ln_beta=np.zeros((cfg.L, 2, cfg.D)),
            head_w=rng.normal(0.0, 1.0 / np.sqrt(cfg.D), size=(cfg.D, n_classes)),
            head_b=np.zeros(n_classes),
        )


@dataclass
class ForwardTrace:
    attention: list  # per layer, (b, N_h, n, n)
    hidden: np.ndarray  # last layer, (b, n, D)
    logits: np.ndarray  # (b, n_classes)
    count: int = 0
    hiddens: list = field(default_factory=list)


def transformer_forward(
    x,
    params: EncoderParams,
    factors: TuckerFactors | None = None,
    order="IV3",
    counter: MulCounter | None = None,
    precompute=False,
    cache: FactorCache | None = None,
) -> ForwardTrace:
    """Full L-layer pass. Dense when ``factors`` is None, otherwise every
    D x D block is applied through ``factored_linear`` in ``order``.
    ``precompute`` (or an explicit, possibly warm ``cache``) takes the
    activation-independent products from the offline cache (IV3 only)."""
    cfg = params.config
    D = cfg.D
    x = _check_x(x, D)
    counter = MulCounter() if counter is None else counter
    start = counter.count
    if factors is not None:
        if factors.n_slices != cfg.n_slices or factors.D != D:
            raise ValueError("factors do not match the encoder config")
        if precompute or cache is not None:
            if order != "IV3":
                raise ValueError("precompute cache applies to order IV3 only")
            if cache is None:
                cache = FactorCache(factors)
            elif cache.tk is not factors:
                raise ValueError("cache was built for different factors")
    maps_all, hiddens = [], []
    for j, layer in enumerate(params.layers):
        if factors is None:
            lin = _dense_lin(layer, D, counter)
        else:
            base = SLICES_PER_LAYER * j

            def lin(k, xf, base=base):
                return factored_linear(xf, base + k, factors, order, counter, transpose=k >= 8, cache=cache)

        a, maps = _san(x, lin, layer, cfg, counter)
        x = layer_norm(x + a, params.ln_gamma[j, 0], params.ln_beta[j, 0])
        f = _ffn_subsum(x, lin, layer)
        x = layer_norm(x + f, params.ln_gamma[j, 1], params.ln_beta[j, 1])
        maps_all.append(maps)
        hiddens.append(x)
    logits = x.mean(axis=1) @ params.head_w + params.head_b
    return ForwardTrace(maps_all, x, logits, counter.count - start, hiddens)


def benchmark_forward(D=512, d=64, n=128, reps=10, L=1, b=1, l=None, n_heads=8, seed=0):
    """Wall-clock of dense vs factored (IV3, warm cache) forward passes.

    Returns median and interquartile range in seconds for both. Factors
    are the HOSVD of the random dense encoder's stack.
    """
    from .decomp import decompose_tucker
    from .stack import stack_weights

    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = TransformerConfig(L=L, D=D, n_heads=n_heads)
    params = EncoderParams.random(cfg, 2, rng)
    l = cfg.n_slices if l is None else l
    tk = decompose_tucker(stack_weights(params.layers, cfg), l, d, max_iters=0)
    cache = FactorCache(tk).warm()
    x = rng.normal(size=(b, n, D))

    def timed(fn):
        fn()  # warm-up
        out = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
        q1, med, q3 = np.percentile(out, [25, 50, 75])
        return {"median": float(med), "iqr": float(q3 - q1), "times": out}

    dense = timed(lambda: transformer_forward(x, params))
    factored = timed(lambda: transformer_forward(x, params, tk, "IV3", cache=cache))
    return {"dense": dense, "factored": factored}
