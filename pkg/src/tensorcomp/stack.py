"""Per-layer Transformer weights and the (12L, D, D) weight stack.

Slice order within layer j (offset 12j):
    0..3   Q, K, V, O
    4..7   the four D x D column blocks of w_in
    8..11  the four D x D row blocks of w_out, stored transposed
"""
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

SLICES_PER_LAYER = 12
BLOCK_NAMES = ("Q", "K", "V", "O", "In1", "In2", "In3", "In4", "Out1", "Out2", "Out3", "Out4")

WTS_MAGIC = b"WTS1"
DTYPE_F64 = 1
_WTS_HEADER = struct.Struct("<4sIIB3x")


class FormatError(ValueError):
    """Malformed WTS/TKF file."""


@dataclass(frozen=True)
class TransformerConfig:
    L: int
    D: int
    n_heads: int = 1
    H: int = 4

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.D < 1 or self.n_heads < 1 or self.D % self.n_heads:
            raise ValueError(f"D={self.D} must be divisible by n_heads={self.n_heads}")
        if self.H != 4:
            raise ValueError(f"the stack layout needs H=4 FFN blocks, got H={self.H}")

    @property
    def d_ff(self) -> int:
        return 4 * self.D

    @property
    def d_head(self) -> int:
        return self.D // self.n_heads

    @property
    def n_slices(self) -> int:
        return SLICES_PER_LAYER * self.L


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    bq: np.ndarray = field(default=None)
    bk: np.ndarray = field(default=None)
    bv: np.ndarray = field(default=None)
    bo: np.ndarray = field(default=None)
    b_in: np.ndarray = field(default=None)
    b_out: np.ndarray = field(default=None)

    def __post_init__(self):
        D = np.shape(self.wq)[0]
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                n = 4 * D if f.name == "b_in" else D
                val = np.zeros(n)
            setattr(self, f.name, np.asarray(val, dtype=np.float64))

    @property
    def D(self) -> int:
        return self.wq.shape[0]

    def check(self, cfg: TransformerConfig) -> None:
        D = cfg.D
        shapes = {
            "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
            "w_in": (D, cfg.d_ff), "w_out": (cfg.d_ff, D),
            "bq": (D,), "bk": (D,), "bv": (D,), "bo": (D,),
            "b_in": (cfg.d_ff,), "b_out": (D,),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def random(cls, D: int, rng: np.random.Generator, scale: float | None = None, bias_scale=0.02):
        scale = 1.0 / np.sqrt(D) if scale is None else scale

        def m(r, c):
            return rng.normal(0.0, scale, size=(r, c))

        def b(n):
            return rng.normal(0.0, bias_scale, size=n)

        return cls(
            wq=m(D, D), wk=m(D, D), wv=m(D, D), wo=m(D, D),
            w_in=m(D, 4 * D), w_out=m(4 * D, D),
            bq=b(D), bk=b(D), bv=b(D), bo=b(D), b_in=b(4 * D), b_out=b(D),
        )


@dataclass
class WeightStack:
    config: TransformerConfig
    tensor: np.ndarray  # (12L, D, D)

    def __post_init__(self):
        self.tensor = np.ascontiguousarray(self.tensor, dtype=np.float64)
        cfg = self.config
        expected = (cfg.n_slices, cfg.D, cfg.D)
        if self.tensor.shape != expected:
            raise ValueError(f"stack tensor has shape {self.tensor.shape}, expected {expected}")

    @property
    def n_slices(self) -> int:
        return self.tensor.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tensor[i]


def slice_label(i: int) -> str:
    layer, k = divmod(i, SLICES_PER_LAYER)
    return f"L{layer}.{BLOCK_NAMES[k]}"


def stack_weights(layers, cfg: TransformerConfig) -> WeightStack:
    if len(layers) != cfg.L:
        raise ValueError(f"got {len(layers)} layers, config says L={cfg.L}")
    D = cfg.D
    out = np.empty((cfg.n_slices, D, D))
    for j, lw in enumerate(layers):
        lw.check(cfg)
        base = SLICES_PER_LAYER * j
        out[base + 0] = lw.wq
        out[base + 1] = lw.wk
        out[base + 2] = lw.wv
        out[base + 3] = lw.wo
        for h in range(4):
            out[base + 4 + h] = lw.w_in[:, h * D:(h + 1) * D]
            out[base + 8 + h] = lw.w_out[h * D:(h + 1) * D, :].T
    return WeightStack(cfg, out)


def layer_from_slices(slices: np.ndarray, biases: LayerWeights | None = None) -> LayerWeights:
    """Rebuild one layer from its 12 slices; biases copied from ``biases``."""
    s = slices
    kw = dict(
        wq=s[0].copy(), wk=s[1].copy(), wv=s[2].copy(), wo=s[3].copy(),
        w_in=np.concatenate([s[4 + h] for h in range(4)], axis=1),
        w_out=np.concatenate([s[8 + h].T for h in range(4)], axis=0),
    )
    if biases is not None:
        for name in ("bq", "bk", "bv", "bo", "b_in", "b_out"):
            kw[name] = getattr(biases, name).copy()
    return LayerWeights(**kw)


def unstack(ws: WeightStack, biases=None) -> list[LayerWeights]:
    """Inverse of :func:`stack_weights` on the matrix content.

    ``biases`` is an optional list of LayerWeights whose bias vectors are
    carried over; otherwise biases are zero.
    """
    out = []
    for j in range(ws.config.L):
        sl = ws.tensor[SLICES_PER_LAYER * j:SLICES_PER_LAYER * (j + 1)]
        out.append(layer_from_slices(sl, None if biases is None else biases[j]))
    return out


def random_stack(L: int, D: int, seed: int, n_heads: int = 1) -> WeightStack:
    rng = np.random.default_rng(seed)
    cfg = TransformerConfig(L=L, D=D, n_heads=n_heads)
    layers = [LayerWeights.random(D, rng) for _ in range(L)]
    return stack_weights(layers, cfg)


def write_wts(path, ws: WeightStack) -> None:
    cfg = ws.config
    header = _WTS_HEADER.pack(WTS_MAGIC, cfg.L, cfg.D, DTYPE_F64)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ws.tensor.astype("<f8").tobytes())


def read_wts(path, n_heads: int = 1) -> WeightStack:
    data = Path(path).read_bytes()
    if len(data) < _WTS_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, L, D, dtype = _WTS_HEADER.unpack_from(data, 0)
    if magic != WTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {WTS_MAGIC!r}")
    if dtype != DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype} at offset 12")
    n = SLICES_PER_LAYER * L * D * D
    body = data[_WTS_HEADER.size:]
    if len(body) != 8 * n:
        raise FormatError(
            f"{path}: payload at offset {_WTS_HEADER.size} has {len(body)} bytes, expected {8 * n}"
        )
    tensor = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(SLICES_PER_LAYER * L, D, D)
    if not np.all(np.isfinite(tensor)):
        raise FormatError(f"{path}: non-finite values in payload")
    return WeightStack(TransformerConfig(L=L, D=D, n_heads=n_heads), tensor)
