"""Redundancy diagnostics: PCA curves, factor-vector distances, norms."""
import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .decomp import Factors, TuckerFactors, reconstruct_slice
from .linalg import pca_variance
from .stack import SLICES_PER_LAYER, WeightStack, slice_label

MAX_EXHAUSTIVE_PAIRS = 10_000
SAMPLED_PAIRS = 500


@dataclass
class PcaReport:
    labels: list
    curves: list  # cumulative captured-variance ratios, one array per label
    axis: str | None = None  # None for single slices, "rows" or "cols" for pairs
    pairs: list = field(default_factory=list)

    def at(self, k: int) -> np.ndarray:
        """Captured ratio with k components, per curve."""
        return np.array([c[min(k, len(c)) - 1] for c in self.curves])

    def fraction_above(self, k: int, threshold: float = 0.9) -> float:
        return float(np.mean(self.at(k) > threshold))

    def mean_curve(self) -> np.ndarray:
        return np.mean(np.stack(self.curves), axis=0)

    def summary(self, threshold: float = 0.9) -> float:
        """Fraction of curves capturing more than ``threshold`` at half the components."""
        half = max(1, len(self.curves[0]) // 2)
        return self.fraction_above(half, threshold)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["label", "k", "ratio"])
        for label, curve in zip(self.labels, self.curves):
            for k, r in enumerate(curve, start=1):
                w.writerow([label, k, f"{r:.17g}"])
        for k, r in enumerate(self.mean_curve(), start=1):
            w.writerow(["mean", k, f"{r:.17g}"])


def pca_single(ws: WeightStack) -> PcaReport:
    """One curve per D x D slice (rows are observations)."""
    labels = [slice_label(i) for i in range(ws.n_slices)]
    return PcaReport(labels, [pca_variance(ws.tensor[i]) for i in range(ws.n_slices)])


def pair_indices(n: int, seed: int = 0):
    pairs = list(itertools.combinations(range(n), 2))
    if len(pairs) <= MAX_EXHAUSTIVE_PAIRS:
        return pairs
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(pairs), size=SAMPLED_PAIRS, replace=False))
    return [pairs[i] for i in pick]


def pair_curve(a, b, axis: str) -> np.ndarray:
    """PCA of two matrices concatenated along ``axis``.

    The vectors running along the concatenation axis are the observations:
    ``rows`` stacks [a; b] and uses its 2D rows, ``cols`` stacks [a, b] and
    uses its 2D columns.
    """
    if axis == "rows":
        return pca_variance(np.vstack([a, b]))
    if axis == "cols":
        return pca_variance(np.vstack([np.transpose(a), np.transpose(b)]))
    raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


def pca_pair(ws: WeightStack, axis: str = "cols", seed: int = 0) -> PcaReport:
    pairs = pair_indices(ws.n_slices, seed)
    curves = [pair_curve(ws.tensor[i], ws.tensor[j], axis) for i, j in pairs]
    labels = [f"{slice_label(i)}+{slice_label(j)}" for i, j in pairs]
    return PcaReport(labels, curves, axis=axis, pairs=pairs)


@dataclass
class DistanceMap:
    distances: np.ndarray  # (n, n)
    labels: list
    zero_rows: list = field(default_factory=list)

    def layer_block(self, j: int) -> np.ndarray:
        s = slice(SLICES_PER_LAYER * j, SLICES_PER_LAYER * (j + 1))
        return self.distances[s, s]

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow([""] + self.labels)
        for label, row in zip(self.labels, self.distances):
            w.writerow([label] + [f"{x:.17g}" for x in row])


def cosine_distances(p) -> tuple[np.ndarray, list]:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError(f"need at least 2 factor vectors, got shape {p.shape}")
    norms = np.linalg.norm(p, axis=1)
    zero = [int(i) for i in np.flatnonzero(norms == 0)]
    n = p.shape[0]
    dist = np.ones((n, n))
    safe = np.where(norms > 0, norms, 1.0)
    unit = p / safe[:, None]
    cos = unit @ unit.T
    ok = norms > 0
    both = np.outer(ok, ok)
    dist[both] = 1.0 - cos[both]
    dist = np.clip(dist, 0.0, 2.0)
    upper = np.triu(dist, 1)
    dist = upper + upper.T
    return dist, zero


def factor_distances(tk: TuckerFactors) -> DistanceMap:
    """Cosine distances 1 - cos(P_i, P_j) between rows of the mixing matrix.

    Rows with zero norm are treated as orthogonal to everything (distance 1).
    """
    dist, zero = cosine_distances(tk.p)
    if zero:
        warnings.warn(f"zero-norm factor vectors at rows {zero}; distance set to 1", RuntimeWarning)
    labels = [slice_label(i) for i in range(tk.n_slices)]
    return DistanceMap(dist, labels, zero)


def norm_report(ws: WeightStack, f: Factors):
    """Per-slice Frobenius norms of the raw and reconstructed weights."""
    if f.n_slices != ws.n_slices or f.D != ws.config.D:
        raise ValueError("factors do not match the stack shape")
    raw = np.linalg.norm(ws.tensor, axis=(1, 2))
    rec = np.array([np.linalg.norm(reconstruct_slice(f, i)) for i in range(ws.n_slices)])
    return raw, rec


def write_norms_csv(fh, raw, rec) -> None:
    w = csv.writer(fh)
    w.writerow(["label", "raw_norm", "reconstructed_norm"])
    for i, (a, b) in enumerate(zip(raw, rec)):
        w.writerow([slice_label(i), f"{a:.17g}", f"{b:.17g}"])
