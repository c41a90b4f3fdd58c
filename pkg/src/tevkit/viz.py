"""t-SNE projection of frame-level features to 2-D.

Exact O(N^2) affinities, intended for a few thousand points at most.
Pairwise squared distances are computed from explicit coordinate
differences (never the expanded norm identity), so translating every
input by the same exactly-representable vector leaves the distance
matrix, and therefore the whole trajectory, bit-identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

ENTROPY_TOL = 1e-5
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
_ROW_BLOCK = 64
_FEAT_BLOCK = 64


@dataclass
class EmbeddingPlot:
    points: np.ndarray           # (N, 2)
    labels: list                 # (spk_id, style) per point, input order

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must be (N, 2)")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite coordinates")
        if len(self.labels) != self.points.shape[0]:
            raise ValueError("labels must align with points")


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared distances from explicit differences, block-wise."""
    n, d = x.shape
    out = np.zeros((n, n))
    for lo in range(0, n, _ROW_BLOCK):
        hi = min(lo + _ROW_BLOCK, n)
        acc = np.zeros((hi - lo, n))
        for flo in range(0, d, _FEAT_BLOCK):
            fhi = min(flo + _FEAT_BLOCK, d)
            diff = x[lo:hi, None, flo:fhi] - x[None, :, flo:fhi]
            acc += np.einsum("ijk,ijk->ij", diff, diff)
        out[lo:hi] = acc
    return out


def _conditional_probs(d2_row: np.ndarray, i: int, target_entropy: float) -> np.ndarray:
    """p_{j|i} with the bandwidth bisected to the target entropy."""
    d = np.delete(d2_row, i)

    def entropy_and_p(beta: float):
        logits = -beta * d
        logits -= logits.max()
        p = np.exp(logits)
        z = p.sum()
        p /= z
        nz = p > 0
        h = -np.sum(p[nz] * np.log(p[nz]))
        return h, p

    beta = 1.0
    h, p = entropy_and_p(beta)
    lo, hi = None, None
    for _ in range(200):
        if abs(h - target_entropy) < ENTROPY_TOL:
            break
        if h > target_entropy:      # too flat: raise beta
            lo = beta
            beta = beta * 2.0 if hi is None else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = beta / 2.0 if lo is None else 0.5 * (beta + lo)
        h, p = entropy_and_p(beta)
    else:
        raise ValueError(f"perplexity infeasible at point {i} "
                         f"(entropy {h:.6f}, target {target_entropy:.6f})")
    full = np.zeros(d2_row.shape[0])
    full[np.arange(full.shape[0]) != i] = p
    return full


def _joint_probs(x: np.ndarray, perplexity: float) -> np.ndarray:
    d2 = _pairwise_sq_dists(x)
    n = x.shape[0]
    target = np.log(perplexity)
    cond = np.empty((n, n))
    for i in range(n):
        cond[i] = _conditional_probs(d2[i], i, target)
    p = (cond + cond.T) / (2.0 * n)
    return np.maximum(p, 1e-12)


def tsne(points, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, kl_log: list | None = None) -> np.ndarray:
    """Project (N, D) points to (N, 2) by minimizing the KL divergence
    between Gaussian input affinities and Student-t output affinities.

    Early exaggeration x12 for the first 250 iterations; momentum 0.5
    switching to 0.8 at iteration 250.  Deterministic per seed.  If
    kl_log is a list, the (unexaggerated) KL value is appended each
    iteration.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be (N, D)")
    n = x.shape[0]
    if n < 5:
        raise ValueError("need at least 5 points")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    if not (perplexity > 0 and perplexity < n / 3):
        raise ValueError("perplexity must satisfy 0 < perplexity < N/3")

    p = _joint_probs(x, perplexity)
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)

    for it in range(iters):
        d2y = _pairwise_sq_dists(y)
        num = 1.0 / (1.0 + d2y)
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)

        p_eff = p * EXAGGERATION if it < EXAGGERATION_ITERS else p
        w = (p_eff - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)

        momentum = MOMENTUM_EARLY if it < EXAGGERATION_ITERS else MOMENTUM_LATE
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)

        if kl_log is not None:
            mask = ~np.eye(n, dtype=bool)
            kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
            kl_log.append(kl)
    return y


def export_plot_data(path, proj, labels, meta: dict | None = None) -> EmbeddingPlot:
    """Write one point per line (spk_id, style, x, y), grouped by
    speaker then style; hyperparameter metadata goes into '#' header
    lines."""
    plot = EmbeddingPlot(points=proj, labels=list(labels))
    order = sorted(range(len(plot.labels)), key=lambda i: (plot.labels[i][0], plot.labels[i][1], i))
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(meta or {}):
            f.write(f"# {key} {meta[key]}\n")
        for i in order:
            spk, style = plot.labels[i]
            x, yv = plot.points[i]
            f.write(f"{spk}\t{style}\t{float(x)!r}\t{float(yv)!r}\n")
    return plot


def subsample_frames(features: np.ndarray, max_frames: int, seed: int = 0) -> np.ndarray:
    """Seeded cap on frames per group, keeping temporal order."""
    n = features.shape[0]
    if n <= max_frames:
        return features
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=max_frames, replace=False))
    return features[idx]
