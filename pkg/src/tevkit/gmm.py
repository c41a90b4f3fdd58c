"""Diagonal-covariance GMM (the UBM): EM training and sufficient statistics.

Responsibilities are always computed in the log domain with log-sum-exp;
utterances here can be as short as a couple of dozen frames and linear-
domain products underflow immediately.

First-order statistics are CENTERED: F_c sums posterior-weighted
``x - mu_c``.  The i-vector extractor relies on this convention (its
linear system then has prior mean zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dsp import FeatureMatrix


@dataclass
class DiagGmm:
    weights: np.ndarray     # (C,) simplex
    means: np.ndarray       # (C, D)
    variances: np.ndarray   # (C, D), strictly positive

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape or self.weights.shape != (self.means.shape[0],):
            raise ValueError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("component weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class BaumWelchStats:
    """Zeroth/first-order statistics of one or more utterances under a UBM."""

    zeroth: np.ndarray   # (C,) occupancies
    first: np.ndarray    # (C, D) posterior-weighted, mean-centered sums
    n_frames: float

    def __post_init__(self):
        self.zeroth = np.asarray(self.zeroth, dtype=np.float64)
        self.first = np.asarray(self.first, dtype=np.float64)
        if self.first.shape[0] != self.zeroth.shape[0]:
            raise ValueError("inconsistent stats shapes")
        if np.any(self.zeroth < -1e-10):
            raise ValueError("negative occupancy")


@dataclass
class EmConfig:
    n_components: int
    n_iters: int = 4
    variance_floor: float = 1e-3   # fraction of the global per-dim variance
    init: str = "binary-split"
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("binary-split", "kmeans"):
            raise ValueError(f"unknown init method: {self.init}")
        if self.init == "binary-split" and self.n_components & (self.n_components - 1):
            raise ValueError("binary-split init needs a power-of-two component count")


def _log_gauss(gmm: DiagGmm, x: np.ndarray) -> np.ndarray:
    """Per-frame, per-component log w_c + log N(x; mu_c, sigma2_c); x is (n, D)."""
    inv_var = 1.0 / gmm.variances
    const = -0.5 * (gmm.dim * np.log(2.0 * np.pi)
                    + np.sum(np.log(gmm.variances), axis=1)
                    + np.sum(gmm.means ** 2 * inv_var, axis=1))
    quad = x ** 2 @ inv_var.T - 2.0 * (x @ (gmm.means * inv_var).T)
    return np.log(gmm.weights)[None, :] + const[None, :] - 0.5 * quad


def log_likelihood(gmm: DiagGmm, x: np.ndarray) -> float:
    """Total log-likelihood of the frames (n, D) under the mixture."""
    return float(np.sum(logsumexp(_log_gauss(gmm, np.atleast_2d(x)), axis=1)))


def posteriors(gmm: DiagGmm, frame: np.ndarray) -> np.ndarray:
    """Component responsibilities; accepts one frame (D,) or a matrix (n, D)."""
    x = np.asarray(frame, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != gmm.dim:
        raise ValueError(f"frame dim {x.shape[1]} != gmm dim {gmm.dim}")
    logp = _log_gauss(gmm, x)
    gamma = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return gamma[0] if single else gamma


def accumulate_stats(gmm: DiagGmm, f: FeatureMatrix,
                     deterministic: bool = False) -> BaumWelchStats:
    """Baum-Welch statistics of an utterance: N_c and centered F_c.

    ``deterministic`` sorts each reduction's summands first, which makes
    the result exactly invariant to frame order.
    """
    x = f.values
    if x.shape[1] != gmm.dim:
        raise ValueError(f"feature dim {x.shape[1]} != gmm dim {gmm.dim}")
    gamma = posteriors(gmm, x)                    # (n, C)
    if deterministic:
        zeroth = np.sum(np.sort(gamma, axis=0), axis=0)
        first = np.empty((gmm.n_components, gmm.dim))
        for c in range(gmm.n_components):
            contrib = gamma[:, c:c + 1] * (x - gmm.means[c])
            first[c] = np.sum(np.sort(contrib, axis=0), axis=0)
    else:
        zeroth = gamma.sum(axis=0)
        first = gamma.T @ x - zeroth[:, None] * gmm.means
    return BaumWelchStats(zeroth, first, n_frames=float(x.shape[0]))


def zero_stats(n_components: int, dim: int) -> BaumWelchStats:
    return BaumWelchStats(np.zeros(n_components), np.zeros((n_components, dim)), 0.0)


def merge_stats(a: BaumWelchStats, b: BaumWelchStats) -> BaumWelchStats:
    if a.zeroth.shape != b.zeroth.shape or a.first.shape != b.first.shape:
        raise ValueError("cannot merge stats of different shapes")
    return BaumWelchStats(a.zeroth + b.zeroth, a.first + b.first,
                          a.n_frames + b.n_frames)


# --------------------------------------------------------------------------
# EM training
# --------------------------------------------------------------------------

def _m_step(x: np.ndarray, gamma: np.ndarray, var_floor: np.ndarray) -> DiagGmm:
    n_c = gamma.sum(axis=0)
    n_safe = np.maximum(n_c, 1e-10)
    means = (gamma.T @ x) / n_safe[:, None]
    second = (gamma.T @ (x ** 2)) / n_safe[:, None]
    variances = np.maximum(second - means ** 2, var_floor[None, :])
    weights = n_c / n_c.sum()
    return DiagGmm(weights, means, variances)


def em_fit(gmm: DiagGmm, x: np.ndarray, n_iters: int,
           var_floor: np.ndarray | None = None) -> tuple[DiagGmm, list[float]]:
    """Run EM iterations; returns the model and the per-iteration total
    log-likelihood (evaluated before each M-step)."""
    if var_floor is None:
        var_floor = 1e-3 * x.var(axis=0)
    history = []
    for _ in range(n_iters):
        logp = _log_gauss(gmm, x)
        per_frame = logsumexp(logp, axis=1)
        history.append(float(per_frame.sum()))
        gamma = np.exp(logp - per_frame[:, None])
        gmm = _m_step(x, gamma, var_floor)
    return gmm, history


def _ml_single_component(x: np.ndarray, var_floor: np.ndarray) -> DiagGmm:
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), var_floor)
    return DiagGmm(np.ones(1), mean[None, :], var[None, :])


def _binary_split(gmm: DiagGmm) -> DiagGmm:
    sigma = np.sqrt(gmm.variances)
    means = np.vstack([gmm.means + 0.2 * sigma, gmm.means - 0.2 * sigma])
    variances = np.vstack([gmm.variances, gmm.variances])
    weights = np.concatenate([gmm.weights, gmm.weights]) / 2.0
    return DiagGmm(weights, means, variances)


def _kmeans_init(x: np.ndarray, n_components: int, seed: int,
                 var_floor: np.ndarray, n_iters: int = 10) -> DiagGmm:
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(x.shape[0], size=n_components, replace=False)]
    for _ in range(n_iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for c in range(n_components):
            sel = x[assign == c]
            if sel.shape[0] > 0:
                centers[c] = sel.mean(axis=0)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    counts = np.bincount(assign, minlength=n_components).astype(np.float64)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    variances = np.tile(np.maximum(x.var(axis=0), var_floor), (n_components, 1))
    return DiagGmm(weights, centers, variances)


def train_ubm(features, cfg: EmConfig) -> DiagGmm:
    """Train the UBM on a stream/list of FeatureMatrix (or one big matrix).

    Binary-split initialization: fit one component in closed form, then
    repeatedly perturb means by +/- 0.2 sigma, double the component
    count, and re-run EM until the target count is reached.
    """
    if isinstance(features, FeatureMatrix):
        features = [features]
    if isinstance(features, np.ndarray):
        x = features
    else:
        x = np.vstack([f.values for f in features])
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in training features")
    if x.shape[0] < 10 * cfg.n_components:
        raise ValueError(
            f"{x.shape[0]} frames is too few for {cfg.n_components} components "
            f"(need at least {10 * cfg.n_components})")

    var_floor = cfg.variance_floor * x.var(axis=0)
    if cfg.init == "kmeans":
        gmm = _kmeans_init(x, cfg.n_components, cfg.seed, var_floor)
        gmm, _ = em_fit(gmm, x, cfg.n_iters, var_floor)
        return gmm

    gmm = _ml_single_component(x, var_floor)
    while gmm.n_components < cfg.n_components:
        gmm = _binary_split(gmm)
        gmm, _ = em_fit(gmm, x, cfg.n_iters, var_floor)
    return gmm
