"""Total-variability model: T-matrix EM training and i-vector extraction.

The extractor solves, per utterance,

    L w = T' Sigma^-1 F,    L = I + sum_c N_c T_c' Sigma_c^-1 T_c

where F are the CENTERED first-order statistics from ``tevkit.gmm``
(so the latent prior mean is zero and no mean-offset term appears),
T_c is the D x R block of T for component c, and Sigma_c the UBM
diagonal covariance.  L is symmetric positive definite for any
non-negative occupancies and is solved by Cholesky factorization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gmm import BaumWelchStats, DiagGmm

logger = logging.getLogger(__name__)


@dataclass
class SpeakerVector:
    """Fixed-length utterance representation (i-vector or d-vector)."""

    values: np.ndarray
    kind: str            # "ivector" | "dvector"
    utt_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("speaker vector must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("speaker vector contains non-finite values")
        if self.kind not in ("ivector", "dvector"):
            raise ValueError(f"unknown vector kind: {self.kind}")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class TotalVariabilityModel:
    T: np.ndarray        # (C*D, R)
    ubm: DiagGmm

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        cd = self.ubm.n_components * self.ubm.dim
        if self.T.ndim != 2 or self.T.shape[0] != cd:
            raise ValueError(f"T must be ({cd}, R)")
        if self.T.shape[1] > cd:
            raise ValueError("i-vector dimension exceeds supervector dimension")
        if not np.all(np.isfinite(self.T)):
            raise ValueError("T contains non-finite values")

    @property
    def rank(self) -> int:
        return self.T.shape[1]

    def blocks(self) -> np.ndarray:
        """T reshaped to per-component (C, D, R) blocks."""
        c, d = self.ubm.n_components, self.ubm.dim
        return self.T.reshape(c, d, self.rank)


def init_tmatrix(ubm: DiagGmm, r: int, seed: int = 0) -> TotalVariabilityModel:
    """Random subspace: i.i.d. standard normals scaled by 0.1 * mean sigma."""
    if r < 1:
        raise ValueError("i-vector dimension must be >= 1")
    cd = ubm.n_components * ubm.dim
    if r > cd:
        raise ValueError(f"i-vector dimension {r} exceeds supervector dimension {cd}")
    rng = np.random.default_rng(seed)
    scale = 0.1 * float(np.mean(np.sqrt(ubm.variances)))
    return TotalVariabilityModel(rng.standard_normal((cd, r)) * scale, ubm)


def _posterior_terms(model: TotalVariabilityModel, stats: BaumWelchStats):
    """Return (L, rhs) of the per-utterance Gaussian posterior over w."""
    ubm = model.ubm
    if stats.zeroth.shape[0] != ubm.n_components or stats.first.shape[1] != ubm.dim:
        raise ValueError("stats shape does not match the UBM")
    if not (np.all(np.isfinite(stats.zeroth)) and np.all(np.isfinite(stats.first))):
        raise ValueError("non-finite statistics")
    blocks = model.blocks()                                   # (C, D, R)
    inv_var = 1.0 / ubm.variances                             # (C, D)
    weighted = blocks * inv_var[:, :, None]                   # Sigma_c^-1 T_c
    gram = np.einsum("cdr,cds->crs", blocks, weighted)        # (C, R, R)
    L = np.eye(model.rank) + np.tensordot(stats.zeroth, gram, axes=1)
    rhs = np.einsum("cdr,cd->r", weighted, stats.first)
    return L, rhs


def extract_ivector(model: TotalVariabilityModel, stats: BaumWelchStats,
                    utt_id: str = "") -> SpeakerVector:
    """Posterior mean of the total-variability factor for one utterance."""
    L, rhs = _posterior_terms(model, stats)
    w = cho_solve(cho_factor(L, lower=True), rhs)
    return SpeakerVector(w, kind="ivector", utt_id=utt_id)


def tv_objective(model: TotalVariabilityModel, stats_list) -> float:
    """T-dependent part of the marginal log-likelihood of the statistics.

    Per utterance this is 0.5 * (rhs' L^-1 rhs - log det L); terms that do
    not involve T are dropped.  EM never decreases this quantity.
    """
    total = 0.0
    for stats in stats_list:
        L, rhs = _posterior_terms(model, stats)
        factor = cho_factor(L, lower=True)
        w = cho_solve(factor, rhs)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        total += 0.5 * (float(rhs @ w) - logdet)
    return total


def train_tmatrix(model: TotalVariabilityModel, stats_list,
                  n_iters: int = 5) -> TotalVariabilityModel:
    """EM re-estimation of T from per-utterance Baum-Welch statistics."""
    stats_list = list(stats_list)
    if len(stats_list) < model.rank:
        raise ValueError(f"need at least {model.rank} utterances, got {len(stats_list)}")
    ubm = model.ubm
    c, d, r = ubm.n_components, ubm.dim, model.rank

    for it in range(n_iters):
        logger.info("T-matrix EM iter %d: objective %.6f",
                    it, tv_objective(model, stats_list))
        acc_a = np.zeros((c, r, r))
        acc_b = np.zeros((c, d, r))
        for stats in stats_list:
            L, rhs = _posterior_terms(model, stats)
            factor = cho_factor(L, lower=True)
            cov = cho_solve(factor, np.eye(r))
            w = cov @ rhs
            eyy = cov + np.outer(w, w)
            acc_a += stats.zeroth[:, None, None] * eyy[None, :, :]
            acc_b += stats.first[:, :, None] * w[None, None, :]
        new_blocks = np.empty((c, d, r))
        for comp in range(c):
            try:
                new_blocks[comp] = np.linalg.solve(acc_a[comp], acc_b[comp].T).T
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"singular M-step normal equations for component {comp}; "
                    "training data is degenerate") from exc
        model = TotalVariabilityModel(new_blocks.reshape(c * d, r), ubm)
    logger.info("T-matrix EM final objective %.6f", tv_objective(model, stats_list))
    return model
