"""Scoring backends shared by i-vectors and d-vectors.

Three scoring routes: plain cosine, cosine after an LDA projection, and
log-likelihood-ratio scoring under a two-covariance PLDA model.  Length
normalization is applied upstream of LDA and PLDA for both vector kinds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tvspace import SpeakerVector

logger = logging.getLogger(__name__)

# ridge added to scatter/covariance matrices before inversion,
# relative to the mean diagonal element
RIDGE_EPS = 1e-6


class ScoringMethod(str, Enum):
    COSINE = "cosine"
    LDA_COSINE = "lda-cosine"
    PLDA = "plda"


def _as_array(v) -> np.ndarray:
    if isinstance(v, SpeakerVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def cosine_score(a, b) -> float:
    """a.b / (|a||b|); rejects zero vectors."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError("dimension mismatch")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.dot(x, y) / (nx * ny))


def length_normalize(v):
    """Scale to unit euclidean norm; zero vectors are an error."""
    x = _as_array(v)
    n = np.linalg.norm(x)
    if n == 0.0:
        raise ValueError("cannot length-normalize a zero vector")
    out = x / n
    if isinstance(v, SpeakerVector):
        return SpeakerVector(out, kind=v.kind, utt_id=v.utt_id)
    return out


# ---------------------------------------------------------------------------
# LDA
# ---------------------------------------------------------------------------

@dataclass
class LdaTransform:
    projection: np.ndarray      # (D, K), columns ordered by decreasing eigenvalue
    mean: np.ndarray            # (D,)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.projection.ndim != 2 or self.mean.ndim != 1:
            raise ValueError("projection must be 2-D, mean 1-D")
        if self.projection.shape[0] != self.mean.shape[0]:
            raise ValueError("projection rows must match mean length")

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def project(self, v):
        x = _as_array(v)
        out = (x - self.mean) @ self.projection
        if isinstance(v, SpeakerVector):
            return SpeakerVector(out, kind=v.kind, utt_id=v.utt_id)
        return out


def _class_partition(vectors: np.ndarray, labels) -> dict:
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return {lab: vectors[idx] for lab, idx in groups.items()}


def train_lda(vectors, labels, k: int) -> LdaTransform:
    """Fisher LDA via whitening of the within-class scatter.

    Sw gets a ridge of RIDGE_EPS * tr(Sw)/D before the symmetric
    eigendecomposition; K must not exceed min(D, n_classes - 1).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be (n, D)")
    n, d = x.shape
    if len(labels) != n:
        raise ValueError("labels length mismatch")
    groups = _class_partition(x, labels)
    if len(groups) < 2:
        raise ValueError("need at least 2 classes")
    for lab, g in groups.items():
        if g.shape[0] < 2:
            raise ValueError(f"class {lab!r} has fewer than 2 vectors")
    if not (1 <= k <= min(d, len(groups) - 1)):
        raise ValueError(f"K must be in [1, {min(d, len(groups) - 1)}]")

    mu = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for g in groups.values():
        cm = g.mean(axis=0)
        centered = g - cm
        sw += centered.T @ centered
        diff = cm - mu
        sb += g.shape[0] * np.outer(diff, diff)
    sw /= n
    sb /= n
    sw += (RIDGE_EPS * np.trace(sw) / d) * np.eye(d)

    # whiten Sw, then symmetric eig on the whitened Sb
    evals, evecs = np.linalg.eigh(sw)
    whiten = evecs @ np.diag(1.0 / np.sqrt(evals)) @ evecs.T
    m = whiten @ sb @ whiten
    m = 0.5 * (m + m.T)
    wvals, wvecs = np.linalg.eigh(m)
    order = np.argsort(wvals)[::-1][:k]
    proj = whiten @ wvecs[:, order]
    # deterministic column signs: largest-magnitude entry positive
    for j in range(proj.shape[1]):
        i = int(np.argmax(np.abs(proj[:, j])))
        if proj[i, j] < 0:
            proj[:, j] = -proj[:, j]
    return LdaTransform(projection=proj, mean=mu)


# ---------------------------------------------------------------------------
# Two-covariance PLDA
# ---------------------------------------------------------------------------

@dataclass
class PldaModel:
    """x = y + noise with y ~ N(mu, between_cov), noise ~ N(0, within_cov)."""

    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    ll_history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.between_cov = np.asarray(self.between_cov, dtype=np.float64)
        self.within_cov = np.asarray(self.within_cov, dtype=np.float64)
        d = self.mu.shape[0]
        if self.between_cov.shape != (d, d) or self.within_cov.shape != (d, d):
            raise ValueError("covariance shapes must match mu")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _class_stats(x: np.ndarray, labels):
    """Per-class (count, mean, scatter-about-mean) after global centering."""
    out = []
    for g in _class_partition(x, labels).values():
        m = g.mean(axis=0)
        c = g - m
        out.append((g.shape[0], m, c.T @ c))
    return out


def plda_marginal_ll(model: PldaModel, vectors, labels) -> float:
    """Exact log p(data) under the model, summed over classes.

    For a class of n vectors the joint covariance block-diagonalizes into
    (W + nB) along the mean direction and W on the n-1 residual
    directions.
    """
    x = np.asarray(vectors, dtype=np.float64) - model.mu
    b, w = model.between_cov, model.within_cov
    d = model.dim
    sign_w, logdet_w = np.linalg.slogdet(w)
    if sign_w <= 0:
        raise ValueError("within covariance is not positive definite")
    w_inv = np.linalg.inv(w)
    total = 0.0
    for n_s, m_s, s_s in _class_stats(x, labels):
        sign, logdet_mix = np.linalg.slogdet(w + n_s * b)
        if sign <= 0:
            raise ValueError("W + nB is not positive definite")
        quad_mean = n_s * float(m_s @ np.linalg.solve(w + n_s * b, m_s))
        total += -0.5 * (n_s * d * np.log(2.0 * np.pi)
                         + (n_s - 1) * logdet_w + logdet_mix
                         + float(np.trace(w_inv @ s_s)) + quad_mean)
    return total


def train_plda(vectors, labels, n_iters: int = 10) -> PldaModel:
    """EM for the two-covariance model; mu is fixed at the global mean.

    The returned model's ll_history holds the marginal log-likelihood
    evaluated before each update (non-decreasing).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be (n, D)")
    n, d = x.shape
    groups = _class_partition(x, labels)
    if len(groups) < 2:
        raise ValueError("need at least 2 classes")
    for lab, g in groups.items():
        if g.shape[0] < 2:
            raise ValueError(f"class {lab!r} has fewer than 2 vectors")

    mu = x.mean(axis=0)
    centered = x - mu
    stats = _class_stats(centered, labels)
    n_classes = len(stats)

    # moment-based start
    ridge = lambda m: m + (RIDGE_EPS * max(np.trace(m), 1.0) / d) * np.eye(d)
    w = ridge(sum(s for _, _, s in stats) / n)
    b = ridge(sum(ns * np.outer(ms, ms) for ns, ms, _ in stats) / n)

    model = PldaModel(mu=mu, between_cov=b, within_cov=w)
    for it in range(n_iters):
        ll = plda_marginal_ll(model, x, labels)
        model.ll_history.append(ll)
        b_cur, w_cur = model.between_cov, model.within_cov
        b_new = np.zeros((d, d))
        w_new = np.zeros((d, d))
        for n_s, m_s, s_s in stats:
            # posterior of the class variable: N(y_hat, post_cov);
            # the B(B + W/n)^-1 form never inverts B itself, so a
            # collapsed between covariance stays legal
            try:
                gain = np.linalg.solve(b_cur + w_cur / n_s, b_cur)
            except np.linalg.LinAlgError:
                raise ValueError("singular within covariance; too few vectors per class")
            post_cov = b_cur - b_cur @ gain
            y_hat = gain.T @ m_s
            b_new += post_cov + np.outer(y_hat, y_hat)
            resid = m_s - y_hat
            w_new += n_s * post_cov + s_s + n_s * np.outer(resid, resid)
        b_new /= n_classes
        w_new /= n
        model.between_cov = 0.5 * (b_new + b_new.T)
        model.within_cov = 0.5 * (w_new + w_new.T)
        logger.info("plda iter %d: marginal ll %.6f", it, ll)
    return model


def _scoring_terms(model: PldaModel):
    """Closed-form LLR pieces for verification trials.

    Same-class joint covariance [[B+W, B], [B, B+W]] has the symmetric
    2x2-block inverse [[X, Y], [Y, X]] with
      X = ((W+2B)^-1 + W^-1)/2,  Y = ((W+2B)^-1 - W^-1)/2.
    """
    b, w = model.between_cov, model.within_cov
    tot = b + w
    inv_tot = np.linalg.inv(tot)
    inv_w2b = np.linalg.inv(w + 2.0 * b)
    inv_w = np.linalg.inv(w)
    x_mat = 0.5 * (inv_w2b + inv_w)
    y_mat = 0.5 * (inv_w2b - inv_w)
    p_mat = inv_tot - x_mat
    _, ld_w2b = np.linalg.slogdet(w + 2.0 * b)
    _, ld_w = np.linalg.slogdet(w)
    _, ld_tot = np.linalg.slogdet(tot)
    const = -0.5 * (ld_w2b + ld_w - 2.0 * ld_tot)
    return p_mat, y_mat, const


def plda_llr_scores(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Vectorized LLRs for row-aligned enroll/test batches."""
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - model.mu
    t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - model.mu
    if e.shape != t.shape or e.shape[1] != model.dim:
        raise ValueError("dimension mismatch")
    p_mat, y_mat, const = _scoring_terms(model)
    quad_e = 0.5 * np.einsum("ij,jk,ik->i", e, p_mat, e)
    quad_t = 0.5 * np.einsum("ij,jk,ik->i", t, p_mat, t)
    cross = np.einsum("ij,jk,ik->i", e, y_mat, t)
    return quad_e + quad_t - cross + const


def plda_llr_score(model: PldaModel, enroll, test) -> float:
    """log p(pair | same class) - log p(pair | different classes)."""
    e, t = _as_array(enroll), _as_array(test)
    if e.shape != (model.dim,) or t.shape != (model.dim,):
        raise ValueError("dimension mismatch")
    return float(plda_llr_scores(model, e[None, :], t[None, :])[0])
