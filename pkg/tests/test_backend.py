"""Backend scoring tests: cosine, LDA, length normalization, PLDA.

The PLDA log-likelihood-ratio is checked against a brute-force oracle
that builds the joint 2D x 2D Gaussians for the same-class and
different-class hypotheses and evaluates both densities directly.
"""

import numpy as np
import pytest

from tevkit.backend import (
    LdaTransform,
    PldaModel,
    cosine_score,
    length_normalize,
    plda_llr_score,
    plda_llr_scores,
    train_lda,
    train_plda,
)
from tevkit.tvspace import SpeakerVector


# ---------------------------------------------------------------------------
# oracle (written before the tests that consume it)
# ---------------------------------------------------------------------------

def dense_llr_oracle(model: PldaModel, enroll, test) -> float:
    """Evaluate the verification LLR from explicitly assembled joint Gaussians.

    Same class:      [e; t] ~ N([mu; mu], [[B+W, B], [B, B+W]])
    Different class: [e; t] ~ N([mu; mu], [[B+W, 0], [0, B+W]])

    Everything is dense and generic (slogdet + solve); no reuse of the
    closed-form scoring identities under test.
    """
    d = model.dim
    b, w = model.between_cov, model.within_cov
    x = np.concatenate([np.asarray(enroll, dtype=np.float64) - model.mu,
                        np.asarray(test, dtype=np.float64) - model.mu])
    tot = b + w
    zero = np.zeros((d, d))
    cov_same = np.block([[tot, b], [b, tot]])
    cov_diff = np.block([[tot, zero], [zero, tot]])

    def log_density(cov):
        sign, logdet = np.linalg.slogdet(cov)
        assert sign > 0
        return -0.5 * (2 * d * np.log(2.0 * np.pi) + logdet
                       + float(x @ np.linalg.solve(cov, x)))

    return log_density(cov_same) - log_density(cov_diff)


def random_plda_model(rng, dim: int) -> PldaModel:
    a = rng.standard_normal((dim, dim))
    b = a @ a.T + 0.5 * np.eye(dim)
    c = rng.standard_normal((dim, dim))
    w = c @ c.T + 0.5 * np.eye(dim)
    return PldaModel(mu=rng.standard_normal(dim), between_cov=b, within_cov=w)


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------

def test_cosine_self_is_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.standard_normal(12)
        assert abs(cosine_score(x, x) - 1.0) < 1e-12


def test_cosine_negation_is_minus_one():
    x = np.random.default_rng(1).standard_normal(7)
    assert abs(cosine_score(x, -x) + 1.0) < 1e-12


def test_cosine_scale_invariance():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(9), rng.standard_normal(9)
    base = cosine_score(x, y)
    assert abs(cosine_score(3.7 * x, 0.004 * y) - base) < 1e-12


def test_cosine_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero"):
        cosine_score(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError, match="zero"):
        cosine_score(np.ones(4), np.zeros(4))


def test_cosine_dim_mismatch_rejected():
    with pytest.raises(ValueError, match="[Dd]imension"):
        cosine_score(np.ones(4), np.ones(5))


def test_cosine_accepts_speaker_vectors():
    v = SpeakerVector(np.array([1.0, 2.0, 3.0]), kind="ivector", utt_id="u1")
    w = SpeakerVector(np.array([1.0, 2.0, 3.0]), kind="ivector", utt_id="u2")
    assert abs(cosine_score(v, w) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# length normalization
# ---------------------------------------------------------------------------

def test_length_normalize_unit_norm():
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = rng.standard_normal(16) * rng.uniform(0.01, 100.0)
        out = length_normalize(v)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_length_normalize_idempotent():
    v = length_normalize(np.random.default_rng(4).standard_normal(8))
    again = length_normalize(v)
    np.testing.assert_allclose(again, v, atol=1e-12)


def test_length_normalize_scale_invariant():
    v = np.random.default_rng(5).standard_normal(6)
    np.testing.assert_allclose(length_normalize(17.0 * v), length_normalize(v),
                               atol=1e-12)


def test_length_normalize_zero_rejected():
    with pytest.raises(ValueError, match="zero"):
        length_normalize(np.zeros(3))


def test_length_normalize_keeps_vector_metadata():
    v = SpeakerVector(np.array([3.0, 4.0]), kind="dvector", utt_id="u9")
    out = length_normalize(v)
    assert isinstance(out, SpeakerVector)
    assert out.kind == "dvector" and out.utt_id == "u9"
    np.testing.assert_allclose(out.values, [0.6, 0.8], atol=1e-12)


def test_cosine_unchanged_by_length_normalize():
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal(10), rng.standard_normal(10)
    before = cosine_score(x, y)
    after = cosine_score(length_normalize(x), length_normalize(y))
    assert abs(after - before) < 1e-12


# ---------------------------------------------------------------------------
# LDA
# ---------------------------------------------------------------------------

def two_class_data(rng, n_per: int = 200, dim: int = 10, gap: float = 8.0):
    # classes separated along axis 1 only; all other axes pure noise
    offset = np.zeros(dim)
    offset[1] = gap
    a = rng.standard_normal((n_per, dim))
    b = rng.standard_normal((n_per, dim)) + offset
    x = np.vstack([a, b])
    labels = ["a"] * n_per + ["b"] * n_per
    return x, labels


def test_lda_axis_alignment():
    # enough samples per class that scatter-estimation noise cannot tilt
    # the discriminant off the separating axis
    x, labels = two_class_data(np.random.default_rng(7), n_per=1000)
    lda = train_lda(x, labels, k=1)
    axis = np.zeros(10)
    axis[1] = 1.0
    direction = lda.projection[:, 0]
    cos = np.dot(direction, axis) / np.linalg.norm(direction)
    assert abs(cos) > 0.99


def test_lda_permutation_invariance():
    rng = np.random.default_rng(8)
    x, labels = two_class_data(rng, n_per=40)
    lda = train_lda(x, labels, k=1)
    perm = rng.permutation(len(labels))
    shuffled = train_lda(x[perm], [labels[i] for i in perm], k=1)
    # same transform up to float summation-order noise
    np.testing.assert_allclose(shuffled.projection, lda.projection, atol=1e-10)
    np.testing.assert_allclose(shuffled.mean, lda.mean, atol=1e-10)


def test_lda_rank_bound_two_classes():
    x, labels = two_class_data(np.random.default_rng(9), n_per=20)
    lda = train_lda(x, labels, k=1)
    assert lda.out_dim == 1
    assert lda.project(x[0]).shape == (1,)


def test_lda_k_out_of_range_rejected():
    x, labels = two_class_data(np.random.default_rng(10), n_per=20)
    with pytest.raises(ValueError, match="K"):
        train_lda(x, labels, k=0)
    with pytest.raises(ValueError, match="K"):
        train_lda(x, labels, k=2)  # min(D, classes-1) = 1


def test_lda_single_vector_class_rejected():
    x = np.random.default_rng(11).standard_normal((5, 4))
    labels = ["a", "a", "a", "a", "b"]
    with pytest.raises(ValueError, match="fewer than 2"):
        train_lda(x, labels, k=1)


def test_lda_projects_speaker_vector():
    x, labels = two_class_data(np.random.default_rng(12), n_per=20)
    lda = train_lda(x, labels, k=1)
    v = SpeakerVector(x[0], kind="ivector", utt_id="u0")
    out = lda.project(v)
    assert isinstance(out, SpeakerVector)
    assert out.kind == "ivector" and out.values.shape == (1,)


def test_lda_transform_shape_validation():
    with pytest.raises(ValueError):
        LdaTransform(projection=np.ones((4, 2)), mean=np.ones(3))


def _top_pair(x, labels, k):
    """Index of the most-similar projected class-mean pair, cosine metric."""
    lda = train_lda(x, labels, k=k)
    classes = sorted(set(labels))
    means = []
    arr = np.asarray(labels)
    for c in classes:
        means.append(lda.project(x[arr == c].mean(axis=0)))
    pairs = [(0, 1), (0, 2), (1, 2)]
    sims = [cosine_score(means[i], means[j]) for i, j in pairs]
    return pairs[int(np.argmax(sims))]


def test_lda_argmax_invariant_under_affine_pretransform():
    rng = np.random.default_rng(13)
    dim = 4
    centers = np.zeros((3, dim))
    centers[1, 0] = 1.0
    centers[2, 0] = 10.0
    x = np.vstack([rng.standard_normal((60, dim)) * 0.3 + c for c in centers])
    labels = np.repeat([0, 1, 2], 60)

    pair = _top_pair(x, labels, k=2)

    a = rng.standard_normal((dim, dim)) + 3.0 * np.eye(dim)
    assert abs(np.linalg.det(a)) > 1e-6
    shift = rng.standard_normal(dim) * 5.0
    transformed = x @ a.T + shift
    assert _top_pair(transformed, labels, k=2) == pair


# ---------------------------------------------------------------------------
# PLDA training
# ---------------------------------------------------------------------------

TRUE_B = np.array([[2.0, 0.6], [0.6, 1.0]])
TRUE_W = np.array([[1.0, -0.3], [-0.3, 0.8]])


def sample_two_cov(rng, n_classes: int, per_class: int):
    lb = np.linalg.cholesky(TRUE_B)
    lw = np.linalg.cholesky(TRUE_W)
    y = rng.standard_normal((n_classes, 2)) @ lb.T
    x = (np.repeat(y, per_class, axis=0)
         + rng.standard_normal((n_classes * per_class, 2)) @ lw.T)
    return x, np.repeat(np.arange(n_classes), per_class)


def test_plda_recovers_generating_covariances():
    x, labels = sample_two_cov(np.random.default_rng(2), 200, 10)
    model = train_plda(x, labels, n_iters=20)
    rel_b = np.linalg.norm(model.between_cov - TRUE_B) / np.linalg.norm(TRUE_B)
    rel_w = np.linalg.norm(model.within_cov - TRUE_W) / np.linalg.norm(TRUE_W)
    assert rel_b <= 0.15
    assert rel_w <= 0.15


def test_plda_ll_history_non_decreasing():
    x, labels = sample_two_cov(np.random.default_rng(15), 50, 8)
    model = train_plda(x, labels, n_iters=15)
    hist = np.asarray(model.ll_history)
    assert hist.shape == (15,)
    assert np.all(np.isfinite(hist))
    assert np.all(np.diff(hist) >= -1e-8)


def test_plda_between_collapses_when_classes_are_identical():
    # every class holds the same vectors, so the empirical between-class
    # scatter is exactly zero; freshly resampled classes would leave
    # O(W/n) sampling noise in the class means, which EM sheds far too
    # slowly (boundary convergence) to pass a bound like this one
    rng = np.random.default_rng(16)
    base = rng.standard_normal((10, 2)) @ np.linalg.cholesky(TRUE_W).T
    n_classes = 200
    x = np.tile(base, (n_classes, 1))
    labels = np.repeat(np.arange(n_classes), 10)
    model = train_plda(x, labels, n_iters=20)
    assert np.trace(model.between_cov) < 1e-3 * np.trace(model.within_cov)
    hist = np.asarray(model.ll_history)
    assert np.all(np.diff(hist) >= -1e-8)


def test_plda_single_vector_class_rejected():
    x = np.random.default_rng(17).standard_normal((5, 2))
    with pytest.raises(ValueError, match="fewer than 2"):
        train_plda(x, ["a", "a", "b", "b", "c"], n_iters=3)


def test_plda_needs_two_classes():
    x = np.random.default_rng(18).standard_normal((6, 2))
    with pytest.raises(ValueError, match="2 classes"):
        train_plda(x, ["a"] * 6, n_iters=3)


def test_plda_rejects_non_matrix_input():
    with pytest.raises(ValueError, match=r"\(n, D\)"):
        train_plda(np.ones(6), ["a", "a", "b", "b", "c", "c"], n_iters=1)


def test_plda_model_shape_validation():
    with pytest.raises(ValueError, match="covariance shapes"):
        PldaModel(mu=np.zeros(3), between_cov=np.eye(2), within_cov=np.eye(3))


# ---------------------------------------------------------------------------
# PLDA scoring
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("dim", [1, 2, 3])
def test_llr_matches_dense_oracle(dim):
    rng = np.random.default_rng(100 + dim)
    for _ in range(10):
        model = random_plda_model(rng, dim)
        e, t = rng.standard_normal(dim), rng.standard_normal(dim)
        got = plda_llr_score(model, e, t)
        want = dense_llr_oracle(model, e, t)
        assert abs(got - want) < 1e-8


def test_llr_symmetry():
    rng = np.random.default_rng(19)
    model = random_plda_model(rng, 3)
    for _ in range(5):
        e, t = rng.standard_normal(3), rng.standard_normal(3)
        assert abs(plda_llr_score(model, e, t)
                   - plda_llr_score(model, t, e)) < 1e-10


def test_llr_at_shared_mean_equals_oracle_constant():
    # with enroll = test = mu the quadratic terms vanish and the score
    # reduces to the log-determinant constant; pin it against the oracle
    model = random_plda_model(np.random.default_rng(20), 2)
    got = plda_llr_score(model, model.mu, model.mu)
    want = dense_llr_oracle(model, model.mu, model.mu)
    assert abs(got - want) < 1e-12
    assert got > 0.0  # coincident vectors favor the same-class hypothesis


def test_llr_orthogonal_transform_invariance():
    rng = np.random.default_rng(21)
    dim = 3
    model = random_plda_model(rng, dim)
    e, t = rng.standard_normal(dim), rng.standard_normal(dim)
    base = plda_llr_score(model, e, t)
    for _ in range(3):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        rotated = PldaModel(mu=q @ model.mu,
                            between_cov=q @ model.between_cov @ q.T,
                            within_cov=q @ model.within_cov @ q.T)
        assert abs(plda_llr_score(rotated, q @ e, q @ t) - base) < 1e-8


def test_llr_batch_matches_single_scores():
    rng = np.random.default_rng(22)
    model = random_plda_model(rng, 2)
    e = rng.standard_normal((6, 2))
    t = rng.standard_normal((6, 2))
    batch = plda_llr_scores(model, e, t)
    singles = np.array([plda_llr_score(model, e[i], t[i]) for i in range(6)])
    np.testing.assert_array_equal(batch, singles)


def test_llr_dim_mismatch_rejected():
    model = random_plda_model(np.random.default_rng(23), 2)
    with pytest.raises(ValueError, match="[Dd]imension"):
        plda_llr_score(model, np.ones(3), np.ones(3))


def test_llr_accepts_speaker_vectors():
    model = random_plda_model(np.random.default_rng(24), 2)
    e = SpeakerVector(np.array([0.3, -0.1]), kind="ivector", utt_id="e")
    t = SpeakerVector(np.array([0.2, 0.5]), kind="ivector", utt_id="t")
    got = plda_llr_score(model, e, t)
    assert abs(got - dense_llr_oracle(model, e.values, t.values)) < 1e-8
