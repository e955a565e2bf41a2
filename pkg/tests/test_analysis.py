import numpy as np
import pytest

from blockdiv.analysis import (LINEAR, RBF, CkaMatrix, DegenerateFeaturesError, cka,
                               diversity_summary, gram, hsic, median_bandwidth, similarity_matrix)
from blockdiv.tensor import Rng


def orthogonal(rng, p):
    q, r = np.linalg.qr(rng.normal((p, p)))
    return q * np.sign(np.diag(r))


def hsic_bruteforce(k, l):
    """Expanded Tr(KHLH) with H_ij = delta_ij - 1/n, as explicit sums."""
    n = k.shape[0]
    h = [[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)]
    total = 0.0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    total += k[a][b] * h[b][c] * l[c][d] * h[d][a]
    return total / (n - 1) ** 2


def gram_bruteforce(x, sigma=None):
    n = len(x)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if sigma is None:
                out[i, j] = sum(a * b for a, b in zip(x[i], x[j]))
            else:
                d2 = sum((a - b) ** 2 for a, b in zip(x[i], x[j]))
                out[i, j] = np.exp(-d2 / (2 * sigma ** 2))
    return out


def test_gram_examples(rng):
    np.testing.assert_allclose(gram(np.eye(3)[:2], LINEAR), np.eye(2))
    x = rng.normal((3, 2))
    np.testing.assert_allclose(np.diag(gram(x, RBF)), 1.0, atol=0)
    np.testing.assert_allclose(gram(x, LINEAR), gram_bruteforce(x), atol=1e-12)
    sigma = median_bandwidth(x)
    np.testing.assert_allclose(gram(x, RBF), gram_bruteforce(x, sigma), atol=1e-12)


def test_median_bandwidth_and_degenerate():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x) == 2.0
    with pytest.raises(DegenerateFeaturesError):
        gram(np.ones((4, 2)), RBF)


def test_hsic_examples(rng):
    assert abs(hsic(np.full((5, 5), 3.0), gram(rng.normal((5, 2))))) <= 1e-12
    for _ in range(5):
        k = gram(rng.normal((6, 3)), RBF)
        assert hsic(k, k) >= 0
    k, l = gram(rng.normal((4, 3))), gram(rng.normal((4, 2)))
    assert abs(hsic(k, l) - hsic_bruteforce(k, l)) <= 1e-10
    with pytest.raises(ValueError):
        hsic(np.eye(3), np.eye(4))


@pytest.mark.parametrize("shape", [(4, 3), (8, 5)])
def test_hsic_oracle(shape):
    rng = Rng(shape[0])
    x, y = rng.normal(shape), rng.normal(shape)
    for kernel in (LINEAR, RBF):
        k, l = gram(x, kernel), gram(y, kernel)
        assert abs(hsic(k, l) - hsic_bruteforce(k, l)) <= 1e-10


def test_cka_invariances(rng):
    x, y = rng.normal((20, 6)), rng.normal((20, 6))
    base = cka(x, y)
    assert abs(cka(x, x) - 1.0) <= 1e-10
    assert abs(cka(x, y) - cka(y, x)) <= 1e-10
    assert abs(cka(x @ orthogonal(rng, 6), y) - base) <= 1e-8
    assert abs(cka(3.7 * x, y) - base) <= 1e-8
    assert abs(cka(2.5 * x, y, RBF) - cka(x, y, RBF)) <= 1e-8
    assert abs(cka(x, x, RBF) - 1.0) <= 1e-10


def test_cka_bounded_and_degenerate(rng):
    for _ in range(10):
        x, y = rng.normal((12, 4)), rng.normal((12, 3))
        for kernel in (LINEAR, RBF):
            assert -1e-12 <= cka(x, y, kernel) <= 1 + 1e-10
    with pytest.raises(DegenerateFeaturesError):
        cka(np.ones((5, 2)), rng.normal((5, 2)))
    with pytest.raises(ValueError):
        cka(rng.normal((4, 2)), rng.normal((5, 2)))


def test_polynomial_kernel(rng):
    x, y = rng.normal((10, 3)), rng.normal((10, 3))
    kernel = {"name": "polynomial", "degree": 2}
    np.testing.assert_allclose(gram(x, kernel), (x @ x.T + 1.0) ** 2)
    assert 0.0 <= cka(x, y, kernel) <= 1 + 1e-10


def test_similarity_matrix_examples(rng):
    f = rng.normal((2, 4, 5))
    m = similarity_matrix([f, f, f], LINEAR)
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)
    feats = [rng.normal((2, 4, 5)) for _ in range(3)]
    m = similarity_matrix(feats, RBF)
    np.testing.assert_allclose(m.values, m.values.T, atol=1e-10)
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-10)
    flat = [a.reshape(-1, 5) for a in feats]
    for i in range(3):
        for j in range(3):
            assert abs(m.values[i, j] - cka(flat[i], flat[j], RBF)) <= 1e-12


def test_similarity_matrix_block_order(rng):
    feats = [rng.normal((3, 2, 4)) for _ in range(4)]
    perm = [2, 0, 3, 1]
    a = similarity_matrix(feats, LINEAR).values
    b = similarity_matrix([feats[p] for p in perm], LINEAR).values
    np.testing.assert_allclose(b, a[np.ix_(perm, perm)], atol=1e-14)


def test_similarity_matrix_subsample_is_seeded(rng):
    feats = [rng.normal((8, 16, 4)) for _ in range(3)]
    a = similarity_matrix(feats, LINEAR, subsample=50, seed=1)
    b = similarity_matrix(feats, LINEAR, subsample=50, seed=1)
    c = similarity_matrix(feats, LINEAR, subsample=50, seed=2)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_diversity_summary():
    assert diversity_summary(np.ones((4, 4))) == 1.0
    assert diversity_summary(np.eye(3)) == 0.0
    m = np.array([[1, 0.2, 0.4], [0.2, 1, 0.6], [0.4, 0.6, 1]])
    assert diversity_summary(m) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(ValueError):
        diversity_summary(np.ones((1, 1)))


def test_csv_format(tmp_path):
    m = CkaMatrix(np.array([[1.0, 1 / 3], [1 / 3, 1.0]]), LINEAR)
    m.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == [",b0,b1", "b0,1,0.3333333333", "b1,0.3333333333,1"]
    back = CkaMatrix.from_csv(tmp_path / "m.csv")
    np.testing.assert_allclose(back.values, m.values, atol=1e-10)
