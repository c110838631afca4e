import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from linewise import matching as Mt


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_adjacency(rng, n_keylines, max_children=4):
    counts = rng.integers(1, max_children + 1, size=n_keylines)
    A = np.zeros((n_keylines, counts.sum()))
    col = 0
    for k, c in enumerate(counts):
        A[k, col : col + c] = 1.0 / c
        col += c
    return A, counts


def brute_keyline_distance(C, counts1, counts2):
    starts1, starts2 = np.r_[0, np.cumsum(counts1)], np.r_[0, np.cumsum(counts2)]
    out = np.zeros((len(counts1), len(counts2)))
    for a, b in itertools.product(range(len(counts1)), range(len(counts2))):
        vals = [C[i, j] for i in range(starts1[a], starts1[a + 1]) for j in range(starts2[b], starts2[b + 1])]
        out[a, b] = sum(vals) / len(vals)
    return out


class TestSublineDistances:
    def test_identical(self, rng):
        d = unit_rows(rng, 5, 8)
        assert np.all(np.diag(Mt.subline_distances(d, d).values) == 0)

    def test_orthogonal(self):
        C = Mt.subline_distances(np.eye(3)[:1], np.eye(3)[1:2])
        assert C.values[0, 0] == pytest.approx(np.sqrt(2), abs=1e-15)

    def test_brute_force(self, rng):
        a, b = unit_rows(rng, 4, 3), unit_rows(rng, 3, 3)
        expected = np.array([[np.linalg.norm(x - y) for y in b] for x in a])
        np.testing.assert_allclose(Mt.subline_distances(a, b).values, expected, atol=1e-7)

    def test_mismatch(self, rng):
        with pytest.raises(ValueError):
            Mt.subline_distances(unit_rows(rng, 2, 3), unit_rows(rng, 2, 4))


class TestKeylineDistances:
    def test_identity_adjacency(self, rng):
        C = Mt.subline_distances(unit_rows(rng, 4, 6), unit_rows(rng, 5, 6))
        np.testing.assert_array_equal(Mt.keyline_distances(np.eye(4), C, np.eye(5)).values, C.values)

    def test_two_vs_one(self):
        C = Mt.DistanceMatrix(np.array([[0.3], [0.9]]), [0, 1], [0])
        K = Mt.keyline_distances(np.array([[0.5, 0.5]]), C, np.array([[1.0]]))
        assert K.values[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_three_by_four(self, rng):
        A1 = np.array([[0.5, 0.5, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
        A2, counts2 = random_adjacency(rng, 2)
        C = Mt.DistanceMatrix(rng.uniform(0, 2, size=(4, A2.shape[1])), list(range(4)), list(range(A2.shape[1])))
        K = Mt.keyline_distances(A1, C, A2)
        np.testing.assert_allclose(K.values, brute_keyline_distance(C.values, [2, 1, 1], counts2), atol=1e-12)

    @given(st.integers(0, 10_000))
    def test_random_structures(self, seed):
        rng = np.random.default_rng(seed)
        A1, c1 = random_adjacency(rng, int(rng.integers(1, 6)))
        A2, c2 = random_adjacency(rng, int(rng.integers(1, 6)))
        C = Mt.DistanceMatrix(rng.uniform(0, 2, size=(A1.shape[1], A2.shape[1])), list(range(A1.shape[1])), list(range(A2.shape[1])))
        np.testing.assert_allclose(Mt.keyline_distances(A1, C, A2).values, brute_keyline_distance(C.values, c1, c2), atol=1e-12)

    def test_mismatch(self):
        C = Mt.DistanceMatrix(np.zeros((2, 2)), [0, 1], [0, 1])
        with pytest.raises(ValueError):
            Mt.keyline_distances(np.eye(3), C, np.eye(2))


class TestMatchNearest:
    def test_identity(self):
        C = Mt.DistanceMatrix(np.full((4, 4), 5.0) - 5.0 * np.eye(4), list(range(4)), list(range(4)))
        assert Mt.match_nearest(C).id_pairs() == {(i, i) for i in range(4)}

    def test_all_equal_tie_break(self):
        C = Mt.DistanceMatrix(np.ones((3, 3)), [0, 1, 2], [0, 1, 2])
        m = Mt.match_nearest(C, mutual=True)
        assert m.id_pairs() == {(0, 0)}
        nn = Mt.match_nearest(C, mutual=False)
        assert [p[:2] for p in nn.pairs] == [(0, 0), (1, 0), (2, 0)]

    def test_planted_permutation(self, rng):
        perm = rng.permutation(7)
        values = rng.uniform(1, 2, size=(7, 7))
        values[np.arange(7), perm] = 0.1
        C = Mt.DistanceMatrix(values, list(range(10, 17)), list(range(20, 27)))
        assert Mt.match_nearest(C).id_pairs() == {(10 + i, 20 + perm[i]) for i in range(7)}

    def test_max_distance(self):
        C = Mt.DistanceMatrix(np.array([[0.2, 1.0], [1.0, 0.9]]), [0, 1], [0, 1])
        assert Mt.match_nearest(C, max_distance=0.5).id_pairs() == {(0, 0)}

    @given(st.integers(0, 10_000))
    def test_mutual_is_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = unit_rows(rng, int(rng.integers(1, 9)), 4), unit_rows(rng, int(rng.integers(1, 9)), 4)
        fwd = Mt.match_nearest(Mt.subline_distances(a, b)).id_pairs()
        bwd = Mt.match_nearest(Mt.subline_distances(b, a)).id_pairs()
        assert fwd == {(j, i) for i, j in bwd}
        assert len({i for i, _ in fwd}) == len(fwd) == len({j for _, j in fwd})

    def test_permutation_with_id_remap(self, rng):
        a, b = unit_rows(rng, 6, 4), unit_rows(rng, 5, 4)
        base = Mt.match_nearest(Mt.subline_distances(a, b, range(6), range(5))).id_pairs()
        p, q = rng.permutation(6), rng.permutation(5)
        moved = Mt.match_nearest(Mt.subline_distances(a[p], b[q], p, q)).id_pairs()
        assert moved == base


class TestPrecisionRecall:
    def test_perfect(self):
        gt = np.array([[1.0, 0, 0], [0, 0.5, 0], [0, 0, 0]])
        m = Mt.MatchSet([(0, 0, 0.1), (1, 1, 0.1)])
        r = Mt.precision_recall(m, gt, [0, 1, 2], [0, 1, 2])
        assert (r.precision, r.recall, r.f_score) == (1.0, 1.0, 1.0)

    def test_empty(self):
        r = Mt.precision_recall(Mt.MatchSet([]), np.eye(2), [0, 1], [0, 1])
        assert (r.precision, r.recall, r.f_score) == (0.0, 0.0, 0.0)

    def test_hand_counted(self):
        gt = np.zeros((5, 5))
        gt[[0, 1, 2, 3], [0, 1, 2, 3]] = 1.0
        m = Mt.MatchSet([(0, 0, 0.1), (1, 1, 0.1), (4, 2, 0.1)])
        r = Mt.precision_recall(m, gt, range(5), range(5))
        assert r.precision == pytest.approx(2 / 3)
        assert r.recall == pytest.approx(1 / 2)
        assert r.f_score == pytest.approx(4 / 7)
        assert (r.true_positives, r.false_positives, r.false_negatives) == (2, 1, 2)

    def test_pooling(self):
        gt = np.eye(2)
        a = Mt.precision_recall(Mt.MatchSet([(0, 0, 0.0)]), gt, [0, 1], [0, 1])
        b = Mt.precision_recall(Mt.MatchSet([(0, 1, 0.0), (1, 1, 0.0)]), gt, [0, 1], [0, 1])
        pooled = Mt.pool_reports([a, b])
        assert pooled.precision == pytest.approx(2 / 3) and pooled.recall == pytest.approx(2 / 4)
