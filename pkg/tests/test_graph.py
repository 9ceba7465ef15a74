import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proto_mp.graph import (SEGMENTS, Graph, GraphError, edge_homophily, expand_for_prototypes,
                            node_homophily, normalize_adjacency, segment_by_homophily, symmetrize)


def undirected(n, pairs, labels, d0=2):
    edges = symmetrize(np.array(pairs, dtype=int).reshape(-1, 2))
    return Graph(n, edges, np.zeros((n, d0)), np.array(labels))


def random_symmetric(rng, n, p=0.3):
    A = (rng.random((n, n)) < p).astype(float)
    A = np.triu(A, 1)
    return A + A.T


@st.composite
def sym_adjacency(draw):
    n = draw(st.integers(1, 20))
    seed = draw(st.integers(0, 2**31 - 1))
    p = draw(st.floats(0.0, 1.0))
    return random_symmetric(np.random.default_rng(seed), n, p)


class TestGraphValidation:
    def test_self_loop_rejected(self):
        with pytest.raises(GraphError):
            Graph(2, np.array([[0, 0]]), np.zeros((2, 1)), np.array([0, 1]))

    def test_endpoint_out_of_range(self):
        with pytest.raises(GraphError):
            Graph(2, np.array([[0, 2]]), np.zeros((2, 1)), np.array([0, 1]))

    def test_arrays_read_only(self):
        g = undirected(2, [[0, 1]], [0, 1])
        with pytest.raises(ValueError):
            g.features[0, 0] = 1.0

    def test_symmetrize_dedups(self):
        e = symmetrize(np.array([[0, 1], [1, 0], [0, 1]]))
        assert sorted(map(tuple, e)) == [(0, 1), (1, 0)]


class TestNormalize:
    def test_isolated_single(self):
        assert np.array_equal(normalize_adjacency(np.zeros((1, 1))).matrix.data, [[1.0]])

    def test_two_node_edge(self):
        out = normalize_adjacency(np.array([[0, 1], [1, 0]], dtype=float)).matrix.data
        assert np.allclose(out, 0.5, atol=1e-15)

    def test_empty_three(self):
        assert np.array_equal(normalize_adjacency(np.zeros((3, 3))).matrix.data, np.eye(3))

    def test_non_square(self):
        with pytest.raises(ValueError):
            normalize_adjacency(np.zeros((2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(sym_adjacency())
    def test_symmetric_nonnegative_and_spectrum(self, A):
        M = normalize_adjacency(A).matrix.data
        assert np.all(M >= 0)
        assert np.max(np.abs(M - M.T)) < 1e-12
        eig = np.linalg.eigvalsh(M)
        assert eig.min() >= -1 - 1e-12 and eig.max() <= 1 + 1e-12

    def test_matches_dense_formula(self):
        A = random_symmetric(np.random.default_rng(0), 9)
        D = np.diag(1.0 / np.sqrt(1 + A.sum(1)))
        assert np.allclose(normalize_adjacency(A).matrix.data, D @ (A + np.eye(9)) @ D, atol=1e-15)


class TestExpand:
    def test_single_node(self):
        A_base, A_P = expand_for_prototypes(np.zeros((1, 1)), 1)
        assert np.array_equal(A_base, np.zeros((2, 2)))
        assert np.array_equal(A_P, [[0, 1], [0, 0]])

    def test_edge_row_sums(self):
        A = np.array([[0, 1], [1, 0]], dtype=float)
        A_base, A_P = expand_for_prototypes(A, 2)
        assert np.array_equal(A_base.sum(1), [1, 1, 0, 0])
        assert np.array_equal(A_P.sum(1), [2, 2, 0, 0])

    def test_zero_prototypes_rejected(self):
        with pytest.raises(ValueError):
            expand_for_prototypes(np.zeros((2, 2)), 0)

    @settings(max_examples=30, deadline=None)
    @given(sym_adjacency(), st.integers(1, 6))
    def test_blocks_after_normalization(self, A, K):
        V = A.shape[0]
        A_base, A_P = expand_for_prototypes(A, K)
        assert np.array_equal(A_base[:V, :V], A)
        P = normalize_adjacency(A_P).matrix.data
        assert np.all(P[:V].sum(1) > 0)
        off_diag = P[V:] - np.diag(np.diag(P))[V:]
        assert np.all(off_diag.sum(1) == 0)


class TestHomophily:
    def test_triangle_same_label(self):
        assert node_homophily(undirected(3, [[0, 1], [1, 2], [0, 2]], [1, 1, 1])).mean == 1.0

    def test_star(self):
        g = undirected(5, [[0, i] for i in range(1, 5)], [0, 1, 1, 1, 1])
        h = node_homophily(g)
        assert np.array_equal(h.ratios, np.zeros(5)) and h.mean == 0.0

    def test_isolated_excluded(self):
        g = undirected(3, [[0, 1]], [0, 0, 1])
        h = node_homophily(g)
        assert np.isnan(h.ratios[2]) and h.mean == 1.0

    def test_all_isolated_errors(self):
        with pytest.raises(GraphError):
            node_homophily(undirected(2, np.zeros((0, 2)), [0, 1]))

    def test_directed_uses_out_neighbours(self):
        edges = np.array([[0, 1], [1, 0], [0, 2], [2, 0]])
        raw = np.array([[0, 1], [2, 0]])
        g = Graph(3, edges, np.zeros((3, 1)), np.array([0, 0, 1]), raw_edges=raw)
        h = node_homophily(g)
        assert h.ratios[0] == 1.0 and h.ratios[2] == 0.0 and np.isnan(h.ratios[1])

    def test_edge_homophily(self):
        g = undirected(4, [[0, 1], [1, 2], [2, 3]], [0, 0, 1, 1])
        assert edge_homophily(g) == pytest.approx(2 / 3)


class TestSegments:
    @pytest.mark.parametrize("r,seg", [(0.0, "SHet"), (0.25, "SHet"), (0.26, "WHet"), (0.5, "WHet"),
                                       (0.51, "WHom"), (0.75, "WHom"), (0.76, "SHom"), (1.0, "SHom")])
    def test_boundaries(self, r, seg):
        assert segment_by_homophily([r])[0] == seg

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
    def test_partition(self, ratios):
        seg = segment_by_homophily(ratios)
        assert len(seg) == len(ratios)
        assert sum(int(np.sum(seg == s)) for s in SEGMENTS) == len(ratios)
