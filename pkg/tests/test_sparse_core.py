import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagnet_sim.rng import make_rng
from cagnet_sim.sparse_core import (
    CsrMatrix,
    add_self_loops_and_normalize,
    apply_permutation,
    build_dataset,
    extract_block,
    from_dense,
    from_edge_list,
    generate_erdos_renyi,
    hstack,
    identity,
    permute_random,
    spmm,
    transpose,
    vstack,
)


def random_sparse(shape, density, seed):
    rng = make_rng(seed)
    dense = rng.standard_normal(shape) * (rng.random(shape) < density)
    return from_dense(dense), dense


def test_csr_rejects_unsorted_columns():
    with pytest.raises(ValueError, match="strictly increase"):
        CsrMatrix(1, 3, np.array([0, 2]), np.array([2, 0]), np.array([1.0, 1.0]))


def test_csr_rejects_explicit_zero_and_bad_pointer():
    with pytest.raises(ValueError, match="explicit zeros"):
        CsrMatrix(1, 2, np.array([0, 1]), np.array([0]), np.array([0.0]))
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 1.0]))


def test_csr_is_read_only():
    a = identity(3)
    with pytest.raises(ValueError):
        a.values[0] = 5.0


class TestFromEdgeList:
    def test_undirected_pair_is_symmetric(self):
        a = from_edge_list([(0, 1)], 2, undirected=True)
        assert a.nnz == 2
        assert np.array_equal(a.to_dense(), a.to_dense().T)

    def test_duplicates_collapse(self):
        a = from_edge_list([(0, 1), (0, 1)], 2)
        assert a.nnz == 1 and a.values[0] == 1.0

    def test_matches_distinct_pair_count(self):
        rng = make_rng(11)
        pairs = [tuple(int(x) for x in rng.integers(0, 16, 2)) for _ in range(100)]
        a = from_edge_list(pairs, 16)
        assert a.nnz == len(set(pairs))
        assert set(zip(a.row_ids().tolist(), a.col_idx.tolist())) == set(pairs)

    def test_out_of_range_names_line(self):
        with pytest.raises(ValueError, match=r"line 2: edge \(0, 5\)"):
            from_edge_list([(0, 1), (0, 5)], 4)
        with pytest.raises(ValueError, match="line 17"):
            from_edge_list([(9, 1)], 4, line_numbers=[17])


class TestNormalize:
    def test_zero_matrix_becomes_identity(self):
        out = add_self_loops_and_normalize(from_dense(np.zeros((2, 2))))
        assert np.array_equal(out.to_dense(), np.eye(2))

    def test_two_vertex_graph(self):
        out = add_self_loops_and_normalize(from_dense([[0, 1], [1, 0]]))
        assert np.allclose(out.to_dense(), 0.5, rtol=0, atol=1e-15)

    def test_star_matches_dense_oracle(self):
        a = np.zeros((4, 4))
        a[0, 1:] = a[1:, 0] = 1.0
        plus = a + np.eye(4)
        d = plus.sum(axis=1)
        want = plus / np.sqrt(np.outer(d, d))
        got = add_self_loops_and_normalize(from_dense(a)).to_dense()
        assert np.allclose(got, want, rtol=1e-15, atol=0)
        assert got[0, 0] == pytest.approx(0.25)
        assert got[0, 1] == pytest.approx(1 / (2 * math.sqrt(2)))
        assert got[1, 1] == pytest.approx(0.5)

    def test_existing_self_loop_adds_to_identity(self):
        got = add_self_loops_and_normalize(from_dense([[1.0, 0.0], [0.0, 0.0]])).to_dense()
        assert np.allclose(got, np.eye(2))  # (1+1)/sqrt(2*2) and 1/1

    def test_symmetric_in_symmetric_out(self):
        a = generate_erdos_renyi(30, 4, seed=2, undirected=True)
        out = add_self_loops_and_normalize(a)
        assert out.equals(transpose(out))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            add_self_loops_and_normalize(from_dense(np.ones((2, 3))))


class TestTranspose:
    def test_symmetric_is_fixed_point(self):
        a = from_dense([[1.0, 2.0], [2.0, 3.0]])
        assert transpose(a).equals(a)

    def test_row_becomes_column(self):
        t = transpose(from_dense([[1.0, 2.0, 3.0]]))
        assert t.shape == (3, 1)
        assert np.array_equal(t.to_dense(), [[1.0], [2.0], [3.0]])

    def test_involution(self):
        a, dense = random_sparse((8, 8), 0.3, seed=3)
        assert transpose(transpose(a)).equals(a)
        assert np.array_equal(transpose(a).to_dense(), dense.T)


class TestExtractBlock:
    def test_full_range(self):
        a, _ = random_sparse((5, 7), 0.4, seed=1)
        assert extract_block(a, (0, 5), (0, 7)).equals(a)

    def test_identity_off_diagonal_block_is_empty(self):
        b = extract_block(identity(4), (0, 2), (2, 4))
        assert b.shape == (2, 2) and b.nnz == 0

    def test_empty_ranges(self):
        a, _ = random_sparse((4, 4), 0.5, seed=2)
        assert extract_block(a, (2, 2), (0, 4)).shape == (0, 4)
        assert extract_block(a, range(0, 4), range(3, 3)).shape == (4, 0)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            extract_block(identity(3), (0, 4), (0, 3))

    def test_two_by_two_tiling_reassembles(self):
        a, _ = random_sparse((6, 6), 0.4, seed=4)
        tiles = [[extract_block(a, (3 * i, 3 * i + 3), (3 * j, 3 * j + 3)) for j in range(2)] for i in range(2)]
        assert vstack([hstack(row) for row in tiles]).equals(a)


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 12),
    cols=st.integers(1, 12),
    seed=st.integers(0, 10_000),
    cuts=st.lists(st.integers(0, 12), max_size=4),
)
def test_any_exact_tiling_reassembles_bitwise(rows, cols, seed, cuts):
    a, _ = random_sparse((rows, cols), 0.35, seed)
    rcuts = sorted({0, rows, *[min(c, rows) for c in cuts]})
    ccuts = sorted({0, cols, *[min(c, cols) for c in cuts[::-1]]})
    stripes = [
        hstack([extract_block(a, (r0, r1), (c0, c1)) for c0, c1 in zip(ccuts, ccuts[1:])])
        for r0, r1 in zip(rcuts, rcuts[1:])
    ]
    assert vstack(stripes).equals(a)


class TestSpmm:
    def test_identity(self):
        b = make_rng(0).standard_normal((3, 2))
        assert np.array_equal(spmm(identity(3), b), b)

    def test_permutation(self):
        got = spmm(from_dense([[0, 1], [1, 0]]), np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(got, [[3.0, 4.0], [1.0, 2.0]])

    def test_matches_dense_product(self):
        a = add_self_loops_and_normalize(generate_erdos_renyi(8, 3, seed=5))
        b = make_rng(6).standard_normal((8, 4))
        assert np.allclose(spmm(a, b), a.to_dense() @ b, rtol=1e-12, atol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            spmm(identity(3), np.ones((4, 2)))

    def test_column_panels_accumulate_bitwise(self):
        a, _ = random_sparse((10, 10), 0.5, seed=7)
        b = make_rng(8).standard_normal((10, 3))
        out = np.zeros((10, 3))
        for lo, hi in [(0, 3), (3, 4), (4, 10)]:
            spmm(extract_block(a, (0, 10), (lo, hi)), b[lo:hi], out=out)
        assert out.tobytes() == spmm(a, b).tobytes()


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 64), k=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_spmm_property(n, k, seed):
    a, dense = random_sparse((n, n), 0.2, seed)
    b = make_rng(seed + 1).standard_normal((n, k))
    want = dense @ b
    got = spmm(a, b)
    scale = np.abs(dense) @ np.abs(b)
    assert np.all(np.abs(got - want) <= 1e-12 * np.maximum(scale, 1e-300))


class TestErdosRenyi:
    def test_tiny_graph_may_have_empty_rows_but_normalizes(self):
        a = generate_erdos_renyi(5, 0.1, seed=0)
        out = add_self_loops_and_normalize(a)
        assert np.all(out.row_degrees() >= 1)

    def test_edge_count_within_binomial_bound(self):
        n, d = 1000, 8
        a = generate_erdos_renyi(n, d, seed=1)
        p = d / n
        mean, sigma = n * (n - 1) * p, math.sqrt(n * n * p * (1 - p))
        assert abs(a.nnz - mean) < 5 * sigma
        assert not np.any(a.row_ids() == a.col_idx)

    def test_deterministic(self):
        assert generate_erdos_renyi(50, 5, seed=9).equals(generate_erdos_renyi(50, 5, seed=9))
        assert not generate_erdos_renyi(50, 5, seed=9).equals(generate_erdos_renyi(50, 5, seed=10))

    def test_undirected_variant_is_symmetric(self):
        a = generate_erdos_renyi(40, 6, seed=3, undirected=True)
        assert a.equals(transpose(a))

    def test_rejects_bad_degree(self):
        with pytest.raises(ValueError):
            generate_erdos_renyi(10, 10, seed=0)


def _dataset(n, seed):
    rng = make_rng(seed)
    raw = generate_erdos_renyi(n, 3, seed)
    return build_dataset(raw, rng.standard_normal((n, 3)), rng.integers(0, 3, n), rng.random(n) < 0.5)


class TestPermutation:
    def test_identity_permutation_leaves_dataset(self):
        g = _dataset(8, 1)
        same = apply_permutation(g, np.arange(8))
        assert same.adj.equals(g.adj) and np.array_equal(same.features, g.features)

    def test_inverse_restores_bitwise(self):
        g = _dataset(8, 7)
        p, perm = permute_random(g, seed=7)
        back = apply_permutation(p, np.argsort(perm))
        assert back.adj.equals(g.adj) and back.adj_t.equals(g.adj_t)
        assert back.features.tobytes() == g.features.tobytes()
        assert np.array_equal(back.labels, g.labels) and np.array_equal(back.train_mask, g.train_mask)

    def test_preserves_spectrum_and_multisets(self):
        g = _dataset(12, 3)
        p, perm = permute_random(g, seed=4)
        assert p.adj.nnz == g.adj.nnz
        assert sorted(p.adj.row_degrees()) == sorted(g.adj.row_degrees())
        assert sorted(p.labels) == sorted(g.labels)
        ev = np.sort(np.linalg.eigvals(g.adj.to_dense()).real)
        ev_p = np.sort(np.linalg.eigvals(p.adj.to_dense()).real)
        assert np.allclose(ev, ev_p, atol=1e-10)
        assert np.array_equal(p.adj.to_dense(), g.adj.to_dense()[np.ix_(perm, perm)])

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            apply_permutation(_dataset(4, 1), [0, 0, 1, 2])


def test_dataset_invariants():
    g = _dataset(10, 2)
    assert g.adj_t.equals(transpose(g.adj))
    assert g.n == 10 and np.all(g.adj.row_degrees() >= 1)
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0
