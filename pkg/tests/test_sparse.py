import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rafsel.exceptions import (BadResolution, EmptyMatrix, MalformedEntry, NonSquare,
                               UnsupportedField)
from rafsel.sparse import (CsrMatrix, block_partition, format_matrix_market,
                           parse_matrix_market, read_matrix_market, value_extrema,
                           write_matrix_market)


@st.composite
def sparse_matrices(draw, max_order=12):
    n = draw(st.integers(1, max_order))
    cells = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
                          min_size=1, max_size=3 * n, unique=True))
    vals = draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: v != 0.0),
                         min_size=len(cells), max_size=len(cells)))
    rows, cols = zip(*cells)
    return CsrMatrix.from_coo(n, rows, cols, vals)


class TestCsrMatrix:
    def test_from_dense_roundtrip(self, rng):
        D = rng.standard_normal((6, 6)) * (rng.random((6, 6)) < 0.4)
        A = CsrMatrix.from_dense(D)
        np.testing.assert_array_equal(A.to_dense(), D)
        assert A.nnz == np.count_nonzero(D)

    def test_arrays_are_read_only(self, fig1_matrix):
        with pytest.raises(ValueError):
            fig1_matrix.values[0] = 3.0

    def test_rejects_unsorted_columns(self):
        with pytest.raises(MalformedEntry):
            CsrMatrix(2, [0, 2, 2], [1, 0], [1.0, 2.0])

    def test_rejects_bad_offsets(self):
        with pytest.raises(MalformedEntry):
            CsrMatrix(2, [0, 3, 2], [0, 1], [1.0, 2.0])

    def test_duplicates_are_summed(self):
        A = CsrMatrix.from_coo(2, [0, 0, 1], [1, 1, 0], [1.0, 2.5, 4.0])
        assert A.nnz == 2
        np.testing.assert_array_equal(A.to_dense(), [[0, 3.5], [4, 0]])

    def test_canonicalize_drops_stored_zeros(self):
        A = CsrMatrix(2, [0, 2, 3], [0, 1, 1], [1.0, 0.0, 2.0])
        C = A.canonicalize()
        assert C.nnz == 2
        np.testing.assert_array_equal(C.to_dense(), A.to_dense())

    def test_shift_keeps_pattern(self, fig1_matrix):
        B = fig1_matrix.shift(90)
        np.testing.assert_array_equal(B.col_indices, fig1_matrix.col_indices)
        np.testing.assert_array_equal(B.values, fig1_matrix.values + 90)

    def test_symmetry_checks(self, fig1_matrix):
        assert fig1_matrix.is_symmetric()
        B = CsrMatrix.from_dense([[1, 2], [3, 1]])
        assert B.is_structurally_symmetric() and not B.is_symmetric()
        C = CsrMatrix.from_dense([[1, 2], [0, 1]])
        assert not C.is_structurally_symmetric()

    def test_scipy_roundtrip(self, fig1_matrix):
        assert CsrMatrix.from_scipy(fig1_matrix.to_scipy()) == fig1_matrix


class TestMatrixMarket:
    def test_general_diagonal(self):
        A = parse_matrix_market("%%MatrixMarket matrix coordinate real general\n"
                                "2 2 2\n1 1 5.0\n2 2 7.0\n")
        assert A.order == 2
        np.testing.assert_array_equal(A.to_dense(), [[5, 0], [0, 7]])

    def test_symmetric_expansion(self):
        A = parse_matrix_market("%%MatrixMarket matrix coordinate real symmetric\n"
                                "% a comment\n2 2 2\n1 1 4.0\n2 1 1.0\n")
        np.testing.assert_array_equal(A.to_dense(), [[4, 1], [1, 0]])
        assert A.nnz == 3

    def test_integer_field(self):
        A = parse_matrix_market("%%MatrixMarket matrix coordinate integer general\n"
                                "1 1 1\n1 1 3\n")
        assert A.values.tolist() == [3.0]

    def test_non_square(self):
        with pytest.raises(NonSquare):
            parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1\n")

    @pytest.mark.parametrize("field", ["complex", "pattern"])
    def test_unsupported_field(self, field):
        with pytest.raises(UnsupportedField):
            parse_matrix_market(f"%%MatrixMarket matrix coordinate {field} general\n1 1 1\n1 1\n")

    def test_out_of_bounds_entry(self):
        with pytest.raises(MalformedEntry):
            parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n")

    def test_entry_count_mismatch(self):
        with pytest.raises(MalformedEntry):
            parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n")

    def test_missing_banner(self):
        with pytest.raises(MalformedEntry):
            parse_matrix_market("2 2 1\n1 1 1.0\n")

    def test_accepts_stream(self):
        text = "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 2.5\n"
        assert parse_matrix_market(io.StringIO(text)).values.tolist() == [2.5]

    def test_file_roundtrip(self, tmp_path, rng):
        D = rng.standard_normal((7, 7)) * (rng.random((7, 7)) < 0.5)
        D[0, 0] = 1 / 3
        A = CsrMatrix.from_dense(D)
        path = tmp_path / "a.mtx"
        write_matrix_market(path, A, comments=["hello"])
        assert read_matrix_market(path) == A

    @settings(max_examples=60, deadline=None)
    @given(sparse_matrices())
    def test_format_parse_roundtrip(self, A):
        assert parse_matrix_market(format_matrix_market(A)) == A


class TestExtrema:
    def test_fig1_values(self, fig1_matrix):
        e = value_extrema(fig1_matrix)
        assert (e.min_val, e.max_val) == (1, 10)
        e2 = value_extrema(fig1_matrix.shift(90))
        assert (e2.min_val, e2.max_val) == (91, 100)

    @pytest.mark.parametrize("n", [1, 5])
    def test_identity(self, n):
        e = value_extrema(CsrMatrix.from_dense(np.eye(n)))
        assert (e.min_val, e.max_val, e.range) == (1, 1, 0)

    def test_implicit_zeros_ignored(self):
        e = value_extrema(CsrMatrix.from_dense([[3, 0], [0, 5]]))
        assert e.min_val == 3

    def test_empty(self):
        with pytest.raises(EmptyMatrix):
            value_extrema(CsrMatrix(2, [0, 0, 0], [], []))


class TestBlockPartition:
    def test_fig1_grid(self, fig1_matrix):
        g = block_partition(fig1_matrix, 2)
        assert g.block_order == 2
        np.testing.assert_array_equal(g.nnz, [[4, 0], [0, 2]])
        assert not g.log_path
        assert g.gamma[0, 0] == 5.5 and g.gamma[1, 1] == 1.0
        assert np.isnan(g.gamma[0, 1])
        assert (g.gamma_min, g.gamma_max) == (1.0, 5.5)

    def test_log_path(self):
        A = CsrMatrix.from_dense([[1.0, 1024.0], [0.0, 0.0]])
        g = block_partition(A, 1)
        assert g.log_path
        assert g.gamma[0, 0] == 5.0

    def test_single_entry_blocks(self, rng):
        D = (rng.random((4, 4)) < 0.5) * 3.0
        D[0, 0] = 1.0
        g = block_partition(CsrMatrix.from_dense(D), 4)
        np.testing.assert_array_equal(g.nnz, (D != 0).astype(int))

    def test_resolution_larger_than_order(self, fig1_matrix):
        g = block_partition(fig1_matrix, 8)
        assert g.block_order == 1 and g.nnz.sum() == fig1_matrix.nnz

    @pytest.mark.parametrize("m", [0, -1, 2.5])
    def test_bad_resolution(self, fig1_matrix, m):
        with pytest.raises(BadResolution):
            block_partition(fig1_matrix, m)

    @settings(max_examples=80, deadline=None)
    @given(sparse_matrices(), st.integers(1, 16))
    def test_conservation_and_bias(self, A, m):
        g = block_partition(A, m)
        assert g.nnz.sum() == A.canonicalize().nnz
        occ = g.occupied
        lower = 0.0 if g.log_path else 1.0
        assert np.all(g.gamma[occ] >= lower - 1e-12)
        if not g.log_path:
            assert np.all(g.gamma[occ] <= value_extrema(A).range + 1 + 1e-9)
        assert g.gamma_min <= g.gamma_max

    @settings(max_examples=40, deadline=None)
    @given(sparse_matrices(), st.integers(1, 8), st.integers(1, 100))
    def test_gamma_shift_invariant_for_integers(self, A, m, c):
        # integer-valued matrices make the shifted bias exact
        A = CsrMatrix(A.order, A.row_offsets, A.col_indices, np.abs(np.round(A.values)) + 1.0)
        g1, g2 = block_partition(A, m), block_partition(A.shift(c), m)
        np.testing.assert_array_equal(g1.gamma, g2.gamma)
