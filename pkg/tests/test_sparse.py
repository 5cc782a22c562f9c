import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from scpuq.sparse import DuplicatePositionError, InvalidShapeError, SparseNdArray

shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


def dense_arrays(tol=1e-5):
    def build(shape):
        elems = st.one_of(st.just(0.0), st.floats(-100, 100).filter(lambda v: abs(v) > tol))
        return hnp.arrays(float, shape, elements=elems)
    return shapes.flatmap(build)


def test_new_array_is_empty():
    a = SparseNdArray((2, 3, 4))
    assert a.size() == 0
    assert a.to_dense().shape == (2, 3, 4)
    assert not a.to_dense().any()
    assert SparseNdArray((1,)).ndim == 1
    assert SparseNdArray((17, 13, 7)).shape == (17, 13, 7)


@pytest.mark.parametrize("shape", [(0,), (2, 0), (3, -1), ()])
def test_invalid_shape(shape):
    with pytest.raises(InvalidShapeError):
        SparseNdArray(shape)


def test_set_entry_overwrites():
    a = SparseNdArray((2, 2))
    a.set_entry((0, 0), 5.0).set_entry((0, 0), 7.0)
    assert a.get_entry((0, 0)) == 7.0
    assert a.size() == 1


def test_zero_entry_flushed():
    a = SparseNdArray((2, 3))
    a.set_entry((1, 2), 0.0)
    assert a.size() == 1
    assert a.flush().size() == 0


def test_set_distinct_positions_counts():
    a = SparseNdArray((4, 4))
    for k in range(7):
        a.set_entry((k % 4, k // 4), k + 1.0)
    assert a.size() == 7


def test_out_of_bounds():
    a = SparseNdArray((2, 2))
    with pytest.raises(IndexError):
        a.set_entry((2, 0), 1.0)
    with pytest.raises(IndexError):
        a.add_entry((0,), 1.0)
    with pytest.raises(IndexError):
        a.get_entry((-1, 0))


def test_duplicates_must_be_resolved():
    a = SparseNdArray((2, 2))
    a.add_entry((0, 0), 2.0).add_entry((0, 0), 2.0)
    with pytest.raises(DuplicatePositionError):
        a.get_entry((0, 0))
    assert a.to_dense()[0, 0] == 4.0
    a.remove_duplicates(combiner=sum)
    assert a.get_entry((0, 0)) == 4.0


def test_remove_duplicates_scalar_and_targeted():
    a = SparseNdArray((3,))
    for v in (1.0, 2.0):
        a.add_entry((0,), v)
        a.add_entry((1,), v)
    a.remove_duplicates(posn=(1,), combiner=max)
    assert a.get_entry((1,)) == 2.0
    with pytest.raises(DuplicatePositionError):
        a.get_entry((0,))
    a.remove_duplicates(combiner=-5.0)
    assert a.get_entry((0,)) == -5.0


def test_flush_default_tolerance():
    a = SparseNdArray((3,))
    a.set_entry((0,), 1e-6).set_entry((1,), 1e-4)
    a.flush()
    assert a.size() == 1
    assert a.get_entry((1,)) == 1e-4


def test_iterate_lexicographic():
    a = SparseNdArray((3, 3))
    for p in [(2, 0), (0, 2), (1, 1), (0, 0)]:
        a.set_entry(p, 1.0)
    assert [p for p, _ in a.iterate()] == sorted([(2, 0), (0, 2), (1, 1), (0, 0)])


def test_from_coords_and_scipy():
    a = SparseNdArray.from_coords([[0, 1], [2, 0], [0, 1]], [1.0, 2.0, 3.0])
    assert a.shape == (3, 2)
    assert np.array_equal(a.to_scipy().toarray(), a.to_dense())
    assert a.to_dense()[0, 1] == 4.0


def test_text_dump_format():
    a = SparseNdArray((2, 3))
    a.set_entry((1, 2), 0.5)
    text = a.dumps()
    assert text.splitlines()[0] == "# shape 2,3"
    assert text.splitlines()[1] == "1,2\t0.5"
    with pytest.raises(ValueError):
        SparseNdArray.loads("1,2\t0.5")


@given(dense_arrays())
def test_dense_roundtrip(D):
    S = SparseNdArray.from_dense(D)
    assert np.array_equal(S.to_dense(), D)
    assert np.array_equal(SparseNdArray.loads(S.dumps()).to_dense(), D)
    assert np.array_equal(S.copy().flush().to_dense(), D)


@given(dense_arrays(), st.data())
def test_swapaxes_involution(D, data):
    S = SparseNdArray.from_dense(D)
    i = data.draw(st.integers(0, D.ndim - 1))
    j = data.draw(st.integers(0, D.ndim - 1))
    T = S.swapaxes(i, j)
    assert np.array_equal(T.to_dense(), np.swapaxes(D, i, j))
    assert np.array_equal(T.swapaxes(i, j).to_dense(), D)


@given(hnp.arrays(float, (4, 3), elements=st.floats(-1e-3, 1e-3)), st.floats(1e-6, 1e-3))
def test_flush_changes_entries_by_at_most_tol(D, tol):
    S = SparseNdArray.from_dense(D)
    assert np.abs(S.flush(tol).to_dense() - D).max() <= tol
    positions = [p for p, _ in S.iterate()]
    assert len(positions) == len(set(positions))
    assert all(abs(v) > tol for _, v in S.iterate())


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.floats(-10, 10)), max_size=30))
def test_add_then_sum_matches_dense_accumulation(entries):
    a = SparseNdArray((3, 3))
    ref = np.zeros((3, 3))
    for i, j, v in entries:
        a.add_entry((i, j), v)
        ref[i, j] += v
    before = a.to_dense()
    a.remove_duplicates(combiner=sum)
    assert np.allclose(a.to_dense(), ref)
    assert np.allclose(before, ref)
