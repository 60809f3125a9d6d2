import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_merge, naive_slice
from reshard.errors import (
    DtypeMismatch,
    InvalidSplitPoint,
    MalformedTensor,
    RangeOutOfBounds,
    RankMismatch,
    ShapeMismatch,
    TilingGap,
    TilingOverlap,
)
from reshard.tensor import (
    Dtype,
    Range,
    SplitGrid,
    Tensor,
    arange,
    compose,
    from_ptx,
    grid_cells,
    grid_from_ranges,
    grid_refine,
    merge,
    parse_range_spec,
    random_tensor,
    slice_tensor,
    to_ptx,
)


def values(t):
    return t.to_numpy().tolist()


class TestSlice:
    def test_column_slice_matches_oracle(self):
        t = arange((4, 6))
        r = Range.parse("[:,2:4]", t.shape)
        got = slice_tensor(t, r)
        assert got == naive_slice(t, r)
        assert values(got) == [[2, 3], [8, 9], [14, 15], [20, 21]]

    def test_full_range_is_identity(self):
        t = random_tensor((3, 5), Dtype.F16, np.random.default_rng(0))
        assert slice_tensor(t, t.full_range()) == t

    def test_single_element(self):
        got = slice_tensor(arange((6,)), Range.of((2, 3)))
        assert got.shape == (1,)
        assert values(got) == [2.0]

    def test_out_of_bounds(self):
        with pytest.raises(RangeOutOfBounds):
            slice_tensor(arange((4,)), Range.of((2, 5)))

    def test_rank_mismatch(self):
        with pytest.raises(RankMismatch):
            slice_tensor(arange((4, 4)), Range.of((0, 2)))

    def test_composition(self):
        t = arange((6, 8))
        outer = Range.of((1, 5), (2, 8))
        inner = Range.of((1, 3), (0, 4))
        assert slice_tensor(slice_tensor(t, outer), inner) == slice_tensor(t, compose(outer, inner))

    @pytest.mark.parametrize("dtype", list(Dtype))
    def test_every_dtype_against_oracle(self, dtype):
        t = random_tensor((3, 4, 5), dtype, np.random.default_rng(dtype.code))
        r = Range.of((1, 3), (0, 4), (2, 5))
        assert slice_tensor(t, r) == naive_slice(t, r)

    def test_inputs_untouched(self):
        t = arange((4, 6))
        before = t.payload
        slice_tensor(t, Range.of((0, 2), (1, 3)))
        assert t.payload == before


class TestMerge:
    def test_halves(self):
        t = arange((6,))
        parts = [(r, slice_tensor(t, r)) for r in (Range.of((0, 3)), Range.of((3, 6)))]
        assert merge(parts, (6,)) == t

    def test_rebased_middle_cell(self):
        t = arange((6,))
        parts = [(Range.of((2, 3)), slice_tensor(t, Range.of((2, 3)))),
                 (Range.of((3, 4)), slice_tensor(t, Range.of((3, 4))))]
        got = merge(parts, (2,), origin=(2,))
        assert values(got) == [2.0, 3.0]

    def test_quadrants(self):
        t = arange((4, 6))
        cells = grid_cells((4, 6), SplitGrid((4, 6), ((2,), (3,))))
        parts = [(r, slice_tensor(t, r)) for r in cells]
        assert merge(parts, (4, 6)) == t
        assert merge(parts, (4, 6)) == naive_merge(parts, (4, 6), t.dtype)

    def test_gap(self):
        t = arange((6,))
        with pytest.raises(TilingGap):
            merge([(Range.of((0, 3)), slice_tensor(t, Range.of((0, 3))))], (6,))

    def test_overlap(self):
        t = arange((6,))
        parts = [(Range.of((0, 4)), slice_tensor(t, Range.of((0, 4)))),
                 (Range.of((2, 6)), slice_tensor(t, Range.of((2, 6))))]
        with pytest.raises(TilingOverlap):
            merge(parts, (6,))

    def test_dtype_mismatch(self):
        a = arange((3,), Dtype.F32)
        b = arange((3,), Dtype.I64)
        with pytest.raises(DtypeMismatch):
            merge([(Range.of((0, 3)), a), (Range.of((3, 6)), b)], (6,))

    def test_part_shape_must_match_range(self):
        with pytest.raises(ShapeMismatch):
            merge([(Range.of((0, 2)), arange((3,)))], (2,))


class TestGrid:
    def test_cells_1d(self):
        assert [str(r) for r in grid_cells((6,), SplitGrid.from_dict((6,), {0: [3]}))] == ["[0:3]", "[3:6]"]
        assert [str(r) for r in grid_cells((6,), SplitGrid.from_dict((6,), {0: [2, 4]}))] == [
            "[0:2]", "[2:4]", "[4:6]"]

    def test_cells_2d(self):
        cells = grid_cells((4, 6), SplitGrid.from_dict((4, 6), {1: [3]}))
        assert [str(r) for r in cells] == ["[0:4,0:3]", "[0:4,3:6]"]

    def test_invalid_points(self):
        for pts in ([0], [6], [3, 3], [4, 2], [7]):
            with pytest.raises(InvalidSplitPoint):
                SplitGrid.from_dict((6,), {0: pts})

    def test_refine_thirds_and_halves(self):
        a = SplitGrid.from_dict((6,), {0: [3]})
        b = SplitGrid.from_dict((6,), {0: [2, 4]})
        assert grid_refine(a, b).splits == ((2, 3, 4),)

    def test_refine_identity_cases(self):
        a = SplitGrid.from_dict((6,), {0: [3]})
        assert grid_refine(a, a) == a
        assert grid_refine(SplitGrid.identity((6,)), SplitGrid.from_dict((6,), {0: [1]})).splits == ((1,),)

    def test_refine_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            grid_refine(SplitGrid.identity((6,)), SplitGrid.identity((5,)))

    def test_grid_from_ranges(self):
        g = grid_from_ranges((4, 6), [Range.of((0, 4), (0, 3)), Range.of((0, 4), (3, 6))])
        assert g.splits == ((), (3,))


class TestRangeSpec:
    def test_open_bounds(self):
        assert parse_range_spec("[:,2:4]") == ((None, None), (2, 4))
        assert parse_range_spec("[1:, :3]") == ((1, None), (None, 3))
        assert Range.parse("[:,2:4]", (4, 6)) == Range.of((0, 4), (2, 4))

    @pytest.mark.parametrize("bad", ["", "[]", "2:4", "[a:b]", "[1:2:3]", "[-1:2]"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            parse_range_spec(bad)

    def test_empty_interval_rejected(self):
        with pytest.raises(RangeOutOfBounds):
            Range.parse("[3:3]", (6,))


class TestTensor:
    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeMismatch):
            Tensor(Dtype.F32, (0, 3), b"")

    def test_rejects_wrong_payload(self):
        with pytest.raises(ShapeMismatch):
            Tensor(Dtype.F32, (2,), b"\0" * 7)


class TestPtx:
    def test_golden_bytes(self):
        t = Tensor.from_numpy(np.array([[1, 2], [3, 4]], dtype="<i8"))
        blob = to_ptx(t)
        expected = (
            bytes.fromhex("50545831") + bytes([2, 2]) + struct.pack("<QQ", 2, 2)
            + struct.pack("<4q", 1, 2, 3, 4)
        )
        assert blob == expected
        assert from_ptx(blob) == t

    @pytest.mark.parametrize("blob", [b"PTX0\0\1" + b"\0" * 8, b"PTX1\x09\1" + struct.pack("<Q", 1) + b"x",
                                      b"PTX1\0\1" + struct.pack("<Q", 2) + b"\0" * 4])
    def test_malformed(self, blob):
        with pytest.raises(MalformedTensor):
            from_ptx(blob)

    def test_trailing_bytes(self):
        with pytest.raises(MalformedTensor):
            from_ptx(to_ptx(arange((2,))) + b"\0")


shapes = st.lists(st.integers(1, 5), min_size=1, max_size=3).map(tuple)


@st.composite
def tensor_and_grid(draw):
    shape = draw(shapes)
    dtype = draw(st.sampled_from(list(Dtype)))
    seed = draw(st.integers(0, 2**32 - 1))
    t = random_tensor(shape, dtype, np.random.default_rng(seed))
    splits = tuple(tuple(sorted(draw(st.sets(st.integers(1, n - 1), max_size=n - 1)))) if n > 1 else ()
                   for n in shape)
    return t, SplitGrid(shape, splits)


@settings(max_examples=150, deadline=None)
@given(tensor_and_grid())
def test_grid_round_trip(tg):
    t, g = tg
    parts = [(r, slice_tensor(t, r)) for r in grid_cells(t.shape, g)]
    for r, p in parts:
        assert p == naive_slice(t, r)
    assert merge(parts, t.shape) == t


@settings(max_examples=100, deadline=None)
@given(tensor_and_grid())
def test_ptx_round_trip(tg):
    t, _ = tg
    assert from_ptx(to_ptx(t)) == t


def _grid(shape, draw):
    return SplitGrid(shape, tuple(tuple(sorted(draw(st.sets(st.integers(1, n - 1), max_size=n - 1)))) if n > 1 else ()
                                  for n in shape))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_refine_is_a_lattice_join(data):
    shape = data.draw(shapes)
    a, b, c = (_grid(shape, data.draw) for _ in range(3))
    assert grid_refine(a, b) == grid_refine(b, a)
    assert grid_refine(grid_refine(a, b), c) == grid_refine(a, grid_refine(b, c))
    assert grid_refine(a, a) == a
    ab = grid_refine(a, b)
    for cell in ab.cells():
        assert sum(1 for x in a.cells() if x.contains(cell)) == 1
        assert sum(1 for x in b.cells() if x.contains(cell)) == 1
