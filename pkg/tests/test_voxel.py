import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmscnet.data import InMemoryDataset, Sample, VoxelDataset
from lmscnet.errors import DataError, FormatError
from lmscnet.synthetic import make_scene, write_dataset
from lmscnet.voxel import (
    UNKNOWN,
    ClassTable,
    GridDims,
    LabelGrid,
    OccupancyGrid,
    PointCloud,
    class_weights,
    compute_class_frequencies,
    flip_xy,
    grid_to_input,
    load_labels,
    load_occupancy,
    majority_pool,
    save_labels,
    subsample_layers,
    voxelize,
)

from oracles import majority_vote_loops

SMALL = GridDims(8, 8, 8)


def random_labels(rng, dims, n_cls=5, p_unknown=0.2):
    lab = rng.integers(0, n_cls, size=dims.shape).astype(np.uint16)
    lab[rng.random(dims.shape) < p_unknown] = UNKNOWN
    return LabelGrid(dims, lab)


# --- occupancy stream --------------------------------------------------------

def test_default_grid_stream_length():
    dims = GridDims()
    assert dims.shape == (256, 256, 32)
    assert len(OccupancyGrid.empty(dims).to_bytes()) == 262144


def test_msb_first_single_voxel():
    grid = load_occupancy(bytes([0b10000000]), GridDims(2, 2, 2))
    dense = grid.dense()
    assert dense[0, 0, 0] and dense.sum() == 1


def test_linear_index_order():
    dims = GridDims(2, 2, 2)
    # bit 6 of byte 0 is linear index 1 -> (x=0, y=0, z=1); bit 5 -> (0, 1, 0)
    dense = load_occupancy(bytes([0b01100000]), dims).dense()
    assert dense[0, 0, 1] and dense[0, 1, 0] and dense.sum() == 2


def test_occupancy_round_trip(rng):
    bits = rng.random(SMALL.shape) < 0.3
    grid = OccupancyGrid.from_dense(SMALL, bits)
    back = load_occupancy(grid.to_bytes(), SMALL)
    assert back == grid
    np.testing.assert_array_equal(back.dense(), bits)


def test_occupancy_wrong_length():
    with pytest.raises(FormatError, match="expected 64"):
        load_occupancy(bytes(63), SMALL)


# --- label stream ------------------------------------------------------------

def test_zero_labels_are_free():
    grid = load_labels(bytes(SMALL.num_voxels * 2), SMALL, {0: 0, 1: 1})
    assert not grid.labels.any()


def test_unmapped_raw_id_becomes_unknown():
    raw = np.zeros(SMALL.shape, dtype="<u2")
    raw[1, 2, 3] = 40
    raw[0, 0, 0] = 255
    grid = load_labels(raw.tobytes(), SMALL, {0: 0, 10: 1})
    assert grid.labels[1, 2, 3] == UNKNOWN
    assert grid.labels[0, 0, 0] == UNKNOWN


def test_label_round_trip_with_inverse_map(rng):
    raw_to_internal = {0: 0, 10: 1, 40: 2, 50: 3}
    inverse = {v: k for k, v in raw_to_internal.items()}
    grid = random_labels(rng, SMALL, n_cls=4)
    data = save_labels(grid, inverse)
    assert len(data) == SMALL.num_voxels * 2
    assert load_labels(data, SMALL, raw_to_internal) == grid


def test_label_wrong_length():
    with pytest.raises(FormatError):
        load_labels(bytes(5), SMALL)


# --- majority pooling ----------------------------------------------------------

def test_pool_unanimous():
    grid = LabelGrid(GridDims(2, 2, 2), np.full((2, 2, 2), 1, dtype=np.uint16))
    assert majority_pool(grid, 2).labels.item() == 1


def test_pool_five_three():
    lab = np.full(8, 6, dtype=np.uint16)
    lab[:5] = 1
    grid = LabelGrid(GridDims(2, 2, 2), lab.reshape(2, 2, 2))
    assert majority_pool(grid, 2).labels.item() == majority_vote_loops(grid.labels, 2, UNKNOWN).item() == 1


def test_pool_unknown_excluded():
    lab = np.array([0, 0, 0, 0, UNKNOWN, UNKNOWN, UNKNOWN, UNKNOWN], dtype=np.uint16)
    assert majority_pool(LabelGrid(GridDims(2, 2, 2), lab.reshape(2, 2, 2)), 2).labels.item() == 0


def test_pool_all_unknown_stays_unknown():
    lab = np.full((2, 2, 2), UNKNOWN, dtype=np.uint16)
    assert majority_pool(LabelGrid(GridDims(2, 2, 2), lab), 2).labels.item() == UNKNOWN


def test_pool_tie_goes_to_smallest():
    lab = np.array([3, 3, 3, 3, 2, 2, 2, 2], dtype=np.uint16)
    assert majority_pool(LabelGrid(GridDims(2, 2, 2), lab.reshape(2, 2, 2)), 2).labels.item() == 2


def test_pool_indivisible():
    with pytest.raises(DataError):
        majority_pool(LabelGrid(GridDims(6, 6, 6), np.zeros((6, 6, 6), np.uint16)), 4)


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_pool_matches_oracle(rng, factor):
    for _ in range(5):
        grid = random_labels(rng, GridDims(16, 16, 8), n_cls=4, p_unknown=0.5)
        np.testing.assert_array_equal(majority_pool(grid, factor).labels, majority_vote_loops(grid.labels, factor, UNKNOWN))


@pytest.mark.parametrize("fx,fy", [(True, False), (False, True), (True, True)])
def test_pool_commutes_with_flip(rng, fx, fy):
    grid = random_labels(rng, GridDims(16, 16, 8))
    occ = OccupancyGrid.empty(grid.dims)
    _, flipped = flip_xy(occ, grid, fx, fy)
    _, pooled_then_flipped = flip_xy(OccupancyGrid.empty(GridDims(4, 4, 2)), majority_pool(grid, 4), fx, fy)
    assert majority_pool(flipped, 4) == pooled_then_flipped


def test_pool_unknown_only_where_block_unknown(rng):
    grid = random_labels(rng, GridDims(16, 16, 8), p_unknown=0.9)
    pooled = majority_pool(grid, 2)
    blocks = grid.labels.reshape(8, 2, 8, 2, 4, 2).transpose(0, 2, 4, 1, 3, 5).reshape(8, 8, 4, 8)
    np.testing.assert_array_equal(pooled.labels == UNKNOWN, np.all(blocks == UNKNOWN, axis=-1))


# --- class statistics -----------------------------------------------------------

def test_frequencies_all_free():
    grid = LabelGrid(SMALL, np.zeros(SMALL.shape, np.uint16))
    freq = compute_class_frequencies([grid], 4)
    np.testing.assert_array_equal(freq, [SMALL.num_voxels, 0, 0, 0])


def test_frequencies_partition(rng):
    grids = [random_labels(rng, SMALL, n_cls=4) for _ in range(3)]
    freq = compute_class_frequencies(grids, 4)
    assert freq.sum() == sum(int(g.known().sum()) for g in grids)


def test_frequencies_manual_tally():
    dims = GridDims(2, 2, 2)
    a = np.array([0, 0, 1, 1, 1, 2, UNKNOWN, 0], dtype=np.uint16).reshape(2, 2, 2)
    b = np.array([3, 3, 3, 3, 0, 0, 0, 0], dtype=np.uint16).reshape(2, 2, 2)
    c = np.array([UNKNOWN] * 7 + [2], dtype=np.uint16).reshape(2, 2, 2)
    freq = compute_class_frequencies([LabelGrid(dims, g) for g in (a, b, c)], 4)
    # class 0: 3 + 4, class 1: 3, class 2: 1 + 1, class 3: 4
    np.testing.assert_array_equal(freq, [7, 3, 2, 4])


def test_frequencies_order_independent(rng):
    grids = [random_labels(rng, SMALL) for _ in range(4)]
    np.testing.assert_array_equal(
        class_weights(compute_class_frequencies(grids, 5)),
        class_weights(compute_class_frequencies(grids[::-1], 5)),
    )


def test_frequencies_empty_dataset():
    with pytest.raises(DataError):
        compute_class_frequencies([], 3)


def test_class_weight_closed_forms():
    w = class_weights([math.e**2 - 0.001, math.e - 0.001])
    assert abs(w[0] - 0.5) < 1e-12
    assert abs(w[1] - 1.0) < 1e-12


def test_class_weight_cap_for_rare_classes():
    w = class_weights([0, 1, 1e6])
    assert w[0] == w[1] == 10.0
    assert 0 < w[2] < 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 10**9), min_size=2, max_size=20, unique=True))
def test_class_weights_decrease_with_count(counts):
    counts = np.sort(np.array(counts))
    w = class_weights(counts)
    assert np.all(w > 0) and np.all(np.isfinite(w))
    assert np.all(np.diff(w) < 0)


# --- flips -----------------------------------------------------------------------

def test_flip_involution_and_count(rng):
    occ = OccupancyGrid.from_dense(SMALL, rng.random(SMALL.shape) < 0.3)
    lab = random_labels(rng, SMALL)
    for fx, fy in [(False, False), (True, False), (False, True), (True, True)]:
        o1, l1 = flip_xy(occ, lab, fx, fy)
        assert o1.count() == occ.count()
        o2, l2 = flip_xy(o1, l1, fx, fy)
        assert o2 == occ and l2 == lab
    o, l = flip_xy(occ, lab, False, False)
    assert o == occ and l == lab


def test_flip_never_touches_z(rng):
    dense = np.zeros(SMALL.shape, bool)
    dense[1, 2, 5] = True
    out, _ = flip_xy(OccupancyGrid.from_dense(SMALL, dense), None, True, True)
    assert out.dense()[6, 5, 5]


def test_flip_dim_mismatch():
    with pytest.raises(DataError):
        flip_xy(OccupancyGrid.empty(SMALL), LabelGrid(GridDims(8, 8, 16), np.zeros((8, 8, 16), np.uint16)), True, False)


# --- point clouds -------------------------------------------------------------------

def ring_cloud(rng, n=2000):
    return PointCloud(rng.uniform(0, 1.6, size=(n, 3)), rng.integers(0, 64, size=n))


def test_subsample_identity(rng):
    pc = ring_cloud(rng)
    out = subsample_layers(pc, 1)
    np.testing.assert_array_equal(out.xyz, pc.xyz)


def test_subsample_ring_count(rng):
    pc = PointCloud(np.zeros((64, 3)), np.arange(64))
    assert len(np.unique(subsample_layers(pc, 8).ring)) == 8


@pytest.mark.parametrize("k", [2, 4, 8])
def test_subsample_matches_filter(rng, k):
    pc = ring_cloud(rng)
    assert len(subsample_layers(pc, k)) == sum(1 for r in pc.ring if r % k == 0)


def test_voxelize_empty():
    assert voxelize(PointCloud(np.zeros((0, 3)), np.zeros(0)), (0, 0, 0), SMALL).count() == 0


def test_voxelize_half_voxel():
    origin = np.array([1.0, -2.0, 0.5])
    pc = PointCloud(origin[None] + SMALL.voxel_size / 2, [0])
    dense = voxelize(pc, origin, SMALL).dense()
    assert dense[0, 0, 0] and dense.sum() == 1


def test_voxelize_matches_binning(rng):
    pc = PointCloud(rng.uniform(-0.5, 2.0, size=(500, 3)), np.zeros(500))
    expected = set()
    for p in pc.xyz:
        idx = tuple(int(math.floor(c / SMALL.voxel_size)) for c in p)
        if all(0 <= i < n for i, n in zip(idx, SMALL.shape)):
            expected.add(idx)
    got = {tuple(int(v) for v in i) for i in np.argwhere(voxelize(pc, (0, 0, 0), SMALL).dense())}
    assert got == expected


def test_point_stream_round_trip(rng):
    pc = PointCloud(rng.uniform(0, 10, size=(20, 3)).astype(np.float32), rng.integers(0, 64, size=20))
    back = PointCloud.from_bytes(pc.to_bytes())
    np.testing.assert_array_equal(back.xyz, pc.xyz)
    np.testing.assert_array_equal(back.ring, pc.ring)


# --- network input ------------------------------------------------------------------

def test_grid_to_input_layout(rng):
    assert not grid_to_input(OccupancyGrid.empty(SMALL)).data.any()
    dense = np.zeros(SMALL.shape, bool)
    dense[3, 5, 1] = True
    t = grid_to_input(OccupancyGrid.from_dense(SMALL, dense)).data
    assert t.shape == (1, 8, 8, 8) and t[0, 1, 3, 5] == 1 and t.sum() == 1
    occ = OccupancyGrid.from_dense(SMALL, rng.random(SMALL.shape) < 0.4)
    assert grid_to_input(occ).data.sum() == occ.count()
    assert set(np.unique(grid_to_input(occ).data)) <= {0.0, 1.0}


def test_grid_to_input_injective(rng):
    a = rng.random(SMALL.shape) < 0.4
    b = a.copy()
    b[7, 0, 3] = not b[7, 0, 3]
    ta = grid_to_input(OccupancyGrid.from_dense(SMALL, a)).data
    tb = grid_to_input(OccupancyGrid.from_dense(SMALL, b)).data
    assert not np.array_equal(ta, tb)


# --- synthetic scenes and manifests -------------------------------------------------

CLASSES4 = ClassTable(("road", "building", "car"))


def test_synthetic_scene_properties():
    dims = GridDims(32, 32, 8)
    s = make_scene(dims, CLASSES4, seed=3)
    known = s.labels.known()
    assert s.occupancy.density() < known.mean()
    s.labels.validate(CLASSES4.num_classes)
    assert set(np.unique(s.labels.labels)) <= {0, 1, 2, 3, UNKNOWN}
    # every scan return lands on a labelled solid voxel
    occ = s.occupancy.dense()
    assert np.all(s.labels.labels[occ] != 0)


def test_synthetic_dataset_files_deterministic(tmp_path):
    dims = GridDims(16, 16, 8)
    m1 = write_dataset(tmp_path / "a", 2, dims, seed=5, classes=CLASSES4)
    m2 = write_dataset(tmp_path / "b", 2, dims, seed=5, classes=CLASSES4)
    for name in ("000000.bin", "000001.label", "000001.pts", "manifest.json"):
        assert (m1.parent / name).read_bytes() == (m2.parent / name).read_bytes()
    ds = VoxelDataset.from_manifest(m1)
    assert len(ds) == 2 and ds.dims == dims and ds.classes == CLASSES4
    assert ds[1].points is not None


def test_manifest_missing_file(tmp_path):
    dims = GridDims(16, 16, 8)
    m = write_dataset(tmp_path, 1, dims, seed=0, classes=CLASSES4)
    (tmp_path / "000000.label").unlink()
    with pytest.raises(DataError, match="000000.label"):
        VoxelDataset.from_manifest(m)[0]


def test_manifest_not_found(tmp_path):
    with pytest.raises(DataError, match="nope.json"):
        VoxelDataset.from_manifest(tmp_path / "nope.json")


def test_in_memory_dataset():
    dims = GridDims(8, 8, 8)
    s = Sample(OccupancyGrid.empty(dims), LabelGrid(dims, np.zeros(dims.shape, np.uint16)))
    ds = InMemoryDataset([s], dims, CLASSES4)
    assert len(ds) == 1 and ds[0] is s
