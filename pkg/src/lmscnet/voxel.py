"""Voxel grids, their byte formats, and the label/point-cloud transforms.

Voxel linear order is x-major, then y, with z fastest:
``v = (x * ny + y) * nz + z``. Occupancy streams pack 8 voxels per byte,
most significant bit first. Label streams are little-endian uint16.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Tensor

UNKNOWN = 65535
RAW_UNKNOWN = 255
FREE = 0

SEMANTIC_KITTI_CLASSES = (
    "road",
    "sidewalk",
    "parking",
    "other-ground",
    "building",
    "car",
    "truck",
    "bicycle",
    "motorcycle",
    "other-vehicle",
    "vegetation",
    "trunk",
    "terrain",
    "person",
    "bicyclist",
    "motorcyclist",
    "fence",
    "pole",
    "traffic-sign",
)

# RGB legend colours, 0-255
PALETTE = {
    "free": (255, 255, 255),
    "car": (100, 150, 245),
    "bicycle": (100, 230, 245),
    "motorcycle": (30, 60, 150),
    "truck": (80, 30, 180),
    "other-vehicle": (100, 80, 250),
    "person": (255, 30, 30),
    "bicyclist": (255, 40, 200),
    "motorcyclist": (150, 30, 90),
    "road": (255, 0, 255),
    "parking": (255, 150, 255),
    "sidewalk": (75, 0, 75),
    "other-ground": (175, 0, 75),
    "building": (255, 200, 0),
    "fence": (255, 120, 50),
    "vegetation": (0, 175, 0),
    "trunk": (135, 60, 0),
    "terrain": (150, 240, 80),
    "pole": (255, 240, 150),
    "traffic-sign": (255, 0, 0),
}


@dataclass(frozen=True)
class GridDims:
    nx: int = 256
    ny: int = 256
    nz: int = 32
    voxel_size: float = 0.2

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) <= 0 or self.voxel_size <= 0:
            raise ConfigError(f"grid dims must be positive, got {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    def scaled(self, factor: int) -> GridDims:
        if self.nx % factor or self.ny % factor or self.nz % factor:
            raise DataError(f"grid {self.shape} is not divisible by {factor}")
        return GridDims(self.nx // factor, self.ny // factor, self.nz // factor, self.voxel_size * factor)


@dataclass(frozen=True)
class ClassTable:
    """Semantic classes; internal id 0 is free, ids 1..N follow ``names``."""

    names: tuple[str, ...] = SEMANTIC_KITTI_CLASSES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names) or "free" in self.names:
            raise ConfigError("class names must be unique and must not include 'free'")

    @property
    def num_semantic(self) -> int:
        return len(self.names)

    @property
    def num_classes(self) -> int:
        return len(self.names) + 1

    def id(self, name: str) -> int:
        if name == "free":
            return FREE
        return self.names.index(name) + 1

    def name(self, class_id: int) -> str:
        if class_id == UNKNOWN:
            return "unknown"
        return "free" if class_id == FREE else self.names[class_id - 1]

    def color(self, class_id: int) -> tuple[int, int, int]:
        return PALETTE.get(self.name(class_id), (128, 128, 128))


# --- grids -------------------------------------------------------------------

@dataclass(frozen=True)
class OccupancyGrid:
    dims: GridDims
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.bits.dtype != np.uint8 or self.bits.size * 8 != self.dims.num_voxels:
            raise FormatError(f"occupancy bitset holds {self.bits.size * 8} flags, grid needs {self.dims.num_voxels}")
        self.bits.setflags(write=False)

    @classmethod
    def from_dense(cls, dims: GridDims, occupied: np.ndarray) -> OccupancyGrid:
        occupied = np.asarray(occupied, dtype=bool)
        if occupied.shape != dims.shape:
            raise DataError(f"dense occupancy has shape {occupied.shape}, expected {dims.shape}")
        if dims.num_voxels % 8:
            raise FormatError(f"voxel count {dims.num_voxels} is not a multiple of 8")
        return cls(dims, np.packbits(occupied.reshape(-1), bitorder="big"))

    @classmethod
    def empty(cls, dims: GridDims) -> OccupancyGrid:
        return cls.from_dense(dims, np.zeros(dims.shape, dtype=bool))

    def dense(self) -> np.ndarray:
        return np.unpackbits(self.bits, bitorder="big").astype(bool).reshape(self.dims.shape)

    def count(self) -> int:
        return int(np.unpackbits(self.bits).sum())

    def density(self) -> float:
        return self.count() / self.dims.num_voxels

    def to_bytes(self) -> bytes:
        return self.bits.tobytes()

    def __eq__(self, other):
        return isinstance(other, OccupancyGrid) and self.dims == other.dims and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class LabelGrid:
    dims: GridDims
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.labels.shape != self.dims.shape:
            raise DataError(f"label array has shape {self.labels.shape}, expected {self.dims.shape}")
        if self.labels.dtype != np.uint16:
            object.__setattr__(self, "labels", self.labels.astype(np.uint16))
        self.labels.setflags(write=False)

    def known(self) -> np.ndarray:
        return self.labels != UNKNOWN

    def validate(self, num_classes: int) -> None:
        bad = (self.labels >= num_classes) & (self.labels != UNKNOWN)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"label {int(self.labels[idx])} at voxel {idx} is outside [0, {num_classes - 1}]")

    def __eq__(self, other):
        return isinstance(other, LabelGrid) and self.dims == other.dims and np.array_equal(self.labels, other.labels)


# --- byte formats --------------------------------------------------------------

def load_occupancy(data: bytes, dims: GridDims) -> OccupancyGrid:
    expected = dims.num_voxels // 8
    if dims.num_voxels % 8 or len(data) != expected:
        raise FormatError(f"occupancy stream has {len(data)} bytes, expected {expected}")
    return OccupancyGrid(dims, np.frombuffer(data, dtype=np.uint8).copy())


def save_occupancy(grid: OccupancyGrid) -> bytes:
    return grid.to_bytes()


def _lookup_table(mapping: Mapping[int, int], size: int = 65536) -> np.ndarray:
    table = np.full(size, UNKNOWN, dtype=np.uint16)
    for raw, internal in mapping.items():
        table[int(raw)] = int(internal)
    return table


def load_labels(data: bytes, dims: GridDims, raw_to_internal: Mapping[int, int] | None = None) -> LabelGrid:
    """Decode a uint16 label stream; raw ids absent from the map become unknown.

    Without a map ids pass through unchanged except the raw unknown marker.
    """
    expected = dims.num_voxels * 2
    if len(data) != expected:
        raise FormatError(f"label stream has {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype="<u2").reshape(dims.shape)
    if raw_to_internal is None:
        return LabelGrid(dims, np.where(raw == RAW_UNKNOWN, UNKNOWN, raw).astype(np.uint16))
    return LabelGrid(dims, _lookup_table(raw_to_internal)[raw])


def save_labels(grid: LabelGrid, internal_to_raw: Mapping[int, int] | None = None) -> bytes:
    """Encode as little-endian uint16; unknown is always written as the raw marker."""
    labels = grid.labels
    if internal_to_raw is not None:
        table = _lookup_table(internal_to_raw)
        table[UNKNOWN] = RAW_UNKNOWN
        labels = table[labels]
    else:
        labels = np.where(labels == UNKNOWN, RAW_UNKNOWN, labels)
    return labels.astype("<u2").tobytes()


def identity_label_map(num_classes: int) -> dict[int, int]:
    return {i: i for i in range(num_classes)}


# --- label statistics ------------------------------------------------------------

def majority_pool(grid: LabelGrid, factor: int) -> LabelGrid:
    """Downscale by ``factor`` per axis with a per-block majority vote.

    Unknown voxels do not vote; a block with no known voxel stays unknown.
    Ties go to the smallest class id.
    """
    if factor == 1:
        return grid
    small = grid.dims.scaled(factor)
    f = factor
    blocks = (
        grid.labels.reshape(small.nx, f, small.ny, f, small.nz, f)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, f**3)
    )
    n_blocks = blocks.shape[0]
    known = blocks != UNKNOWN
    votes = blocks[known].astype(np.int64)
    n_cls = int(votes.max()) + 1 if votes.size else 1
    owner = np.broadcast_to(np.arange(n_blocks)[:, None], blocks.shape)[known]
    counts = np.bincount(owner * n_cls + votes, minlength=n_blocks * n_cls).reshape(n_blocks, n_cls)
    pooled = counts.argmax(axis=1).astype(np.uint16)
    pooled[counts.sum(axis=1) == 0] = UNKNOWN
    return LabelGrid(small, pooled.reshape(small.shape))


def compute_class_frequencies(grids: Iterable[LabelGrid], num_classes: int) -> np.ndarray:
    """Absolute voxel count per class over ``grids``; unknown voxels excluded."""
    freq = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for grid in grids:
        seen = True
        grid.validate(num_classes)
        freq += np.bincount(grid.labels[grid.known()].astype(np.int64), minlength=num_classes)
    if not seen:
        raise DataError("cannot compute class frequencies of an empty dataset")
    return freq


def class_weights(freq: Sequence[float], eps: float = 1e-3, w_max: float = 10.0) -> np.ndarray:
    """``1 / ln(f_c + eps)`` per class, capped at ``w_max``.

    The cap also covers classes whose count makes the log non-positive.
    """
    f = np.asarray(freq, dtype=np.float64) + eps
    w = np.full(f.shape, w_max)
    ok = f > 1.0
    w[ok] = 1.0 / np.log(f[ok])
    return np.minimum(w, w_max)


# --- augmentation ------------------------------------------------------------------

def flip_array(a: np.ndarray, flip_x: bool, flip_y: bool, x_axis: int = 0, y_axis: int = 1) -> np.ndarray:
    axes = [ax for ax, on in ((x_axis, flip_x), (y_axis, flip_y)) if on]
    return np.ascontiguousarray(np.flip(a, axis=axes)) if axes else a


def flip_xy(occ: OccupancyGrid, labels: LabelGrid | None, flip_x: bool, flip_y: bool):
    """Mirror the grids along x and/or y. z is never flipped."""
    if labels is not None and labels.dims.shape != occ.dims.shape:
        raise DataError(f"occupancy grid {occ.dims.shape} and label grid {labels.dims.shape} differ")
    occ_out = OccupancyGrid.from_dense(occ.dims, flip_array(occ.dense(), flip_x, flip_y))
    if labels is None:
        return occ_out, None
    return occ_out, LabelGrid(labels.dims, flip_array(labels.labels, flip_x, flip_y))


# --- point clouds ----------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    xyz: np.ndarray  # (M, 3) metres
    ring: np.ndarray  # (M,) laser layer index

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
        if xyz.shape[0] != ring.shape[0]:
            raise DataError(f"{xyz.shape[0]} points but {ring.shape[0]} ring indices")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "ring", ring)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def to_bytes(self) -> bytes:
        """float32 little-endian records (x, y, z, ring)."""
        rec = np.concatenate([self.xyz, self.ring[:, None].astype(np.float64)], axis=1)
        return rec.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> PointCloud:
        if len(data) % 16:
            raise FormatError(f"point stream length {len(data)} is not a multiple of 16 bytes")
        rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
        return cls(rec[:, :3], np.rint(rec[:, 3]).astype(np.int64))


def subsample_layers(pc: PointCloud, keep_every: int) -> PointCloud:
    """Keep rings whose index is a multiple of ``keep_every``."""
    if keep_every not in (1, 2, 4, 8):
        raise ConfigError(f"keep_every must be one of 1, 2, 4, 8, got {keep_every}")
    keep = pc.ring % keep_every == 0
    return PointCloud(pc.xyz[keep], pc.ring[keep])


def voxelize(pc: PointCloud, origin: Sequence[float], dims: GridDims) -> OccupancyGrid:
    idx = np.floor((pc.xyz - np.asarray(origin, dtype=np.float64)) / dims.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(dims.shape)), axis=1)
    occ = np.zeros(dims.shape, dtype=bool)
    i = idx[inside]
    occ[i[:, 0], i[:, 1], i[:, 2]] = True
    return OccupancyGrid.from_dense(dims, occ)


def grid_to_input(occ: OccupancyGrid, dtype=None) -> Tensor:
    """(1, nz, nx, ny) tensor whose channel c is the z = c slice."""
    return Tensor(occ.dense().transpose(2, 0, 1)[None].astype(np.float64), dtype=dtype)
