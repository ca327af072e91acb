"""Dataset manifests and sample loading.

A manifest is a JSON document::

    {
      "dims": {"nx": 64, "ny": 64, "nz": 8, "voxel_size": 0.2},
      "origin": [0.0, 0.0, 0.0],
      "classes": ["road", "building", "car"],
      "label_map": {"0": 0, "1": 1, "2": 2, "3": 3},
      "samples": [{"occupancy": "000.bin", "labels": "000.label", "points": "000.pts"}]
    }

Paths are relative to the manifest's directory; ``points`` is optional.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError, FormatError
from .voxel import (
    ClassTable,
    GridDims,
    LabelGrid,
    OccupancyGrid,
    PointCloud,
    load_labels,
    load_occupancy,
)


@dataclass(frozen=True)
class SampleEntry:
    occupancy: str
    labels: str | None = None
    points: str | None = None


@dataclass
class Manifest:
    dims: GridDims
    classes: ClassTable
    label_map: dict[int, int]
    samples: list[SampleEntry]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    root: Path = field(default_factory=Path)

    def to_json(self) -> str:
        doc = {
            "dims": {"nx": self.dims.nx, "ny": self.dims.ny, "nz": self.dims.nz, "voxel_size": self.dims.voxel_size},
            "origin": list(self.origin),
            "classes": list(self.classes.names),
            "label_map": {str(k): v for k, v in sorted(self.label_map.items())},
            "samples": [{k: v for k, v in vars(s).items() if v is not None} for s in self.samples],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        dims = GridDims(**doc["dims"])
        samples = [SampleEntry(**s) for s in doc["samples"]]
        return Manifest(
            dims=dims,
            classes=ClassTable(tuple(doc["classes"])),
            label_map={int(k): int(v) for k, v in doc["label_map"].items()},
            samples=samples,
            origin=tuple(doc.get("origin", (0.0, 0.0, 0.0))),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


@dataclass
class Sample:
    occupancy: OccupancyGrid
    labels: LabelGrid | None
    points: PointCloud | None = None


class VoxelDataset:
    """Random-access view over a manifest's samples."""

    def __init__(self, manifest: Manifest, cache: bool = True):
        self.manifest = manifest
        self._cache: dict[int, Sample] | None = {} if cache else None

    @classmethod
    def from_manifest(cls, path) -> VoxelDataset:
        return cls(load_manifest(path))

    @property
    def dims(self) -> GridDims:
        return self.manifest.dims

    @property
    def classes(self) -> ClassTable:
        return self.manifest.classes

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.manifest.origin

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def _read(self, rel: str) -> bytes:
        p = self.manifest.root / rel
        try:
            return p.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from exc

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        entry = self.manifest.samples[i]
        try:
            occ = load_occupancy(self._read(entry.occupancy), self.dims)
            labels = None
            if entry.labels is not None:
                labels = load_labels(self._read(entry.labels), self.dims, self.manifest.label_map)
                labels.validate(self.classes.num_classes)
            points = PointCloud.from_bytes(self._read(entry.points)) if entry.points else None
        except FormatError as exc:
            raise DataError(f"sample {i}: {exc}") from exc
        sample = Sample(occ, labels, points)
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class InMemoryDataset:
    """Same interface as VoxelDataset for samples built in code."""

    def __init__(self, samples: list[Sample], dims: GridDims, classes: ClassTable, origin=(0.0, 0.0, 0.0)):
        self.samples = list(samples)
        self.dims = dims
        self.classes = classes
        self.origin = tuple(origin)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)
