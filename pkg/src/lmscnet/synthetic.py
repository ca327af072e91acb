"""Procedural street scenes in the benchmark's byte formats.

Each scene is a ground plane (road strip plus terrain), a few buildings
along the border and some cars on the road. The sparse input comes from
casting rays of a virtual multi-layer LiDAR and randomly dropping returns.
Ground truth labels every solid voxel; free voxels are known only when a
sensor pose along the road has line of sight to them.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Manifest, Sample, SampleEntry
from .voxel import (
    FREE,
    UNKNOWN,
    ClassTable,
    GridDims,
    LabelGrid,
    PointCloud,
    identity_label_map,
    save_labels,
    voxelize,
)

N_RINGS = 64
ELEVATION_DEG = (-28.0, 4.0)


def _pick(classes: ClassTable, *names: str) -> int | None:
    for n in names:
        if n in classes.names:
            return classes.id(n)
    return None


def _scene_labels(dims: GridDims, classes: ClassTable, rng: np.random.Generator, keep_clear: tuple[int, int]) -> np.ndarray:
    nx, ny, nz = dims.shape
    labels = np.full(dims.shape, FREE, dtype=np.uint16)
    road = _pick(classes, "road", "parking", "sidewalk")
    ground = _pick(classes, "terrain", "sidewalk", "road")
    building = _pick(classes, "building", "fence", "vegetation")
    car = _pick(classes, "car", "truck", "other-vehicle")

    y0 = int(ny * rng.uniform(0.3, 0.4))
    y1 = int(ny * rng.uniform(0.6, 0.7))
    if ground is not None:
        labels[:, :, 0] = ground
    if road is not None:
        labels[:, y0:y1, 0] = road

    if building is not None:
        first = int(rng.integers(0, 2))
        for side in (first, 1 - first):
            if side != first and rng.random() < 0.3:
                continue
            depth = max(2, int(ny * rng.uniform(0.08, 0.18)))
            xa = int(nx * rng.uniform(0.0, 0.3))
            xb = int(nx * rng.uniform(0.6, 1.0))
            height = int(rng.integers(max(2, nz // 2), nz + 1))
            ys = slice(0, depth) if side == 0 else slice(ny - depth, ny)
            labels[xa:xb, ys, 1:height] = building

    if car is not None:
        cx, cy = keep_clear
        n_cars = int(rng.integers(2, 5))
        for _ in range(40):
            if n_cars == 0:
                break
            lx = max(2, int(nx * rng.uniform(0.08, 0.14)))
            ly = max(2, int(ny * rng.uniform(0.05, 0.08)))
            lz = max(1, min(nz - 2, int(rng.integers(max(1, nz // 4), max(2, nz // 2) + 1))))
            x = int(rng.integers(0, nx - lx))
            y = int(rng.integers(y0, max(y0 + 1, y1 - ly)))
            if x - 2 <= cx < x + lx + 2 and y - 2 <= cy < y + ly + 2:
                continue
            region = labels[x:x + lx, y:y + ly, 1:1 + lz]
            if np.any(region != FREE):
                continue
            region[...] = car
            n_cars -= 1
    return labels


def _cast_rays(solid: np.ndarray, dims: GridDims, sensor: np.ndarray, rng: np.random.Generator,
               n_azimuth: int, drop_prob: float) -> PointCloud:
    elev = np.deg2rad(np.linspace(ELEVATION_DEG[1], ELEVATION_DEG[0], N_RINGS))
    azim = np.linspace(0.0, 2 * np.pi, n_azimuth, endpoint=False)
    ring = np.repeat(np.arange(N_RINGS), n_azimuth)
    e = np.repeat(elev, n_azimuth)
    a = np.tile(azim, N_RINGS)
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1)
    keep = rng.random(len(dirs)) >= drop_prob
    dirs, ring = dirs[keep], ring[keep]

    vs = dims.voxel_size
    extent = np.array(dims.shape) * vs
    t = np.arange(1, int(np.linalg.norm(extent) / (0.25 * vs)) + 1) * (0.25 * vs)
    hits_xyz, hits_ring = [], []
    for start in range(0, len(dirs), 2048):
        d = dirs[start:start + 2048]
        pts = sensor[None, None, :] + d[:, None, :] * t[None, :, None]
        idx = np.floor(pts / vs).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(dims.shape)), axis=2)
        clipped = np.where(inside[..., None], idx, 0)
        hit = inside & solid[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        any_hit = hit.any(axis=1)
        first = hit.argmax(axis=1)
        rows = np.nonzero(any_hit)[0]
        hits_xyz.append(pts[rows, first[rows]])
        hits_ring.append(ring[start:start + 2048][rows])
    return PointCloud(np.concatenate(hits_xyz), np.concatenate(hits_ring))


def _visible_free(solid: np.ndarray, dims: GridDims, poses: list[np.ndarray]) -> np.ndarray:
    """Free voxels with an unobstructed segment to at least one pose."""
    vs = dims.voxel_size
    free_idx = np.argwhere(~solid)
    centers = (free_idx + 0.5) * vs
    visible = np.zeros(len(free_idx), dtype=bool)
    n_steps = int(np.ceil(np.linalg.norm(np.array(dims.shape)) * 2))
    frac = (np.arange(1, n_steps) / n_steps)[None, :, None]
    for pose in poses:
        for start in range(0, len(free_idx), 4096):
            c = centers[start:start + 4096]
            pts = pose[None, None, :] + (c - pose)[:, None, :] * frac
            idx = np.clip(np.floor(pts / vs).astype(np.int64), 0, np.array(dims.shape) - 1)
            blocked = solid[idx[..., 0], idx[..., 1], idx[..., 2]].any(axis=1)
            visible[start:start + 4096] |= ~blocked
    out = np.zeros(dims.shape, dtype=bool)
    out[tuple(free_idx[visible].T)] = True
    return out


def make_scene(dims: GridDims, classes: ClassTable, seed: int, n_azimuth: int = 360, drop_prob: float = 0.1) -> Sample:
    """Build one scene: sparse scan occupancy, semi-dense labels and the raw points."""
    rng = np.random.default_rng(seed)
    vs = dims.voxel_size
    sensor_vox = (dims.nx // 2, dims.ny // 2)
    full = _scene_labels(dims, classes, rng, sensor_vox)
    solid = full != FREE
    sensor_z = min(1.8, 0.75 * dims.nz * vs)
    sensor = np.array([(sensor_vox[0] + 0.5) * vs, (sensor_vox[1] + 0.5) * vs, sensor_z])
    points = _cast_rays(solid, dims, sensor, rng, n_azimuth, drop_prob)

    poses = [sensor + np.array([dx * dims.nx * vs, 0.0, 0.0]) for dx in (-0.25, 0.0, 0.25)]
    known = solid | _visible_free(solid, dims, poses)
    labels = np.where(known, full, UNKNOWN).astype(np.uint16)
    occupancy = voxelize(points, (0.0, 0.0, 0.0), dims)
    return Sample(occupancy, LabelGrid(dims, labels), points)


def write_dataset(out_dir, count: int, dims: GridDims, seed: int, classes: ClassTable | None = None) -> Path:
    """Generate ``count`` scenes under ``out_dir`` and return the manifest path."""
    classes = classes or ClassTable()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label_map = identity_label_map(classes.num_classes)
    entries = []
    for i in range(count):
        sample = make_scene(dims, classes, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        stem = f"{i:06d}"
        (out / f"{stem}.bin").write_bytes(sample.occupancy.to_bytes())
        (out / f"{stem}.label").write_bytes(save_labels(sample.labels, label_map))
        (out / f"{stem}.pts").write_bytes(sample.points.to_bytes())
        entries.append(SampleEntry(f"{stem}.bin", f"{stem}.label", f"{stem}.pts"))
    manifest = Manifest(dims=dims, classes=classes, label_map=label_map, samples=entries)
    path = out / "manifest.json"
    manifest.save(path)
    return path
