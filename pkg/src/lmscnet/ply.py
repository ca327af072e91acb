"""ASCII PLY export of labelled voxels as coloured points."""
from __future__ import annotations

import numpy as np

from .voxel import FREE, UNKNOWN, ClassTable, LabelGrid


def export_ply(grid: LabelGrid, classes: ClassTable, origin=(0.0, 0.0, 0.0)) -> str:
    """One vertex per known non-free voxel at its centre, coloured by class."""
    idx = np.argwhere((grid.labels != FREE) & (grid.labels != UNKNOWN))
    centers = (idx + 0.5) * grid.dims.voxel_size + np.asarray(origin, dtype=np.float64)
    labels = grid.labels[tuple(idx.T)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(idx)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property ushort label",
        "end_header",
    ]
    for (x, y, z), c in zip(centers, labels):
        r, g, b = classes.color(int(c))
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b} {int(c)}")
    return "\n".join(lines) + "\n"


def read_ply_vertices(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Vertex positions (n, 3) and labels (n,) from a file written by export_ply."""
    head, _, body = text.partition("end_header\n")
    n = next(int(l.split()[2]) for l in head.splitlines() if l.startswith("element vertex"))
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.uint16)
    rows = np.loadtxt(body.splitlines()[:n], ndmin=2)
    return rows[:, :3], rows[:, 6].astype(np.uint16)
