"""Latency, throughput, parameter and FLOP report per inference scale set."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .model import LMSCNet, count_flops, count_params, parse_scales
from .tensor import Tensor, no_grad

MIN_REPS = 10
MIN_WARMUP = 3


@dataclass
class BenchReport:
    scales: tuple[int, ...]
    warmup: int
    reps: int
    latencies: list[float]
    mean: float
    median: float
    fps: float
    params: int
    flops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self)) + "\n"


def benchmark(model: LMSCNet, scales, reps: int = MIN_REPS, warmup: int = MIN_WARMUP, seed: int = 0) -> BenchReport:
    """Time the scale-pruned forward pass on a fixed random occupancy input."""
    if reps < MIN_REPS:
        raise ConfigError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < MIN_WARMUP:
        raise ConfigError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    scales = parse_scales(scales)
    cfg = model.config
    x = Tensor((np.random.default_rng(seed).random((1, cfg.nz, cfg.nx, cfg.ny)) < 0.07).astype(np.float64))
    times = []
    with no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            model.forward(x, scales)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    return BenchReport(scales, warmup, reps, times, mean, float(np.median(times)), 1.0 / mean,
                       count_params(model, scales), count_flops(model, scales))


def format_bench(reports: list[BenchReport]) -> str:
    header = f"{'scales':>10}  {'params(M)':>9}  {'GFLOPs':>8}  {'mean(ms)':>9}  {'median(ms)':>10}  {'FPS':>8}"
    lines = [header]
    for r in reports:
        tag = ",".join(map(str, r.scales))
        lines.append(f"{tag:>10}  {r.params / 1e6:9.3f}  {r.flops / 1e9:8.2f}  {1e3 * r.mean:9.2f}  "
                     f"{1e3 * r.median:10.2f}  {r.fps:8.2f}")
    return "\n".join(lines) + "\n"
