"""Rasterizer benchmark: tiled vs brute-force reference over a size/resolution
grid, reported as CSV. Absolute frame times are hardware-dependent; the
tiled-vs-reference ratio is the portable speed property.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, asdict
from typing import List, Sequence

import numpy as np

from .errors import ArgError
from .rasterizer import RenderSettings, render_reference, render_tiled
from .synth import random_scene

BENCH_CHANNELS = ("color", "feat_v", "feat_o", "identity")
BENCH_CONTRIB_CAP = 16  # bounds reference-path memory at large resolutions


@dataclass
class BenchRow:
    config_id: str
    n_gaussians: int
    width: int
    height: int
    channels: str
    impl: str
    mean_ms: float
    p50_ms: float
    p95_ms: float
    fps: float


def bench_render(scene_sizes: Sequence[int], resolutions: Sequence[int],
                 repetitions: int = 3, impls: Sequence[str] = ("tiled", "reference"),
                 seed: int = 7, d_g: int = 32, d_id: int = 16) -> List[BenchRow]:
    """Time both rasterizers on deterministic random scenes.

    One row per (config, impl); scenes are regenerated per config from a
    seed derived from the config index, so reruns measure identical work.
    """
    if repetitions < 3:
        raise ArgError(f"repetitions must be >= 3, got {repetitions}")
    rows: List[BenchRow] = []
    settings = RenderSettings(contrib_cap=BENCH_CONTRIB_CAP)
    for ci, (n, res) in enumerate((n, r) for n in scene_sizes for r in resolutions):
        g, cam = random_scene(int(n), seed=seed + ci, width=int(res), height=int(res),
                              d_g=d_g, d_id=d_id, scale=0.02)
        config_id = f"n{int(n)}_r{int(res)}"
        # warm both paths once so JIT compilation stays out of the timings
        render_tiled(g, cam, BENCH_CHANNELS, settings)
        render_reference(g, cam, BENCH_CHANNELS, settings)
        for impl in impls:
            fn = render_tiled if impl == "tiled" else render_reference
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                fn(g, cam, BENCH_CHANNELS, settings)
                times.append((time.perf_counter() - t0) * 1e3)
            arr = np.asarray(times)
            mean = float(arr.mean())
            rows.append(BenchRow(
                config_id=config_id, n_gaussians=int(n), width=int(res),
                height=int(res), channels="+".join(BENCH_CHANNELS), impl=impl,
                mean_ms=mean, p50_ms=float(np.percentile(arr, 50)),
                p95_ms=float(np.percentile(arr, 95)),
                fps=1000.0 / max(mean, 1e-9)))
    return rows


def write_bench_csv(rows: List[BenchRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(rows[0]).keys()) if rows else
                                ["config_id", "n_gaussians", "width", "height",
                                 "channels", "impl", "mean_ms", "p50_ms", "p95_ms", "fps"])
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
