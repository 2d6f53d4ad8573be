"""Benchmarks for the dual-path kernels and the patch sampler.

``bench_kernels`` times every kernel on both its numba and numpy paths
inside one process; the numba flavours are skipped when JIT is disabled
(run once with and once without ``PATCHFORGE_DISABLE_NUMBA=1`` for a
clean comparison of the selected paths).
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .accel import JIT_ENABLED
from .hetgraph import synth_mag
from .rng import substream
from .sampler import SamplingPlan, sample_patch


def _time(fn, repeats: int) -> float:
    fn()  # warmup (and JIT compile)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(size: int = 20_000, width: int = 64, repeats: int = 20, seed: int = 0) -> list:
    """Per-kernel mean seconds; rows of (kernel, path, seconds)."""
    rng = substream(seed, "bench")
    rows = []

    data = rng.normal(size=(size, width)).astype(np.float32)
    seg = rng.integers(0, size // 8, size)
    out = np.zeros((size // 8, width), dtype=np.float32)

    def seg_numba():
        out.fill(0)
        kernels.segment_sum_rows_numba(data, seg, out)

    def seg_numpy():
        out.fill(0)
        kernels.segment_sum_rows_numpy(data, seg, out)

    if JIT_ENABLED:
        rows.append(("segment_sum", "numba", _time(seg_numba, repeats)))
    rows.append(("segment_sum", "numpy", _time(seg_numpy, repeats)))

    n = 96
    base = rng.normal(size=(n, n))
    sym = (base + base.T) / 2

    def jac(impl):
        def run():
            a = sym.copy()
            v = np.eye(n)
            impl(a, v, 1e-14, 50)
        return run

    if JIT_ENABLED:
        rows.append(("jacobi_eigh", "numba", _time(jac(kernels.jacobi_sweeps_numba), max(repeats // 4, 1))))
    rows.append(("jacobi_eigh", "numpy", _time(jac(kernels.jacobi_sweeps_numpy), max(repeats // 4, 1))))

    graph = synth_mag(2000, 600, 40, 4, 16, seed)
    plan = SamplingPlan(8, 8, 4, 4, 4, 2, 4, 2)

    def patches(core):
        def run():
            saved = kernels.patch_core
            kernels.patch_core = core
            try:
                for c in range(32):
                    sample_patch(graph, c, plan, substream(seed, "bench-patch", c))
            finally:
                kernels.patch_core = saved
        return run

    if JIT_ENABLED:
        rows.append(("sample_patch_x32", "numba", _time(patches(kernels.patch_core_numba), max(repeats // 4, 1))))
    rows.append(("sample_patch_x32", "numpy", _time(patches(kernels.patch_core_numpy), max(repeats // 4, 1))))
    return rows


def bench_sampler(graph, plan: SamplingPlan, seconds: float, seed: int) -> dict:
    """Sample patches for a wall-clock budget; throughput plus size histogram."""
    canonical = np.flatnonzero(graph.fusion_map == np.arange(graph.num_papers))
    centers = substream(seed, "bench-centers")
    node_counts = []
    edge_counts = []
    start = time.perf_counter()
    idx = 0
    while time.perf_counter() - start < seconds:
        center = int(canonical[centers.integers(0, len(canonical))])
        patch = sample_patch(graph, center, plan, substream(seed, "bench-sampler", idx))
        node_counts.append(patch.num_nodes)
        edge_counts.append(patch.num_edges)
        idx += 1
    elapsed = time.perf_counter() - start
    counts = np.asarray(node_counts)
    hist, edges = np.histogram(counts, bins=10) if len(counts) else (np.zeros(10, dtype=int), np.arange(11))
    return {
        "patches": idx,
        "seconds": elapsed,
        "patches_per_sec": idx / elapsed if elapsed > 0 else 0.0,
        "mean_nodes": float(counts.mean()) if idx else 0.0,
        "mean_edges": float(np.mean(edge_counts)) if idx else 0.0,
        "hist_counts": hist,
        "hist_edges": edges,
    }
