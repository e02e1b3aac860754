"""Benchmark harness: wall-clock, traffic models, peak transient allocation.

Synthetic graphs with a prescribed edge budget drive the backend timing so
results do not depend on external structure data; degree-skew layouts
exercise aggregation robustness at a fixed edge count.
"""

from __future__ import annotations

import time

import numpy as np

from .flash import PipelineMode, flash_energy_forces, io_model_base, io_model_flash, segment_reduce
from .md import SimConfig, run_simulation, throughput_report
from .model import ModelConfig, init_params
from .neighbors import NeighborList, group_by_destination, group_by_source
from .reference import reference_energy_forces
from .systems import skewed_segments
from .traffic import AllocTracker

BENCH_SCHEMA = ("system,N,E,replicas,fused,segred,quant,steps,ms_per_step,"
                "timestep_mol_per_s,ns_per_day,io_base_bytes,io_flash_bytes,"
                "io_ratio,peak_edge_alloc_bytes,speedup_vs_reference")
# columns derived from measured wall time, excluded from byte-determinism
# comparisons (everything else is reproducible for fixed config and seed)
WALL_DERIVED_COLUMNS = ("ms_per_step", "timestep_mol_per_s", "ns_per_day",
                        "speedup_vs_reference")


def synthetic_graph(n: int, e: int, seed: int = 0) -> NeighborList:
    """Random directed graph with exactly e edges and no self loops."""
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n, size=e)
    dst = rng.integers(0, n, size=e)
    clash = src == dst
    while np.any(clash):
        dst[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = src == dst
    order = np.lexsort((src, dst))
    return NeighborList(src=src[order], dst=dst[order], n=n)


def _dense_instance(n: int, e: int, d: int, t_blocks: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    config = ModelConfig(hidden_dim=d, rbf_dim=max(d // 2, 2), num_blocks=t_blocks,
                         cutoff=1.5, num_atom_types=8, filter_hidden_dim=d,
                         readout_hidden_dim=max(d // 2, 2))
    params = init_params(config, seed)
    positions = rng.uniform(0, 1.0, size=(n, 3)).astype(np.float32)
    types = rng.integers(0, config.num_atom_types, size=n)
    nl = synthetic_graph(n, e, seed)
    layouts = (group_by_destination(nl), group_by_source(nl))
    return positions, types, params, nl, layouts


def time_pipelines(n: int, e: int, d: int = 128, t_blocks: int = 3,
                   repeats: int = 3, seed: int = 0,
                   mode: PipelineMode | None = None) -> dict:
    """Median end-to-end (energy + forces) step time per backend."""
    positions, types, params, nl, layouts = _dense_instance(n, e, d, t_blocks, seed)
    mode = mode or PipelineMode()

    def best_of(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    ref_s = best_of(lambda: reference_energy_forces(positions, types, params, nl=nl))
    flash_s = best_of(lambda: flash_energy_forces(positions, types, params, mode,
                                                  nl=nl, layouts=layouts))
    return {"reference_seconds": ref_s, "flash_seconds": flash_s,
            "speedup": ref_s / flash_s}


def measure_peak_alloc(n: int, e: int, d: int = 128, t_blocks: int = 3,
                       seed: int = 0) -> dict:
    """Instrumented peak transient edge-pipeline allocation per backend."""
    positions, types, params, nl, layouts = _dense_instance(n, e, d, t_blocks, seed)
    ref_tracker, flash_tracker = AllocTracker(), AllocTracker()
    reference_energy_forces(positions, types, params, nl=nl, tracker=ref_tracker)
    flash_energy_forces(positions, types, params, PipelineMode(), nl=nl,
                        layouts=layouts, tracker=flash_tracker)
    return {"reference_peak": ref_tracker.peak, "flash_peak": flash_tracker.peak,
            "ratio": ref_tracker.peak / max(flash_tracker.peak, 1)}


def degree_skew_report(n_segments: int = 2000, e: int = 200_000, d: int = 64,
                       repeats: int = 5, seed: int = 0) -> dict:
    """Aggregation timing on fixed-E uniform vs power-law degree layouts.

    Reports the relative variation of segment-reduce (asserted elsewhere)
    and of the scatter-add baseline (reported only, platform dependent).
    """
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((e, d)).astype(np.float32)
    out = {}
    for kind in ("uniform", "powerlaw"):
        ptr, dst = skewed_segments(n_segments, e, kind)
        seg_times, scat_times = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            segment_reduce(values, ptr)
            seg_times.append(time.perf_counter() - t0)
            acc = np.zeros((n_segments, d), dtype=np.float32)
            t0 = time.perf_counter()
            np.add.at(acc, dst, values)
            scat_times.append(time.perf_counter() - t0)
        out[kind] = {"segment_reduce": float(np.median(seg_times)),
                     "scatter_add": float(np.median(scat_times))}
    segs = [out[k]["segment_reduce"] for k in ("uniform", "powerlaw")]
    scats = [out[k]["scatter_add"] for k in ("uniform", "powerlaw")]
    out["segment_reduce_variation"] = abs(segs[0] - segs[1]) / min(segs)
    out["scatter_add_variation"] = abs(scats[0] - scats[1]) / min(scats)
    return out


def run_bench(params, system, rc_sim: dict, replica_counts, combos,
              steps: int = 5, seed: int = 0) -> list[dict]:
    """Sweep replica counts and backend flag combinations.

    Each cell runs a short simulation and reports measured throughput next
    to the modeled IO of both pipelines at the observed edge count; the
    speedup column is relative to the all-off reference cell at the same
    replica count.
    """
    rows = []
    reference_rate = {}
    for replicas in replica_counts:
        for fused, segred, quant in combos:
            sim = SimConfig(
                dt_fs=rc_sim.get("dt_fs", 4.0),
                temperature=rc_sim.get("temperature", 300.0),
                friction=rc_sim.get("friction", 1.0),
                n_steps=steps, n_replicas=replicas, seed=seed,
                neighbor_stride=rc_sim.get("neighbor_stride", 1),
                output_stride=max(steps, 1),
                mode="32bit",
                backend=PipelineMode(fused=fused, segred=segred, quant=quant),
                workers=rc_sim.get("workers", 1),
            )
            result = run_simulation(params, system, sim, rc_sim["out"])
            rate = throughput_report(result)
            n = system.n_beads
            e_mean = int(round(result.mean_edges))
            cfg = params.config
            io_b = io_model_base(n, e_mean, cfg.hidden_dim, cfg.rbf_dim,
                                 cfg.num_blocks, 4)
            io_f = io_model_flash(n, e_mean, cfg.hidden_dim, cfg.rbf_dim,
                                  cfg.num_blocks, 4)
            alloc = measure_peak_alloc(n, max(e_mean, 1), cfg.hidden_dim,
                                       cfg.num_blocks, seed)
            key = (replicas,)
            if not fused and not segred and not quant:
                reference_rate[key] = rate["timestep_mol_per_s"]
            speedup = rate["timestep_mol_per_s"] / reference_rate.get(
                key, rate["timestep_mol_per_s"])
            rows.append({
                "system": rc_sim.get("name", "system"),
                "N": n, "E": e_mean, "replicas": replicas,
                "fused": "on" if fused else "off",
                "segred": "on" if segred else "off",
                "quant": "on" if quant else "off",
                "steps": steps,
                "ms_per_step": 1e3 * result.wall_seconds / max(steps, 1),
                "timestep_mol_per_s": rate["timestep_mol_per_s"],
                "ns_per_day": rate["ns_per_day"],
                "io_base_bytes": io_b,
                "io_flash_bytes": io_f,
                "io_ratio": io_b / io_f,
                "peak_edge_alloc_bytes": alloc["flash_peak" if fused else "reference_peak"],
                "speedup_vs_reference": speedup,
            })
    return rows


def write_bench_csv(rows: list[dict], path) -> None:
    cols = BENCH_SCHEMA.split(",")
    with open(path, "w") as f:
        f.write("# flashcg-bench v1\n")
        f.write(BENCH_SCHEMA + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
