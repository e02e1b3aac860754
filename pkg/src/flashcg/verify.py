"""Randomized oracle suite shared by the verify command and the test suite.

Each check compares an optimized path against an independent oracle:
brute-force enumeration for the cell list, scatter-add for segmented
reduction, the materializing backend for the fused one, central finite
differences for analytic forces, closed forms for traffic counters, and
direct formula evaluation for the structural metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analysis
from .flash import (
    PipelineMode,
    flash_energy_forces,
    inject_fault,
    io_model_base,
    io_model_flash,
    segment_reduce,
)
from .model import ModelConfig, init_params, rbf_expand
from .neighbors import (
    build_neighbors_bruteforce,
    build_neighbors_cells,
    group_by_destination,
    group_by_source,
)
from .quantize import (
    CalibrationSet,
    calibration_error,
    quantize_layer,
    quantize_layer_per_tensor,
    quantize_model,
)
from .reference import reference_energy, reference_energy_forces, reference_forces

TOLERANCES = {
    "32bit": {"energy": 1e-5, "force": 1e-4},
    "64bit": {"energy": 1e-10, "force": 1e-9},
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return (f"[{mark}] {self.name}: max_err={self.max_err:.3e} "
                f"tol={self.tol:.1e}{(' ' + self.detail) if self.detail else ''}")


def energy_rel_err(e_test: float, e_ref: float, per_atom_ref: np.ndarray) -> float:
    """Relative energy error against a cancellation-safe scale.

    The denominator is max(|E|, ||per-atom energies||_2) so near-zero totals
    from sign cancellation do not inflate the metric.
    """
    scale = max(abs(e_ref), float(np.linalg.norm(per_atom_ref)), 1e-300)
    return abs(e_test - e_ref) / scale


def force_rel_err(f_test: np.ndarray, f_ref: np.ndarray) -> float:
    scale = float(np.max(np.linalg.norm(f_ref, axis=-1))) + 1e-300
    return float(np.max(np.linalg.norm(f_test - f_ref, axis=-1))) / scale


def random_instance(rng: np.random.Generator, n_min: int = 8, n_max: int = 256,
                    blocks=(1, 2, 3), hidden: int = 32, rbf_dim: int = 16,
                    dtype=np.float32):
    """Random system plus random small model, density varied per draw."""
    n = int(rng.integers(n_min, n_max + 1))
    cutoff = 1.0
    density_scale = float(rng.uniform(0.35, 1.1))
    box = density_scale * cutoff * max(1.0, n ** (1.0 / 3.0))
    positions = rng.uniform(0.0, box, size=(n, 3)).astype(dtype)
    config = ModelConfig(hidden_dim=hidden, rbf_dim=rbf_dim,
                         num_blocks=int(rng.choice(blocks)), cutoff=cutoff,
                         num_atom_types=8, filter_hidden_dim=hidden,
                         readout_hidden_dim=max(hidden // 2, 4))
    params = init_params(config, int(rng.integers(0, 2 ** 31)))
    if dtype == np.float64:
        params = params.astype(np.float64)
    types = rng.integers(0, config.num_atom_types, size=n)
    return positions, types, params


def check_neighbors(seed: int = 0, n_configs: int = 100, n_max: int = 512) -> CheckResult:
    """Cell list equals brute force as canonicalized arrays, set equality."""
    rng = np.random.default_rng(seed)
    for trial in range(n_configs):
        n = int(rng.integers(1, n_max + 1))
        if trial % 3 == 0:   # clustered geometry
            centers = rng.uniform(0, 4.0, size=(max(n // 32, 1), 3))
            pos = centers[rng.integers(0, centers.shape[0], n)] \
                + rng.normal(0, 0.3, size=(n, 3))
        else:
            box = float(rng.uniform(0.8, 3.0)) * max(1.0, n ** (1 / 3))
            pos = rng.uniform(0, box, size=(n, 3))
        r_cut = float(rng.uniform(0.5, 1.5))
        a = build_neighbors_bruteforce(pos, r_cut)
        b = build_neighbors_cells(pos, r_cut)
        if not (np.array_equal(a.src, b.src) and np.array_equal(a.dst, b.dst)):
            return CheckResult("neighbor-list", False, 1.0, 0.0,
                               f"mismatch at trial {trial} seed {seed}")
    return CheckResult("neighbor-list", True, 0.0, 0.0,
                       f"{n_configs} configurations")


def check_grouping(seed: int = 0, n_graphs: int = 50) -> CheckResult:
    """CSR layouts: valid permutation, exact segment membership, stability."""
    rng = np.random.default_rng(seed)
    for trial in range(n_graphs):
        n = int(rng.integers(1, 100))
        e = int(rng.integers(0, 400))
        src = rng.integers(0, n, size=e)
        dst = rng.integers(0, n, size=e)
        from .neighbors import NeighborList
        nl = NeighborList(src=src, dst=dst, n=n)
        for layout, key in ((group_by_destination(nl), dst), (group_by_source(nl), src)):
            if not np.array_equal(np.sort(layout.perm), np.arange(e)):
                return CheckResult("csr-grouping", False, 1.0, 0.0,
                                   f"not a permutation, trial {trial} seed {seed}")
            for i in range(n):
                seg = layout.perm[layout.ptr[i]:layout.ptr[i + 1]]
                if not np.all(key[seg] == i) or not np.all(np.diff(seg) > 0):
                    return CheckResult("csr-grouping", False, 1.0, 0.0,
                                       f"segment {i} wrong, trial {trial} seed {seed}")
    return CheckResult("csr-grouping", True, 0.0, 0.0, f"{n_graphs} graphs")


def check_segment_reduce(seed: int = 0, n_instances: int = 100,
                         e_max: int = 10_000, d_max: int = 128) -> CheckResult:
    """Segmented reduction equals scatter-add; flash path counts no atomics.

    Compared in 64-bit so the tolerance reflects algorithmic equality, not
    the in-segment summation-order noise of narrow floats.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_instances):
        e = int(rng.integers(0, e_max + 1))
        d = int(rng.integers(1, d_max + 1))
        n = int(rng.integers(1, 300))
        dst = np.sort(rng.integers(0, n, size=e))
        values = rng.standard_normal((e, d))
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=ptr[1:])
        got = segment_reduce(values, ptr)
        oracle = np.zeros((n, d))
        np.add.at(oracle, dst, values)
        denom = float(np.max(np.abs(oracle))) + 1e-30
        err = float(np.max(np.abs(got - oracle))) / denom
        worst = max(worst, err)
        if err > 1e-6:
            return CheckResult("segment-reduce", False, worst, 1e-6,
                               f"trial {trial} seed {seed}")
    return CheckResult("segment-reduce", True, worst, 1e-6,
                       f"{n_instances} instances")


def check_pipeline_equivalence(seed: int = 0, n_instances: int = 200,
                               mode: str = "32bit", fault: bool = False) -> CheckResult:
    """Fused backend against the materializing oracle, energies and forces.

    Also asserts the exact zero-atomics counter on every fused evaluation.
    """
    tol = TOLERANCES[mode]
    dtype = np.float64 if mode == "64bit" else np.float32
    rng = np.random.default_rng(seed)
    pm = PipelineMode()
    worst_e = worst_f = 0.0
    for trial in range(n_instances):
        positions, types, params = random_instance(rng, dtype=dtype)
        nl = build_neighbors_bruteforce(positions, params.config.cutoff)
        layouts = (group_by_destination(nl), group_by_source(nl))
        ref = reference_energy_forces(positions, types, params, nl=nl)
        if fault:
            with inject_fault():
                out = flash_energy_forces(positions, types, params, pm,
                                          nl=nl, layouts=layouts)
        else:
            out = flash_energy_forces(positions, types, params, pm,
                                      nl=nl, layouts=layouts)
        if out.traffic.atomic_updates != 0:
            return CheckResult("pipeline-equivalence", False, 1.0, 0.0,
                               f"fused path recorded atomics, trial {trial} seed {seed}")
        e_err = energy_rel_err(out.energy, ref.energy, ref.per_atom)
        f_err = force_rel_err(out.forces, ref.forces)
        worst_e, worst_f = max(worst_e, e_err), max(worst_f, f_err)
        if e_err > tol["energy"] or f_err > tol["force"]:
            return CheckResult(
                "pipeline-equivalence", False, max(e_err, f_err),
                min(tol["energy"], tol["force"]),
                f"energy/force mismatch at trial {trial} seed {seed}")
    return CheckResult("pipeline-equivalence", True, max(worst_e, worst_f),
                       tol["force"],
                       f"{n_instances} instances, worst energy {worst_e:.2e}")


def finite_difference_forces(positions, types, params, h: float = 1e-5) -> np.ndarray:
    """Central differences of the energy, graph rebuilt per evaluation."""
    grad = np.zeros_like(positions)
    for i in range(positions.shape[0]):
        for k in range(3):
            for sgn in (1.0, -1.0):
                p = positions.copy()
                p[i, k] += sgn * h
                e = reference_energy(p, types, params)[0]
                grad[i, k] += sgn * e
    return -(grad / (2 * h))


def check_finite_difference(seed: int = 0, n_systems: int = 20,
                            tol: float = 1e-5) -> CheckResult:
    """Analytic forces vs central differences, 64-bit, step 1e-5 nm."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_systems):
        positions, types, params = random_instance(
            rng, n_min=6, n_max=14, hidden=16, rbf_dim=8, dtype=np.float64)
        _, _, caches, _ = reference_energy(positions, types, params)
        analytic = reference_forces(caches)
        fd = finite_difference_forces(positions, types, params)
        err = force_rel_err(analytic, fd)
        worst = max(worst, err)
        if err > tol:
            return CheckResult("finite-difference-forces", False, worst, tol,
                               f"trial {trial} seed {seed}")
    return CheckResult("finite-difference-forces", True, worst, tol,
                       f"{n_systems} systems")


def check_io_model(seed: int = 0) -> CheckResult:
    """Traffic counters equal the closed forms exactly; model ratio > 10.

    The ratio is evaluated from the formulas at E/N = 40, D = 128,
    D_r = 64, the documented benchmark point.
    """
    rng = np.random.default_rng(seed)
    positions, types, params = random_instance(rng, n_min=24, n_max=64)
    nl = build_neighbors_bruteforce(positions, params.config.cutoff)
    cfg = params.config
    args = (nl.n, nl.num_edges, cfg.hidden_dim, cfg.rbf_dim, cfg.num_blocks, 4)

    ref = reference_energy_forces(positions, types, params, nl=nl)
    if ref.traffic.total_bytes != io_model_base(*args):
        return CheckResult("io-model", False, 1.0, 0.0,
                           f"base total diverges from closed form, seed {seed}")
    out = flash_energy_forces(positions, types, params, PipelineMode(), nl=nl)
    if out.traffic.total_bytes != io_model_flash(*args):
        return CheckResult("io-model", False, 1.0, 0.0,
                           f"flash total diverges from closed form, seed {seed}")

    n_ref = 1000
    ratio = io_model_base(n_ref, 40 * n_ref, 128, 64, 3, 4) \
        / io_model_flash(n_ref, 40 * n_ref, 128, 64, 3, 4)
    if not ratio > 10.0:
        return CheckResult("io-model", False, ratio, 10.0,
                           "model ratio at the benchmark point")
    return CheckResult("io-model", True, 0.0, 0.0,
                       f"exact totals; benchmark ratio {ratio:.2f}")


def check_quantization(seed: int = 0, n_states: int = 20) -> CheckResult:
    """Quantized vs full-precision energies plus the per-channel guarantee."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(hidden_dim=32, rbf_dim=16, num_blocks=2, cutoff=1.0,
                         num_atom_types=8, filter_hidden_dim=32, readout_hidden_dim=16)
    params = init_params(config, seed)
    qparams = quantize_model(params, seed=seed)

    calib = CalibrationSet(rbf_expand(
        rng.uniform(0, config.cutoff, 256).astype(np.float64), params.rbf))
    for t, bp in enumerate(params.blocks):
        w, b = bp.filter_mlp[0]
        pc = calibration_error(quantize_layer(w, b, calib), w, calib)
        pt = calibration_error(quantize_layer_per_tensor(w, b, calib), w, calib)
        if pc > pt * (1 + 1e-12):
            return CheckResult("quantization", False, pc / max(pt, 1e-300), 1.0,
                               f"per-channel worse than per-tensor on block {t}")

    worst = 0.0
    pm = PipelineMode()
    for trial in range(n_states):
        n = int(rng.integers(16, 64))
        box = 0.8 * max(1.0, n ** (1 / 3))
        positions = rng.uniform(0, box, size=(n, 3)).astype(np.float32)
        types = rng.integers(0, config.num_atom_types, size=n)
        nl = build_neighbors_bruteforce(positions, config.cutoff)
        full = reference_energy_forces(positions, types, params, nl=nl)
        quant = flash_energy_forces(positions, types, qparams, pm, nl=nl)
        err = energy_rel_err(quant.energy, full.energy, full.per_atom)
        worst = max(worst, err)
        if err > 1e-2:
            return CheckResult("quantization", False, worst, 1e-2,
                               f"energy error at trial {trial} seed {seed}")
    return CheckResult("quantization", True, worst, 1e-2, f"{n_states} states")


def check_metrics() -> CheckResult:
    """Direct formula evaluations of the structural metrics."""
    q1 = analysis.fraction_native_contacts(
        np.array([[0.0, 0, 0], [0.5, 0, 0]]),
        analysis.ContactSet(pairs=np.array([[0, 1]]), ref_dist=np.array([0.5])))
    expected = 1.0 / (1.0 + math.exp(10.0 * (0.5 - 1.5 * 0.5)))
    err = max(abs(q1 - expected), abs(q1 - 0.92414))
    if err > 1e-5:
        return CheckResult("metrics", False, err, 1e-5, "single-contact Q value")

    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 3))
    if analysis.gdt_ts(x, x) != 1.0:
        return CheckResult("metrics", False, 1.0, 0.0, "GDT-TS identity")

    theta = 0.9
    rot = np.array([[math.cos(theta), -math.sin(theta), 0],
                    [math.sin(theta), math.cos(theta), 0], [0, 0, 1.0]])
    moved = x @ rot.T + np.array([0.3, -0.2, 1.0])
    r = analysis.rmsd(moved, x)
    if r > 1e-10:
        return CheckResult("metrics", False, r, 1e-10, "rigid-copy rmsd")

    series = np.concatenate([rng.normal(0.3, 0.04, 4000),
                             rng.normal(0.85, 0.04, 2500)])
    peak = analysis.largest_metastable_q(np.clip(series, 0, 1))
    if abs(peak - 0.85) > 0.01:
        return CheckResult("metrics", False, abs(peak - 0.85), 0.01,
                           "bimodal rightmost mode")
    return CheckResult("metrics", True, float(err), 1e-5, "formula spot checks")


def run_verification(seed: int = 0, mode: str = "32bit", quick: bool = False,
                     fault: bool = False) -> list[CheckResult]:
    n_pipe = 40 if quick else 200
    n_nbr = 30 if quick else 100
    n_seg = 30 if quick else 100
    n_fd = 5 if quick else 20
    results = [
        check_neighbors(seed, n_configs=n_nbr),
        check_grouping(seed),
        check_segment_reduce(seed, n_instances=n_seg),
        check_pipeline_equivalence(seed, n_instances=n_pipe, mode=mode, fault=fault),
        check_finite_difference(seed, n_systems=n_fd),
        check_io_model(seed),
        check_quantization(seed, n_states=5 if quick else 20),
        check_metrics(),
    ]
    return results
