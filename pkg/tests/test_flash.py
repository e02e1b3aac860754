import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashcg.flash import (
    PipelineMode,
    flash_energy_forces,
    io_model_base,
    io_model_flash,
    pack_tiles,
    segment_reduce,
)
from flashcg.model import ModelConfig, init_params
from flashcg.neighbors import (
    build_neighbors_bruteforce,
    group_by_destination,
    group_by_source,
)
from flashcg.reference import reference_energy_forces
from flashcg.traffic import AllocTracker
from flashcg.verify import energy_rel_err, force_rel_err

CFG = ModelConfig(hidden_dim=16, rbf_dim=8, num_blocks=2, cutoff=1.0,
                  num_atom_types=6, filter_hidden_dim=16, readout_hidden_dim=8)


def _instance(seed, n=24, box=1.6, dtype=np.float32):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0, box, size=(n, 3)).astype(dtype)
    types = rng.integers(0, CFG.num_atom_types, size=n)
    params = init_params(CFG, seed)
    if dtype == np.float64:
        params = params.astype(np.float64)
    return positions, types, params


def test_segment_reduce_hand_example():
    values = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = segment_reduce(values, np.array([0, 2, 3]))
    np.testing.assert_array_equal(out, [[4.0, 6.0], [5.0, 6.0]])


def test_segment_reduce_empty_segments():
    values = np.array([[1.0], [2.0]])
    out = segment_reduce(values, np.array([0, 0, 2, 2]))
    np.testing.assert_array_equal(out, [[0.0], [3.0], [0.0]])


def test_segment_reduce_no_rows():
    out = segment_reduce(np.zeros((0, 3)), np.array([0, 0, 0]))
    assert out.shape == (2, 3)
    assert np.all(out == 0.0)


def test_segment_reduce_oversized_split_deterministic():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((20000, 4))
    ptr = np.array([0, 15000, 20000])
    a = segment_reduce(values, ptr, split=1024)
    b = segment_reduce(values, ptr, split=1024)
    np.testing.assert_array_equal(a, b)
    oracle = np.stack([values[:15000].sum(axis=0), values[15000:].sum(axis=0)])
    np.testing.assert_allclose(a, oracle, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 500), st.integers(1, 40), st.integers(1, 16),
       st.integers(0, 2 ** 31 - 1))
def test_segment_reduce_matches_scatter(e, n, d, seed):
    rng = np.random.default_rng(seed)
    dst = np.sort(rng.integers(0, n, size=e))
    values = rng.standard_normal((e, d))
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n), out=ptr[1:])
    oracle = np.zeros((n, d))
    np.add.at(oracle, dst, values)
    np.testing.assert_allclose(segment_reduce(values, ptr), oracle,
                               rtol=1e-10, atol=1e-12)


def test_pack_tiles_cover_all_segments():
    ptr = np.array([0, 5, 5, 40, 45, 10045, 10050], dtype=np.int64)
    tiles = pack_tiles(ptr, tile_edges=32, split=4096)
    covered = np.zeros(int(ptr[-1]), dtype=int)
    segs = set()
    for p0, p1, i_lo, i_hi, partial in tiles:
        covered[p0:p1] += 1
        if partial is None:
            segs.update(range(i_lo, i_hi))
        else:
            segs.add(partial)
    assert np.all(covered == 1)
    assert segs == set(range(ptr.size - 1))


def test_flash_matches_reference_32bit():
    worst_e = worst_f = 0.0
    for seed in range(12):
        positions, types, params = _instance(seed)
        ref = reference_energy_forces(positions, types, params)
        out = flash_energy_forces(positions, types, params, PipelineMode())
        worst_e = max(worst_e, energy_rel_err(out.energy, ref.energy, ref.per_atom))
        worst_f = max(worst_f, force_rel_err(out.forces, ref.forces))
    assert worst_e <= 1e-5
    assert worst_f <= 1e-4


def test_flash_matches_reference_64bit():
    for seed in range(6):
        positions, types, params = _instance(seed, dtype=np.float64)
        ref = reference_energy_forces(positions, types, params)
        out = flash_energy_forces(positions, types, params, PipelineMode())
        assert energy_rel_err(out.energy, ref.energy, ref.per_atom) <= 1e-10
        assert force_rel_err(out.forces, ref.forces) <= 1e-9


def test_flash_no_edges_matches_reference():
    positions, types, params = _instance(1, n=5)
    spread = positions + np.arange(5)[:, None] * 50.0
    ref = reference_energy_forces(spread, types, params)
    out = flash_energy_forces(spread, types, params, PipelineMode())
    assert out.energy == pytest.approx(ref.energy, rel=1e-6)
    np.testing.assert_allclose(out.forces, ref.forces, atol=1e-6)


def test_flash_star_graph_zero_atomics():
    # hub plus six satellites only in range of the hub: every message lands
    # on one destination, the worst case for scatter contention
    rng = np.random.default_rng(2)
    positions = np.zeros((7, 3), dtype=np.float32)
    positions[1:] = 0.95 * np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=np.float32)
    params = init_params(CFG, 2)
    types = rng.integers(0, CFG.num_atom_types, size=7)
    nl = build_neighbors_bruteforce(positions, CFG.cutoff)
    assert nl.num_edges == 12 and np.count_nonzero(nl.dst == 0) == 6
    ref = reference_energy_forces(positions, types, params, nl=nl)
    out = flash_energy_forces(positions, types, params, PipelineMode(), nl=nl)
    assert out.traffic.atomic_updates == 0
    assert energy_rel_err(out.energy, ref.energy, ref.per_atom) <= 1e-5
    assert force_rel_err(out.forces, ref.forces) <= 1e-4


def test_all_flags_off_routes_to_reference():
    positions, types, params = _instance(3)
    mode = PipelineMode(fused=False, segred=False)
    out = flash_energy_forces(positions, types, params, mode)
    ref = reference_energy_forces(positions, types, params)
    assert out.energy == ref.energy
    np.testing.assert_array_equal(out.forces, ref.forces)
    assert out.traffic.total_bytes == ref.traffic.total_bytes
    assert out.traffic.atomic_updates == ref.traffic.atomic_updates > 0


@pytest.mark.parametrize("fused,segred", [(True, False), (False, True)])
def test_ablation_combos_match_reference(fused, segred):
    positions, types, params = _instance(4, dtype=np.float64)
    ref = reference_energy_forces(positions, types, params)
    out = flash_energy_forces(positions, types, params,
                              PipelineMode(fused=fused, segred=segred))
    assert energy_rel_err(out.energy, ref.energy, ref.per_atom) <= 1e-10
    assert force_rel_err(out.forces, ref.forces) <= 1e-9
    if segred and not fused:
        assert out.traffic.atomic_updates == 0


def test_flash_forces_match_finite_differences_of_flash_energy():
    positions, types, params = _instance(5, n=10, dtype=np.float64)
    mode = PipelineMode()
    out = flash_energy_forces(positions, types, params, mode)
    h = 1e-5
    fd = np.zeros_like(positions)
    for i in range(positions.shape[0]):
        for k in range(3):
            for sgn in (1.0, -1.0):
                p = positions.copy()
                p[i, k] += sgn * h
                fd[i, k] += sgn * flash_energy_forces(p, types, params, mode).energy
    fd = -(fd / (2 * h))
    assert force_rel_err(out.forces, fd) <= 1e-5


def test_flash_zero_grad_output_gives_zero_grads():
    from flashcg.flash import flash_block_backward, flash_block_forward
    from flashcg.traffic import TrafficReport

    positions, types, params = _instance(6, dtype=np.float64)
    nl = build_neighbors_bruteforce(positions, CFG.cutoff)
    dst_csr, src_csr = group_by_destination(nl), group_by_source(nl)
    x = params.embedding[types]
    report = TrafficReport()
    _, cache = flash_block_forward(x, positions, nl, dst_csr, params.blocks[0],
                                   params.rbf, report)
    grad_x, grad_r = flash_block_backward(
        np.zeros_like(x), cache, positions, nl, src_csr, dst_csr,
        params.blocks[0], params.rbf, report)
    assert np.all(grad_x == 0.0) and np.all(grad_r == 0.0)


def test_flash_layout_mismatch_rejected():
    from flashcg.flash import flash_block_forward
    from flashcg.traffic import TrafficReport

    positions, types, params = _instance(7)
    nl = build_neighbors_bruteforce(positions, CFG.cutoff)
    src_csr = group_by_source(nl)
    with pytest.raises(ValueError):
        flash_block_forward(params.embedding[types], positions, nl, src_csr,
                            params.blocks[0], params.rbf, TrafficReport())


def test_flash_deterministic_across_runs():
    positions, types, params = _instance(8)
    a = flash_energy_forces(positions, types, params, PipelineMode())
    b = flash_energy_forces(positions, types, params, PipelineMode())
    assert a.energy == b.energy
    np.testing.assert_array_equal(a.forces, b.forces)


def test_flash_tile_size_does_not_change_results():
    positions, types, params = _instance(9, n=60, dtype=np.float64)
    outs = [flash_energy_forces(positions, types, params,
                                PipelineMode(tile_edges=t, segment_split=s))
            for t, s in ((16, 64), (128, 8192), (4096, 8192))]
    for other in outs[1:]:
        assert abs(other.energy - outs[0].energy) <= 1e-12 * max(abs(outs[0].energy), 1)
        np.testing.assert_allclose(other.forces, outs[0].forces, atol=1e-11)


def test_io_models_double_with_blocks():
    a = io_model_base(100, 4000, 64, 32, 2, 4)
    b = io_model_base(100, 4000, 64, 32, 4, 4)
    assert b == 2 * a
    a = io_model_flash(100, 4000, 64, 32, 2, 4)
    b = io_model_flash(100, 4000, 64, 32, 4, 4)
    assert b == 2 * a


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.integers(0, 200000), st.integers(1, 256),
       st.integers(1, 128), st.integers(1, 6))
def test_io_base_dominates_flash(n, e, d, dr, t):
    assert io_model_base(n, e, d, dr, t, 4) >= io_model_flash(n, e, d, dr, t, 4)


def test_io_ratio_at_benchmark_point():
    n = 1000
    ratio = io_model_base(n, 40 * n, 128, 64, 3, 4) / io_model_flash(n, 40 * n, 128, 64, 3, 4)
    assert ratio > 10.0


def test_io_models_limiting_structure():
    # minimal basis width and E = N: both models are a constant factor apart
    for n in (10, 100, 10_000):
        ratio = io_model_base(n, n, 128, 1, 3, 4) / io_model_flash(n, n, 128, 1, 3, 4)
        assert 1.0 <= ratio <= 8.0


def test_flash_traffic_structure():
    positions, types, params = _instance(10)
    nl = build_neighbors_bruteforce(positions, CFG.cutoff)
    out = flash_energy_forces(positions, types, params, PipelineMode(), nl=nl)
    # no stacked basis/filter/message bytes on the fused path
    assert out.traffic.stage_bytes("filters") == 0
    assert out.traffic.stage_bytes("gather") == 0
    assert out.traffic.atomic_updates == 0
    assert out.traffic.total_bytes == io_model_flash(
        nl.n, nl.num_edges, CFG.hidden_dim, CFG.rbf_dim, CFG.num_blocks, 4)


def test_flash_cache_footprint_vs_reference():
    rng = np.random.default_rng(11)
    n, e_target = 300, 6000
    positions = rng.uniform(0, 0.9 * n ** (1 / 3) * 0.45, size=(n, 3)).astype(np.float32)
    types = rng.integers(0, CFG.num_atom_types, size=n)
    params = init_params(CFG, 11)
    nl = build_neighbors_bruteforce(positions, CFG.cutoff)
    assert nl.num_edges > n  # dense enough to be meaningful
    ref_tracker, flash_tracker = AllocTracker(), AllocTracker()
    reference_energy_forces(positions, types, params, nl=nl, tracker=ref_tracker)
    flash_energy_forces(positions, types, params, PipelineMode(), nl=nl,
                        tracker=flash_tracker)
    assert flash_tracker.peak < ref_tracker.peak
