"""Fused backend: streamed edge pipeline and contention-free aggregation.

The fused forward walks destination-grouped edge tiles, computing distance,
enveloped basis, filter and message per edge in tile-local buffers and
storing each destination row exactly once; no stacked edge tensor ever
exists. Backward recomputes basis and filter values from cached distances
(recompute over store) and accumulates source-feature and position
gradients through source-grouped segments, again without atomics.

Ablation flags allow running the fused edge pipeline with plain scatter
aggregation, or materialized edge tensors with segmented reduction; with
everything off, evaluation routes to the reference backend unchanged.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    linear_apply as _linear_apply,
    linear_input_matrix as _linear_matrix,
    net_backward_input as _net_backward,
    net_forward as _net_forward,
    rbf_expand,
    rbf_expand_and_grad,
    rbf_grad,
)
from .neighbors import (
    CsrLayout,
    NeighborList,
    build_neighbors_cells,
    group_by_destination,
    group_by_source,
)
from .reference import (
    TINY_DISTANCE,
    EnergyForces,
    compute_edge_geometry,
    reference_energy_forces,
)
from .traffic import (
    AllocTracker,
    TrafficReport,
    apply_block_schedule,
    base_block_backward_schedule,
    base_block_forward_schedule,
    base_block_schedule,
    flash_block_backward_schedule,
    flash_block_forward_schedule,
    flash_block_schedule,
    schedule_total_elements,
)

DEFAULT_TILE_EDGES = 1024
DEFAULT_SEGMENT_SPLIT = 8192

# Test hook: when enabled, the fused forward flips the sign of one filter
# channel so that verification provably catches a broken pipeline.
_FAULT_INJECTION = False


@contextmanager
def inject_fault():
    global _FAULT_INJECTION
    _FAULT_INJECTION = True
    try:
        yield
    finally:
        _FAULT_INJECTION = False


@dataclass(frozen=True)
class PipelineMode:
    """Backend ablation switches surfaced through the CLI."""

    fused: bool = True
    segred: bool = True
    quant: bool = False
    tile_edges: int = DEFAULT_TILE_EDGES
    segment_split: int = DEFAULT_SEGMENT_SPLIT

    def with_flags(self, **kw) -> "PipelineMode":
        return replace(self, **kw)


def io_model_base(N: int, E: int, D: int, D_r: int, T: int, width: int) -> int:
    """Closed-form modeled bytes of the materializing backend, one step.

    Literal sum over the per-block kernel schedule, times T blocks and the
    scalar width; see traffic.base_block_schedule for the term-by-term
    policy. Leading terms are Theta(T*E*(D_r+D)) + Theta(T*E*D), plus node
    terms shared with the fused model.
    """
    return T * width * schedule_total_elements(base_block_schedule(N, E, D, D_r))


def io_model_flash(N: int, E: int, D: int, D_r: int, T: int, width: int) -> int:
    """Closed-form modeled bytes of the fused backend, one step.

    Theta(T*(E*D + N*D)): per-edge source and gradient row traffic plus
    one segment store per output row; basis and filter tensors never move.
    """
    return T * width * schedule_total_elements(flash_block_schedule(N, E, D, D_r))


def segment_reduce(values: np.ndarray, ptr: np.ndarray,
                   split: int = DEFAULT_SEGMENT_SPLIT) -> np.ndarray:
    """Sum contiguous segments of ``values`` (already in perm order).

    Each output row is owned exclusively and written once; empty segments
    yield zero rows. Segments longer than ``split`` are reduced through
    per-chunk partial accumulators combined in fixed order, so the result
    is bit-deterministic regardless of how chunks would be scheduled.
    """
    values = np.asarray(values)
    nseg = ptr.size - 1
    out = np.zeros((nseg,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0] == 0 or nseg == 0:
        return out
    sizes = ptr[1:] - ptr[:-1]
    nonempty = sizes > 0
    if np.any(nonempty):
        # Consecutive nonempty starts delimit exactly their own rows because
        # empty segments occupy no rows.
        starts = ptr[:-1][nonempty]
        out[nonempty] = np.add.reduceat(values, starts, axis=0)
    for i in np.nonzero(sizes > split)[0]:
        lo, hi = int(ptr[i]), int(ptr[i + 1])
        partials = [values[s:min(s + split, hi)].sum(axis=0)
                    for s in range(lo, hi, split)]
        out[i] = np.add.reduce(np.stack(partials), axis=0)
    return out


def pack_tiles(ptr: np.ndarray, tile_edges: int, split: int):
    """Partition a CSR layout into edge tiles of whole segments.

    Returns (p0, p1, seg_lo, seg_hi, partial_of) tuples: a perm range
    covering whole segments seg_lo..seg_hi-1, or, for a segment longer than
    ``split``, one chunk of segment ``partial_of`` to be combined into a
    private partial accumulator.
    """
    tiles = []
    nseg = ptr.size - 1
    i = 0
    while i < nseg:
        lo, hi = int(ptr[i]), int(ptr[i + 1])
        if hi - lo > split:
            for s in range(lo, hi, split):
                tiles.append((s, min(s + split, hi), i, i + 1, i))
            i += 1
            continue
        i_lo, p0 = i, lo
        while i < nseg and int(ptr[i + 1]) - int(ptr[i]) <= split \
                and int(ptr[i + 1]) - p0 <= tile_edges:
            i += 1
        if i == i_lo:
            i += 1  # single segment wider than the tile but within split
        tiles.append((p0, int(ptr[i]), i_lo, i, None))
    return tiles


def _tile_segment_sums(values: np.ndarray, local_ptr: np.ndarray) -> np.ndarray:
    nseg = local_ptr.size - 1
    out = np.zeros((nseg,) + values.shape[1:], dtype=values.dtype)
    sizes = local_ptr[1:] - local_ptr[:-1]
    nonempty = sizes > 0
    if np.any(nonempty):
        out[nonempty] = np.add.reduceat(values, local_ptr[:-1][nonempty], axis=0)
    return out


def _safe_inv(d, dtype):
    safe = d > TINY_DISTANCE
    return np.where(safe, 1.0 / np.where(safe, d, 1.0), 0.0).astype(dtype, copy=False)


@dataclass
class FlashBlockCache:
    """Backward state of one fused block: Theta(E + N*D), never Theta(E*D)."""

    X_in: np.ndarray
    P: np.ndarray
    d: np.ndarray          # per-edge distances, edge-id indexed
    post_cache: tuple
    held_bytes: int = 0


def flash_block_forward(X, positions, nl, dst_csr, block_params, rbf_spec,
                        report: TrafficReport, tracker: AllocTracker | None = None,
                        tiles=None, tile_edges: int = DEFAULT_TILE_EDGES,
                        split: int = DEFAULT_SEGMENT_SPLIT):
    """One fused interaction block; numerically matches the reference block.

    Streams destination-grouped tiles, accumulating each segment into a
    tile-local buffer and writing every destination row once. Only the
    per-edge distances are cached for backward.
    """
    if dst_csr.key != "dst":
        raise ValueError("flash forward requires a destination-grouped layout")
    if dst_csr.perm.size != nl.num_edges or dst_csr.ptr.size != nl.n + 1:
        raise ValueError("CSR layout does not match the neighbor list")
    n, d_feat = X.shape
    P = _linear_apply(block_params.pre_linear, X)
    H = np.zeros((n, d_feat), dtype=X.dtype)
    d_cache = np.zeros(nl.num_edges, dtype=X.dtype)
    held = tracker.grab_array(d_cache) if tracker is not None else 0
    if tiles is None:
        tiles = pack_tiles(dst_csr.ptr, tile_edges, split)

    ptr, perm = dst_csr.ptr, dst_csr.perm
    for p0, p1, i_lo, i_hi, partial_of in tiles:
        edges = perm[p0:p1]
        if edges.size == 0:
            continue
        src = nl.src[edges]
        dst = nl.dst[edges]
        u = positions[dst] - positions[src]
        d = np.sqrt(np.einsum("ij,ij->i", u, u))
        d_cache[edges] = d
        b = rbf_expand(d, rbf_spec)
        w, _ = _net_forward(block_params.filter_mlp, b)
        if _FAULT_INJECTION:
            w = w.copy()
            w[:, 0] = -w[:, 0]
        m = P[src] * w
        tile_bytes = tracker.grab(u.nbytes + b.nbytes + w.nbytes + m.nbytes) \
            if tracker is not None else 0
        if partial_of is None:
            local = ptr[i_lo:i_hi + 1] - p0
            H[i_lo:i_hi] = _tile_segment_sums(m, local)
        else:
            H[partial_of] += m.sum(axis=0)  # deterministic chunk-order combine
        if tracker is not None:
            tracker.drop(tile_bytes)

    U, post_cache = _net_forward(block_params.post_mlp, H)
    X_out = X + U
    apply_block_schedule(report, flash_block_forward_schedule(
        n, nl.num_edges, d_feat, rbf_spec.dim), X.dtype.itemsize)
    return X_out, FlashBlockCache(X_in=X, P=P, d=d_cache,
                                  post_cache=post_cache, held_bytes=held)


def flash_block_backward(grad_X_out, cache: FlashBlockCache, positions, nl,
                         src_csr, dst_csr, block_params, rbf_spec,
                         report: TrafficReport, tracker: AllocTracker | None = None,
                         tiles=None, tile_edges: int = DEFAULT_TILE_EDGES,
                         split: int = DEFAULT_SEGMENT_SPLIT):
    """Backward of one fused block from cached distances.

    Recomputes basis and filters per tile, accumulates source-feature
    gradients over source-grouped segments, and reduces per-edge position
    gradients through one destination and one source segmented pass.
    Returns (grad wrt the block input, position gradient of this block).
    """
    if src_csr.key != "src":
        raise ValueError("flash backward requires a source-grouped layout")
    n, d_feat = cache.X_in.shape
    dtype = cache.X_in.dtype
    grad_H = _net_backward(block_params.post_mlp, cache.post_cache, grad_X_out)
    grad_P = np.zeros((n, d_feat), dtype=dtype)
    g = np.zeros((nl.num_edges, 3), dtype=dtype)
    held = tracker.grab_array(g) if tracker is not None else 0
    if tiles is None:
        tiles = pack_tiles(src_csr.ptr, tile_edges, split)

    ptr, perm = src_csr.ptr, src_csr.perm
    for p0, p1, j_lo, j_hi, partial_of in tiles:
        edges = perm[p0:p1]
        if edges.size == 0:
            continue
        src = nl.src[edges]
        dst = nl.dst[edges]
        d = cache.d[edges]
        u = positions[dst] - positions[src]
        b, db = rbf_expand_and_grad(d, rbf_spec)
        w, fcache = _net_forward(block_params.filter_mlp, b)
        gH = grad_H[dst]
        contrib = gH * w
        tile_bytes = tracker.grab(u.nbytes + b.nbytes + w.nbytes + gH.nbytes + contrib.nbytes) \
            if tracker is not None else 0
        if partial_of is None:
            local = ptr[j_lo:j_hi + 1] - p0
            grad_P[j_lo:j_hi] = _tile_segment_sums(contrib, local)
        else:
            grad_P[partial_of] += contrib.sum(axis=0)
        grad_w = gH * cache.P[src]
        grad_b = _net_backward(block_params.filter_mlp, fcache, grad_w)
        grad_d = np.einsum("ek,ek->e", grad_b, db)
        g[edges] = (grad_d * _safe_inv(d, dtype))[:, None] * u
        if tracker is not None:
            tracker.drop(tile_bytes)

    grad_r = segment_reduce(g[dst_csr.perm], dst_csr.ptr, split) \
        - segment_reduce(g[src_csr.perm], src_csr.ptr, split)
    grad_X = grad_X_out + grad_P @ _linear_matrix(block_params.pre_linear)

    apply_block_schedule(report, flash_block_backward_schedule(
        n, nl.num_edges, d_feat, rbf_spec.dim), dtype.itemsize)
    if tracker is not None:
        tracker.drop(held)
        tracker.drop(cache.held_bytes)
    return grad_X, grad_r


def _materialized_segred_energy_forces(positions, types, params, mode, nl,
                                       dst_csr, src_csr, tracker):
    """Ablation: stacked edge tensors, but segmented-reduction aggregation."""
    report = TrafficReport()
    geom = compute_edge_geometry(positions, nl)
    n = nl.n
    dtype = positions.dtype
    width = dtype.itemsize
    E, D, Dr = nl.num_edges, params.config.hidden_dim, params.rbf.dim

    X = params.embedding[types]
    blocks = []
    for bp in params.blocks:
        P = _linear_apply(bp.pre_linear, X)
        B = rbf_expand(geom.d, params.rbf)
        W, fcache = _net_forward(bp.filter_mlp, B)
        X_src = P[nl.src]
        M = X_src * W
        H = segment_reduce(M[dst_csr.perm], dst_csr.ptr, mode.segment_split)
        U, post_cache = _net_forward(bp.post_mlp, H)
        blocks.append((X, P, B, fcache, W, X_src, post_cache))
        X = X + U
        # materializing traffic, minus the atomic scatter, plus a permuted
        # read feeding the segmented reduce
        for line in base_block_forward_schedule(n, E, D, Dr):
            stage, r, w, _ = line
            if stage == "aggregation":
                continue
            report.record(stage, r * width, w * width, 0)
        report.record("aggregation", 2 * E * D * width, n * D * width, 0)

    eps_col, readout_cache = _net_forward(params.readout, X)
    per_atom = eps_col[:, 0]
    energy = float(per_atom.sum())

    ones = np.ones((n, 1), dtype=dtype)
    grad_X = _net_backward(params.readout, readout_cache, ones)
    grad_r = np.zeros((n, 3), dtype=dtype)
    inv_d = _safe_inv(geom.d, dtype)
    for (X_in, P, B, fcache, W, X_src, post_cache), bp in zip(
            reversed(blocks), reversed(params.blocks)):
        grad_H = _net_backward(bp.post_mlp, post_cache, grad_X)
        grad_M = grad_H[nl.dst]
        grad_W = grad_M * X_src
        grad_Xsrc = grad_M * W
        grad_P = segment_reduce(grad_Xsrc[src_csr.perm], src_csr.ptr, mode.segment_split)
        grad_B = _net_backward(bp.filter_mlp, fcache, grad_W)
        grad_d = np.einsum("ek,ek->e", grad_B, rbf_grad(geom.d, params.rbf))
        grad_u = (grad_d * inv_d)[:, None] * geom.u
        grad_r += segment_reduce(grad_u[dst_csr.perm], dst_csr.ptr, mode.segment_split)
        grad_r -= segment_reduce(grad_u[src_csr.perm], src_csr.ptr, mode.segment_split)
        grad_X = grad_X + grad_P @ _linear_matrix(bp.pre_linear)
        for line in base_block_backward_schedule(n, E, D, Dr):
            stage, r, w, _ = line
            if stage in ("aggregation", "gather"):
                continue
            report.record(stage, r * width, w * width, 0)
        report.record("gather", 2 * E * D * width, n * D * width, 0)
        report.record("aggregation", 2 * E * D * width, n * D * width, 0)

    return EnergyForces(energy=energy, per_atom=per_atom, forces=-grad_r, traffic=report)


def _fused_scatter_energy_forces(positions, types, params, mode, nl, dst_csr,
                                 src_csr, tracker):
    """Ablation: fused tile streaming, but atomic scatter aggregation."""
    report = TrafficReport()
    n = nl.n
    dtype = positions.dtype
    width = dtype.itemsize
    E, D, Dr = nl.num_edges, params.config.hidden_dim, params.rbf.dim
    tiles = pack_tiles(dst_csr.ptr, mode.tile_edges, mode.segment_split)

    X = params.embedding[types]
    blocks = []
    for bp in params.blocks:
        P = _linear_apply(bp.pre_linear, X)
        H = np.zeros((n, D), dtype=dtype)
        d_cache = np.zeros(E, dtype=dtype)
        for p0, p1, _, _, _ in tiles:
            edges = dst_csr.perm[p0:p1]
            if edges.size == 0:
                continue
            src, dst = nl.src[edges], nl.dst[edges]
            u = positions[dst] - positions[src]
            d = np.sqrt(np.einsum("ij,ij->i", u, u))
            d_cache[edges] = d
            b = rbf_expand(d, params.rbf)
            w, _ = _net_forward(bp.filter_mlp, b)
            m = P[src] * w
            np.add.at(H, dst, m)
        report.record("aggregation", 0, 0, E * D)
        U, post_cache = _net_forward(bp.post_mlp, H)
        blocks.append((X, P, d_cache, post_cache))
        X = X + U
        for line in flash_block_forward_schedule(n, E, D, Dr):
            stage, r, w_, _ = line
            report.record(stage, r * width, w_ * width, 0)
        report.record("aggregation", 0, 2 * E * D * width, 0)

    eps_col, readout_cache = _net_forward(params.readout, X)
    per_atom = eps_col[:, 0]
    energy = float(per_atom.sum())

    ones = np.ones((n, 1), dtype=dtype)
    grad_X = _net_backward(params.readout, readout_cache, ones)
    grad_r = np.zeros((n, 3), dtype=dtype)
    for (X_in, P, d_cache, post_cache), bp in zip(reversed(blocks), reversed(params.blocks)):
        grad_H = _net_backward(bp.post_mlp, post_cache, grad_X)
        grad_P = np.zeros((n, D), dtype=dtype)
        for p0, p1, _, _, _ in tiles:
            edges = dst_csr.perm[p0:p1]
            if edges.size == 0:
                continue
            src, dst = nl.src[edges], nl.dst[edges]
            d = d_cache[edges]
            u = positions[dst] - positions[src]
            b = rbf_expand(d, params.rbf)
            w, fcache = _net_forward(bp.filter_mlp, b)
            gH = grad_H[dst]
            np.add.at(grad_P, src, gH * w)
            grad_w = gH * P[src]
            grad_b = _net_backward(bp.filter_mlp, fcache, grad_w)
            grad_d = np.einsum("ek,ek->e", grad_b, rbf_grad(d, params.rbf))
            gu = (grad_d * _safe_inv(d, dtype))[:, None] * u
            np.add.at(grad_r, dst, gu)
            np.add.at(grad_r, src, -gu)
        report.record("aggregation", 0, 0, E * D + 6 * E)
        grad_X = grad_X + grad_P @ _linear_matrix(bp.pre_linear)
        for line in flash_block_backward_schedule(n, E, D, Dr):
            stage, r, w_, _ = line
            report.record(stage, r * width, w_ * width, 0)

    return EnergyForces(energy=energy, per_atom=per_atom, forces=-grad_r, traffic=report)


def flash_energy_forces(positions, types, params, mode: PipelineMode,
                        nl: NeighborList | None = None,
                        layouts: tuple[CsrLayout, CsrLayout] | None = None,
                        tracker: AllocTracker | None = None) -> EnergyForces:
    """End-to-end energy and forces under the selected ablation flags.

    With all flags off this routes to the reference backend unchanged. The
    canonical fused+segmented path records zero atomic updates and its
    traffic total equals io_model_flash exactly.
    """
    positions = np.asarray(positions)
    if not mode.fused and not mode.segred:
        return reference_energy_forces(positions, types, params, nl=nl, tracker=tracker)

    cfg = params.config
    if nl is None:
        nl = build_neighbors_cells(positions, cfg.cutoff)
    if layouts is None:
        layouts = (group_by_destination(nl), group_by_source(nl))
    dst_csr, src_csr = layouts

    if mode.fused and not mode.segred:
        return _fused_scatter_energy_forces(positions, types, params, mode,
                                            nl, dst_csr, src_csr, tracker)
    if not mode.fused and mode.segred:
        return _materialized_segred_energy_forces(positions, types, params, mode,
                                                  nl, dst_csr, src_csr, tracker)

    report = TrafficReport()
    dst_tiles = pack_tiles(dst_csr.ptr, mode.tile_edges, mode.segment_split)
    src_tiles = pack_tiles(src_csr.ptr, mode.tile_edges, mode.segment_split)

    X = params.embedding[types]
    caches = []
    for bp in params.blocks:
        X, bc = flash_block_forward(X, positions, nl, dst_csr, bp, params.rbf,
                                    report, tracker, tiles=dst_tiles,
                                    tile_edges=mode.tile_edges,
                                    split=mode.segment_split)
        caches.append(bc)

    eps_col, readout_cache = _net_forward(params.readout, X)
    per_atom = eps_col[:, 0]
    energy = float(per_atom.sum())

    ones = np.ones((nl.n, 1), dtype=positions.dtype)
    grad_X = _net_backward(params.readout, readout_cache, ones)
    grad_r = np.zeros((nl.n, 3), dtype=positions.dtype)
    for bc, bp in zip(reversed(caches), reversed(params.blocks)):
        grad_X, grad_r_block = flash_block_backward(
            grad_X, bc, positions, nl, src_csr, dst_csr, bp, params.rbf,
            report, tracker, tiles=src_tiles, tile_edges=mode.tile_edges,
            split=mode.segment_split)
        grad_r += grad_r_block

    return EnergyForces(energy=energy, per_atom=per_atom, forces=-grad_r, traffic=report)
