"""Materializing baseline backend: the correctness oracle and speed baseline.

Every intermediate edge tensor (stacked basis, filters, gathered sources,
messages) is written out and cached for backward; aggregation is a plain
scatter-add whose atomic-update count is recorded even though the host
executes it serially. Reduction order follows the canonical edge order, so
results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ModelParams,
    linear_apply,
    linear_input_matrix,
    net_backward_input,
    net_forward,
    rbf_expand,
    rbf_grad,
)
from .neighbors import NeighborList, build_neighbors_bruteforce
from .traffic import (
    AllocTracker,
    TrafficReport,
    apply_block_schedule,
    base_block_backward_schedule,
    base_block_forward_schedule,
)

# Below this separation the unit vector along an edge is taken as zero to
# avoid division blowup on pathological coincident-bead inputs.
TINY_DISTANCE = 1e-12


@dataclass(frozen=True)
class EdgeGeometry:
    u: np.ndarray  # E x 3 displacements, r[dst] - r[src]
    d: np.ndarray  # E distances


@dataclass
class EnergyForces:
    energy: float
    per_atom: np.ndarray
    forces: np.ndarray
    traffic: TrafficReport


def compute_edge_geometry(positions: np.ndarray, nl: NeighborList) -> EdgeGeometry:
    u = positions[nl.dst] - positions[nl.src]
    d = np.sqrt(np.einsum("ij,ij->i", u, u))
    return EdgeGeometry(u=u, d=d)


def cfconv_forward(X: np.ndarray, W: np.ndarray, nl: NeighborList,
                   report: TrafficReport | None = None) -> np.ndarray:
    """h_i = sum over incoming edges of x_src * w_e, via gather + scatter-add.

    Records E*D atomic updates when given a report; the accumulation itself
    runs serially in canonical edge order.
    """
    n, d = nl.n, X.shape[1]
    M = X[nl.src] * W
    H = np.zeros((n, d), dtype=X.dtype)
    np.add.at(H, nl.dst, M)
    if report is not None:
        report.record("aggregation", atomics=nl.num_edges * d)
    return H


@dataclass
class _BlockCache:
    X_in: np.ndarray
    P: np.ndarray          # pre-linear output
    B: np.ndarray          # E x Dr enveloped basis
    filter_cache: tuple
    W: np.ndarray          # E x D filters
    X_src: np.ndarray      # E x D gathered sources
    M: np.ndarray          # E x D messages
    post_cache: tuple
    held_bytes: int = 0


@dataclass
class ReferenceCaches:
    params: ModelParams
    nl: NeighborList
    geometry: EdgeGeometry
    blocks: list = field(default_factory=list)
    readout_cache: tuple = None
    report: TrafficReport = None
    tracker: AllocTracker = None
    consumed: bool = False


def interaction_block(X: np.ndarray, geometry: EdgeGeometry, nl: NeighborList,
                      block_params, rbf_spec, report: TrafficReport,
                      tracker: AllocTracker | None = None):
    """One materializing interaction block: X' = X + post(cfconv(pre(X)))."""
    n = nl.n
    P = linear_apply(block_params.pre_linear, X)

    B = rbf_expand(geometry.d, rbf_spec)
    W, filter_cache = net_forward(block_params.filter_mlp, B)
    X_src = P[nl.src]
    M = X_src * W
    H = np.zeros((n, X.shape[1]), dtype=X.dtype)
    np.add.at(H, nl.dst, M)

    U, post_cache = net_forward(block_params.post_mlp, H)
    X_out = X + U

    width = X.dtype.itemsize
    apply_block_schedule(report, base_block_forward_schedule(
        n, nl.num_edges, X.shape[1], rbf_spec.dim), width)

    cache = _BlockCache(X_in=X, P=P, B=B, filter_cache=filter_cache,
                        W=W, X_src=X_src, M=M, post_cache=post_cache)
    if tracker is not None:
        cache.held_bytes = sum(tracker.grab_array(a) for a in (B, W, X_src, M))
    return X_out, cache


def reference_energy(positions: np.ndarray, types: np.ndarray, params: ModelParams,
                     nl: NeighborList | None = None,
                     tracker: AllocTracker | None = None):
    """Embedding lookup, T materializing blocks, per-atom readout.

    Returns (total energy, per-atom energies, caches for backward, traffic
    report). The caches retain every edge tensor, the baseline policy.
    """
    cfg = params.config
    if np.any(types < 0) or np.any(types >= cfg.num_atom_types):
        raise ValueError("atom type out of range for the embedding table")
    if nl is None:
        nl = build_neighbors_bruteforce(positions, cfg.cutoff)

    report = TrafficReport()
    geometry = compute_edge_geometry(positions, nl)
    caches = ReferenceCaches(params=params, nl=nl, geometry=geometry,
                             report=report, tracker=tracker)

    X = params.embedding[types]
    for bp in params.blocks:
        X, bc = interaction_block(X, geometry, nl, bp, params.rbf, report, tracker)
        caches.blocks.append(bc)

    eps_col, readout_cache = net_forward(params.readout, X)
    caches.readout_cache = readout_cache
    per_atom = eps_col[:, 0]
    energy = float(per_atom.sum())
    return energy, per_atom, caches, report


def reference_forces(caches: ReferenceCaches) -> np.ndarray:
    """Full analytic backward through readout, blocks and geometry.

    Produces position gradients only; weight gradients are never formed.
    The caches are single-use.
    """
    if caches.consumed:
        raise RuntimeError("reference caches already consumed by a backward pass")
    caches.consumed = True

    nl, geom, params = caches.nl, caches.geometry, caches.params
    n = nl.n
    dtype = caches.blocks[0].X_in.dtype if caches.blocks else geom.d.dtype
    report, tracker = caches.report, caches.tracker
    width = np.dtype(dtype).itemsize

    ones = np.ones((n, 1), dtype=dtype)
    grad_X = net_backward_input(caches.params.readout, caches.readout_cache, ones)
    grad_r = np.zeros((n, 3), dtype=dtype)

    d = geom.d
    safe = d > TINY_DISTANCE
    inv_d = np.where(safe, 1.0 / np.where(safe, d, 1.0), 0.0).astype(dtype, copy=False)

    for bc, bp in zip(reversed(caches.blocks), reversed(params.blocks)):
        grad_H = net_backward_input(bp.post_mlp, bc.post_cache, grad_X)
        grad_M = grad_H[nl.dst]
        grad_W = grad_M * bc.X_src
        grad_Xsrc = grad_M * bc.W
        if tracker is not None:
            transient = sum(tracker.grab_array(a) for a in (grad_M, grad_W, grad_Xsrc))

        grad_P = np.zeros_like(bc.P)
        np.add.at(grad_P, nl.src, grad_Xsrc)

        grad_B = net_backward_input(bp.filter_mlp, bc.filter_cache, grad_W)
        der = rbf_grad(d, params.rbf)
        grad_d = np.einsum("ek,ek->e", grad_B, der)
        grad_u = (grad_d * inv_d)[:, None] * geom.u
        np.add.at(grad_r, nl.dst, grad_u)
        np.add.at(grad_r, nl.src, -grad_u)

        grad_X = grad_X + grad_P @ linear_input_matrix(bp.pre_linear)

        apply_block_schedule(report, base_block_backward_schedule(
            n, nl.num_edges, bc.P.shape[1], params.rbf.dim), width)
        if tracker is not None:
            tracker.drop(transient)
            tracker.drop(bc.held_bytes)

    return -grad_r


def reference_energy_forces(positions, types, params, nl=None,
                            tracker: AllocTracker | None = None) -> EnergyForces:
    energy, per_atom, caches, report = reference_energy(
        positions, types, params, nl=nl, tracker=tracker)
    forces = reference_forces(caches)
    return EnergyForces(energy=energy, per_atom=per_atom, forces=forces, traffic=report)
