"""Directed cutoff graph construction and grouped CSR layouts.

Edges are directed with both orientations stored and are canonicalized to
lexicographic (dst, src) order, which makes oracle comparisons exact and
pins the floating-point reduction order. The cutoff comparison is strict,
so edges never sit exactly on the envelope zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NeighborList:
    src: np.ndarray  # int64[E]
    dst: np.ndarray  # int64[E]
    n: int           # node count

    @property
    def num_edges(self) -> int:
        return int(self.src.size)


@dataclass(frozen=True)
class CsrLayout:
    """Edges grouped contiguously by one endpoint.

    perm is a permutation of edge ids; edges keyed to node i occupy
    perm[ptr[i]:ptr[i+1]], preserving original edge order within each group.
    """

    ptr: np.ndarray   # int64[N+1], nondecreasing, ptr[0]=0, ptr[N]=E
    perm: np.ndarray  # int64[E]
    key: str          # "dst" or "src"

    @property
    def num_segments(self) -> int:
        return int(self.ptr.size - 1)

    def segment_sizes(self) -> np.ndarray:
        return self.ptr[1:] - self.ptr[:-1]


def _canonical(dst: np.ndarray, src: np.ndarray, n: int) -> NeighborList:
    order = np.lexsort((src, dst))
    return NeighborList(src=src[order].astype(np.int64),
                        dst=dst[order].astype(np.int64), n=n)


def build_neighbors_bruteforce(positions: np.ndarray, r_cut: float) -> NeighborList:
    """Exact O(N^2) enumeration; the oracle for the cell-list builder."""
    r = np.asarray(positions, dtype=np.float64)
    n = r.shape[0]
    if n == 0:
        raise ValueError("need at least one bead")
    diff = r[:, None, :] - r[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    mask = dist2 < r_cut * r_cut
    np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)  # row-major nonzero is already (dst, src) lex order
    return NeighborList(src=src.astype(np.int64), dst=dst.astype(np.int64), n=n)


def build_neighbors_cells(positions: np.ndarray, r_cut: float) -> NeighborList:
    """Cell-list construction; identical edge set to brute force.

    Beads are bucketed into a grid of cells no smaller than r_cut; each
    ordered pair is probed exactly once via the 27-cell stencil around the
    destination bead's cell. Coincident beads are fine, only self edges are
    excluded.
    """
    r = np.asarray(positions, dtype=np.float64)
    n = r.shape[0]
    if n == 0:
        raise ValueError("need at least one bead")
    lo = r.min(axis=0)
    cell = max(float(r_cut), 1e-9)
    coords = np.floor((r - lo) / cell).astype(np.int64)

    buckets: dict = {}
    for i in range(n):
        buckets.setdefault(tuple(coords[i]), []).append(i)
    buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    cut2 = r_cut * r_cut
    dst_parts, src_parts = [], []
    for (cx, cy, cz), members in buckets.items():
        for dx, dy, dz in offsets:
            other = buckets.get((cx + dx, cy + dy, cz + dz))
            if other is None:
                continue
            diff = r[members][:, None, :] - r[other][None, :, :]
            dist2 = np.einsum("ijk,ijk->ij", diff, diff)
            sel = dist2 < cut2
            sel &= members[:, None] != other[None, :]
            ii, jj = np.nonzero(sel)
            if ii.size:
                dst_parts.append(members[ii])
                src_parts.append(other[jj])
    if dst_parts:
        dst = np.concatenate(dst_parts)
        src = np.concatenate(src_parts)
    else:
        dst = np.empty(0, dtype=np.int64)
        src = np.empty(0, dtype=np.int64)
    return _canonical(dst, src, n)


def _group_by(key: np.ndarray, n: int) -> CsrLayout:
    # Stable integer argsort takes numpy's radix path, i.e. a bucket sort in
    # O(E + N); original edge order is preserved within each bucket.
    counts = np.bincount(key, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    perm = np.argsort(key, kind="stable").astype(np.int64)
    return ptr, perm


def group_by_destination(nl: NeighborList, n: int | None = None) -> CsrLayout:
    n = nl.n if n is None else n
    ptr, perm = _group_by(nl.dst, n)
    return CsrLayout(ptr=ptr, perm=perm, key="dst")


def group_by_source(nl: NeighborList, n: int | None = None) -> CsrLayout:
    n = nl.n if n is None else n
    ptr, perm = _group_by(nl.src, n)
    return CsrLayout(ptr=ptr, perm=perm, key="src")
