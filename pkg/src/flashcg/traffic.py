"""Modeled memory-traffic accounting shared by both force backends.

Counters model the bytes a bandwidth-bound device would move for the edge-
and node-indexed tensors of an interaction block, not host cache behavior.
Each schedule line below stands for one conceptual kernel of the
corresponding backend, with its element reads/writes. The closed-form IO
models are literal sums over these schedules, so instrumented totals and
formulas agree exactly by construction; tests guard the wiring.

Granularity policy (documented constants):
  * Edge-pipeline kernels are itemized individually. That is where the two
    backends differ and where the per-step traffic is concentrated.
  * Node-level MLP work (pre-linear, update network, residual) is counted
    at module granularity, identically for both backends.
  * Parameter tensors and MLP hidden activations are excluded; the model
    signature is (N, E, D, D_r, T, width) only.
  * Atomic read-modify-write updates count as one read plus one write of
    the touched elements, and are also tallied in ``atomic_updates``.
  * Per-block node terms are identical across backends so that the base
    model dominates the fused model for every graph, dense or sparse.
  * Embedding lookup and the energy readout are excluded: they are
    independent of the block count and both models are exactly linear in T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("radial_basis", "filters", "gather", "messages", "aggregation", "mlps")

# (stage, read elements, written elements, atomic updates)
ScheduleLine = tuple[str, int, int, int]


@dataclass
class TrafficReport:
    """Per-stage modeled byte counters for one or more evaluations."""

    read_bytes: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    written_bytes: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    atomic_updates: int = 0

    def record(self, stage: str, read: int = 0, written: int = 0, atomics: int = 0) -> None:
        if stage not in self.read_bytes:
            raise KeyError(f"unknown traffic stage {stage!r}")
        self.read_bytes[stage] += int(read)
        self.written_bytes[stage] += int(written)
        self.atomic_updates += int(atomics)

    @property
    def total_read(self) -> int:
        return sum(self.read_bytes.values())

    @property
    def total_written(self) -> int:
        return sum(self.written_bytes.values())

    @property
    def total_bytes(self) -> int:
        return self.total_read + self.total_written

    def stage_bytes(self, stage: str) -> int:
        return self.read_bytes[stage] + self.written_bytes[stage]

    def merge(self, other: "TrafficReport") -> None:
        for s in STAGES:
            self.read_bytes[s] += other.read_bytes[s]
            self.written_bytes[s] += other.written_bytes[s]
        self.atomic_updates += other.atomic_updates

    def as_dict(self) -> dict:
        return {
            "read": dict(self.read_bytes),
            "written": dict(self.written_bytes),
            "total_bytes": self.total_bytes,
            "atomic_updates": self.atomic_updates,
        }


def base_block_forward_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    """Kernel-by-kernel forward traffic of one materializing block.

    The stacked basis, filter, gathered-source and message tensors are each
    written to memory and reread when consumed; the destination scatter-add
    runs as contended atomic read-modify-writes.
    """
    return [
        ("radial_basis", 6 * E, 3 * E, 0),            # gather endpoint positions, write u
        ("radial_basis", 3 * E, E, 0),                # distances d from u
        ("radial_basis", E, E * Dr, 0),               # Gaussian expansion of d
        ("radial_basis", E, E, 0),                    # cosine envelope values
        ("radial_basis", E * Dr + E, E * Dr, 0),      # apply envelope to the basis
        ("mlps", N * D, N * D, 0),                    # pre-linear on node features
        ("filters", E * Dr, E * D, 0),                # filter MLP, output matmul
        ("filters", E * D, E * D, 0),                 # filter MLP, output bias add
        ("gather", E * D, E * D, 0),                  # gather source rows
        ("messages", 2 * E * D, E * D, 0),            # x_src * w
        ("aggregation", 0, N * D, 0),                 # zero-init destination sums
        ("aggregation", E * D, 2 * E * D, E * D),     # scatter-add messages (atomic RMW)
        ("mlps", N * D, N * D, 0),                    # update network
        ("mlps", 2 * N * D, N * D, 0),                # residual add
    ]


def base_block_backward_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    """Backward traffic of one materializing block.

    Cached edge tensors are reread (nothing is recomputed) and their
    gradients materialized; the source-side scatter and the position
    gradient scatter are again atomic read-modify-writes.
    """
    return [
        ("mlps", N * D, N * D, 0),                    # residual backward
        ("mlps", 2 * N * D, N * D, 0),                # update network backward
        ("aggregation", E * D, E * D, 0),             # gather grad of sums onto edges
        ("messages", 2 * E * D, E * D, 0),            # grad wrt filters
        ("messages", 2 * E * D, E * D, 0),            # grad wrt gathered sources
        ("filters", E * D + E * Dr, E * Dr, 0),       # filter MLP backward
        ("gather", 0, N * D, 0),                      # zero-init source-side grads
        ("gather", E * D, 2 * E * D, E * D),          # scatter grads over sources (atomic RMW)
        ("radial_basis", E, E * Dr, 0),               # basis derivative from cached d
        ("radial_basis", 2 * E * Dr, E, 0),           # contract grads to per-edge grad_d
        ("radial_basis", 5 * E, 3 * E, 0),            # per-edge position gradient vectors
        ("radial_basis", 0, 3 * N, 0),                # zero-init position grads
        ("radial_basis", 6 * E, 12 * E, 6 * E),       # scatter +/- onto endpoints (atomic RMW)
        ("mlps", N * D, N * D, 0),                    # pre-linear backward
        ("mlps", 2 * N * D, N * D, 0),                # accumulate node grads
    ]


def base_block_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    return base_block_forward_schedule(N, E, D, Dr) + base_block_backward_schedule(N, E, D, Dr)


def flash_block_forward_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    """Forward traffic of one fused block.

    The fused edge operator keeps basis, filter and message values in tile
    registers; only per-edge distances (E scalars) are cached for backward.
    The segmented reduction writes each output row exactly once, with no
    init pass and no atomics.
    """
    return [
        ("mlps", N * D, N * D, 0),                    # pre-linear on node features
        ("messages", 6 * E + E * D, E, 0),            # fused edge pass; d cache out
        ("aggregation", 0, N * D, 0),                 # segment-store destination sums
        ("mlps", N * D, N * D, 0),                    # update network
        ("mlps", 2 * N * D, N * D, 0),                # residual add
    ]


def flash_block_backward_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    """Backward traffic of one fused block.

    Basis and filter values are recomputed on chip from the cached
    distances; the source row is reloaded once per source segment, modeled
    as min(N, E) row reads. Position gradients flow through one pair of
    segmented reductions with a single output write.
    """
    return [
        ("mlps", N * D, N * D, 0),                    # residual backward
        ("mlps", 2 * N * D, N * D, 0),                # update network backward
        ("messages", 7 * E + E * D, 3 * E, 0),        # fused bwd: d, positions, grad rows in; per-edge position grads out
        ("messages", min(N, E) * D, 0, 0),            # source row once per segment
        ("aggregation", 0, N * D, 0),                 # segment-store source grads
        ("aggregation", 6 * E, 3 * N, 0),             # segmented position-grad reduction
        ("mlps", N * D, N * D, 0),                    # pre-linear backward
        ("mlps", 2 * N * D, N * D, 0),                # accumulate node grads
    ]


def flash_block_schedule(N: int, E: int, D: int, Dr: int) -> list[ScheduleLine]:
    return flash_block_forward_schedule(N, E, D, Dr) + flash_block_backward_schedule(N, E, D, Dr)


def apply_block_schedule(report: TrafficReport, schedule: list[ScheduleLine], width: int) -> None:
    for stage, read, written, atomics in schedule:
        report.record(stage, read * width, written * width, atomics)


def schedule_total_elements(schedule: list[ScheduleLine]) -> int:
    return sum(read + written for _, read, written, _ in schedule)


class AllocTracker:
    """Peak-concurrent byte counter for edge-pipeline allocations.

    Backends register the transient edge-indexed arrays they materialize
    (stacked basis/filter/message tensors and their gradients for the
    materializing path; distance/position-grad caches and bounded tile
    buffers for the fused path). Node-level arrays common to both backends
    are not registered, so the peak isolates exactly the allocation
    behavior the two pipelines differ in.
    """

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def grab(self, nbytes: int) -> int:
        self.current += int(nbytes)
        if self.current > self.peak:
            self.peak = self.current
        return int(nbytes)

    def grab_array(self, arr) -> int:
        return self.grab(arr.nbytes)

    def drop(self, nbytes: int) -> None:
        self.current -= int(nbytes)

    def reset(self) -> None:
        self.current = 0
        self.peak = 0
