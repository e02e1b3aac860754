"""Structural metrics: RMSD, native contacts, GDT-TS, metastable basins.

All coordinates are in nm. Contact steepness beta defaults to 10 per nm
and the fluctuation allowance lambda to 1.5; GDT-TS uses the 1/2/4/8
Angstrom cutoff ladder (0.1 to 0.8 nm here).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neighbors import build_neighbors_bruteforce

CONTACT_BETA = 10.0          # 1/nm
CONTACT_LAMBDA = 1.5
CONTACT_CUTOFF = 0.9         # nm, bead-distance analog of the atomistic criterion
CONTACT_MIN_SEPARATION = 3
GDT_CUTOFFS_NM = (0.1, 0.2, 0.4, 0.8)

Q_HIST_BINS = 100
Q_SMOOTH_WINDOW = 11
Q_SMOOTH_ORDER = 3


class DegenerateStructureError(ValueError):
    pass


@dataclass(frozen=True)
class ContactSet:
    pairs: np.ndarray       # C x 2, unordered unique pairs with |i-j| >= separation
    ref_dist: np.ndarray    # C reference distances, > 0

    @property
    def count(self) -> int:
        return int(self.pairs.shape[0])


@dataclass
class MetricSeries:
    steps: np.ndarray
    rmsd: np.ndarray
    q: np.ndarray
    edges: np.ndarray
    gdt: np.ndarray | None = None

    def __post_init__(self):
        n = self.steps.size
        for name in ("rmsd", "q", "edges"):
            if getattr(self, name).size != n:
                raise ValueError(f"metric column {name} has mismatched length")


def kabsch_align(x: np.ndarray, x_ref: np.ndarray):
    """Optimal proper rigid superposition of x onto x_ref.

    Returns (rotation, translation, rmsd) minimizing the mean squared
    deviation |R x + t - x_ref|; the rotation determinant is +1 even for
    reflection-prone inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_ref, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("structures must share an N x 3 shape")
    n = x.shape[0]
    if n < 3:
        raise DegenerateStructureError("superposition needs at least 3 beads")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    h = xc.T @ yc
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateStructureError("degenerate covariance, rotation not unique")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = ym - rot @ xm
    moved = xc @ rot.T
    rmsd = float(np.sqrt(np.mean(np.sum((moved - yc) ** 2, axis=1))))
    return rot, trans, rmsd


def rmsd(x: np.ndarray, x_ref: np.ndarray) -> float:
    return kabsch_align(x, x_ref)[2]


def build_contacts(x_ref: np.ndarray, cutoff: float = CONTACT_CUTOFF,
                   min_separation: int = CONTACT_MIN_SEPARATION) -> ContactSet:
    """Reference pairs within cutoff and at least min_separation apart in sequence."""
    x = np.asarray(x_ref, dtype=np.float64)
    n = x.shape[0]
    ii, jj = np.triu_indices(n, k=min_separation)
    d = np.linalg.norm(x[ii] - x[jj], axis=1)
    keep = d < cutoff
    return ContactSet(pairs=np.stack([ii[keep], jj[keep]], axis=1),
                      ref_dist=d[keep])


def fraction_native_contacts(x: np.ndarray, contacts: ContactSet,
                             beta: float = CONTACT_BETA,
                             lam: float = CONTACT_LAMBDA) -> float:
    """Smooth fraction of preserved contacts, in [0, 1]."""
    if contacts.count == 0:
        raise ValueError("Q is undefined for an empty contact set")
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x[contacts.pairs[:, 0]] - x[contacts.pairs[:, 1]], axis=1)
    return float(np.mean(1.0 / (1.0 + np.exp(beta * (r - lam * contacts.ref_dist)))))


def _window_starts(n: int, length: int) -> range:
    return range(0, n - length + 1)


def gdt_ts(x: np.ndarray, x_ref: np.ndarray) -> float:
    """Cutoff-ladder similarity score with a multi-seed superposition search.

    Besides the full-structure superposition, every contiguous window of
    length N, N/2 and N/4 seeds an alignment; each cutoff keeps its best
    fraction over all seeds. Exact for identical structures and a close
    approximation of the maximal-subset search otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_ref, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise DegenerateStructureError("GDT-TS needs at least 3 beads")
    best = np.zeros(len(GDT_CUTOFFS_NM))
    lengths = sorted({n, max(n // 2, 3), max(n // 4, 3)}, reverse=True)
    for length in lengths:
        for start in _window_starts(n, length):
            sel = slice(start, start + length)
            try:
                rot, trans, _ = kabsch_align(x[sel], y[sel])
            except DegenerateStructureError:
                continue
            moved = x @ rot.T + trans
            dist = np.linalg.norm(moved - y, axis=1)
            for c, cut in enumerate(GDT_CUTOFFS_NM):
                frac = np.count_nonzero(dist <= cut) / n
                if frac > best[c]:
                    best[c] = frac
    return float(best.mean())


def savitzky_golay(series: np.ndarray, window: int, order: int) -> np.ndarray:
    """Least-squares local polynomial smoothing.

    Interior points use the standard convolution weights; each end is
    handled by fitting one polynomial to the first (last) window and
    evaluating it at the uncovered positions. Polynomials up to the given
    order are reproduced exactly.
    """
    y = np.asarray(series, dtype=np.float64)
    if window % 2 != 1 or window <= order:
        raise ValueError("window must be odd and larger than order")
    if y.ndim != 1 or y.size < window:
        raise ValueError("series must be 1-d with at least window entries")
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    a = np.vander(offsets, order + 1, increasing=True)
    weights = np.linalg.pinv(a)[0]  # row evaluating the fit at the center
    smooth = np.convolve(y, weights[::-1], mode="valid")

    out = np.empty_like(y)
    out[half:-half] = smooth
    pos = np.arange(window, dtype=np.float64)
    basis = np.vander(pos, order + 1, increasing=True)
    head = basis @ np.linalg.lstsq(basis, y[:window], rcond=None)[0]
    tail = basis @ np.linalg.lstsq(basis, y[-window:], rcond=None)[0]
    out[:half] = head[:half]
    out[-half:] = tail[-half:]
    return out


MIN_BASIN_DENSITY = 0.05  # of the smoothed-density peak


def largest_metastable_q(q_series: np.ndarray,
                         bins: int = Q_HIST_BINS,
                         window: int = Q_SMOOTH_WINDOW,
                         order: int = Q_SMOOTH_ORDER) -> float:
    """Rightmost local maximum of the smoothed probability density of Q.

    A strict local maximum only counts as a basin when its density reaches
    a small fraction of the peak, which keeps histogram noise in empty
    tails from registering. Falls back to the global maximum location when
    no interior maximum qualifies; an all-identical series returns that
    value directly.
    """
    q = np.asarray(q_series, dtype=np.float64)
    if q.size == 0:
        raise ValueError("empty Q series")
    if np.ptp(q) == 0.0:
        return float(q[0])
    density, edges = np.histogram(q, bins=bins, range=(0.0, 1.0), density=True)
    smoothed = savitzky_golay(density, window, order)
    centers = 0.5 * (edges[:-1] + edges[1:])
    floor = MIN_BASIN_DENSITY * float(smoothed.max())
    mid = smoothed[1:-1]
    interior = np.nonzero((mid > smoothed[:-2]) & (mid > smoothed[2:])
                          & (mid >= floor))[0]
    if interior.size:
        return float(centers[interior[-1] + 1])
    return float(centers[int(np.argmax(smoothed))])


def graph_stats(frames, r_cut: float):
    """Per-frame edge counts and adjacency summaries for a trajectory.

    Returns arrays of E, mean degree, max degree, and mean and max sequence
    separation |src - dst| over edges (the off-diagonal bandwidth picture).
    """
    rows = []
    for positions in frames:
        nl = build_neighbors_bruteforce(positions, r_cut)
        if nl.num_edges:
            deg = np.bincount(nl.dst, minlength=nl.n)
            span = np.abs(nl.src - nl.dst)
            rows.append((nl.num_edges, float(deg.mean()), int(deg.max()),
                         float(span.mean()), int(span.max())))
        else:
            rows.append((0, 0.0, 0, 0.0, 0))
    arr = np.array(rows, dtype=np.float64)
    return {
        "edges": arr[:, 0].astype(np.int64),
        "mean_degree": arr[:, 1],
        "max_degree": arr[:, 2].astype(np.int64),
        "mean_span": arr[:, 3],
        "max_span": arr[:, 4].astype(np.int64),
    }


def read_trajectory(path):
    """Parse the XYZ-style trajectory into (step, replica, types, positions)."""
    frames = []
    with open(path) as f:
        lines = f.read().splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        n = int(lines[i])
        comment = lines[i + 1]
        fields = dict(kv.split("=") for kv in comment.split())
        types, coords = [], []
        for row in lines[i + 2:i + 2 + n]:
            parts = row.split()
            types.append(int(parts[0].lstrip("B")))
            coords.append([float(p) for p in parts[1:4]])
        frames.append((int(fields["step"]), int(fields["replica"]),
                       np.array(types), np.array(coords)))
        i += 2 + n
    if not frames:
        raise ValueError(f"{path}: empty trajectory")
    return frames


def compute_metrics(frames, native: np.ndarray, r_cut: float,
                    contacts: ContactSet | None = None,
                    with_gdt: bool = False) -> MetricSeries:
    """Per-frame RMSD, Q and edge count against the native reference."""
    if contacts is None:
        contacts = build_contacts(native)
    steps, rmsds, qs, edges, gdts = [], [], [], [], []
    for step, _replica, _types, pos in frames:
        steps.append(step)
        rmsds.append(rmsd(pos, native))
        qs.append(fraction_native_contacts(pos, contacts))
        edges.append(build_neighbors_bruteforce(pos, r_cut).num_edges)
        if with_gdt:
            gdts.append(gdt_ts(pos, native))
    return MetricSeries(steps=np.array(steps), rmsd=np.array(rmsds),
                        q=np.array(qs), edges=np.array(edges),
                        gdt=np.array(gdts) if with_gdt else None)


def write_metrics_csv(series: MetricSeries, path) -> None:
    with open(path, "w") as f:
        f.write("# flashcg-metrics v1\n")
        cols = "frame,step,rmsd,q,edges" + (",gdt_ts" if series.gdt is not None else "")
        f.write(cols + "\n")
        for i in range(series.steps.size):
            row = (f"{i},{series.steps[i]},{series.rmsd[i]:.8f},"
                   f"{series.q[i]:.8f},{series.edges[i]}")
            if series.gdt is not None:
                row += f",{series.gdt[i]:.8f}"
            f.write(row + "\n")
