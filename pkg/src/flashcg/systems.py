"""System files and synthetic structure generators.

The system file is structured text with sections: bead types and masses,
optional harmonic bonds, optional initial and native coordinate blocks,
and the energy unit tag. The generators produce random coils, helix-like
spirals and collapsed globules, which removes any dependence on external
structure data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .md import PriorSpec

DEFAULT_BOND_K = 1000.0   # kJ/(mol nm^2)
DEFAULT_BOND_R0 = 0.38    # nm, consecutive-bead distance
DEFAULT_MASS = 110.0      # amu
GENERATOR_TYPES = 8       # synthetic systems draw bead types below this


class SystemFileError(ValueError):
    pass


@dataclass
class SystemSpec:
    types: np.ndarray            # int per bead
    masses: np.ndarray           # amu per bead
    prior: PriorSpec | None
    positions: np.ndarray | None   # initial coordinates, nm
    native: np.ndarray | None      # reference coordinates, nm
    energy_unit: str = "kJ/mol"

    @property
    def n_beads(self) -> int:
        return int(self.types.size)

    def initial_positions(self) -> np.ndarray:
        if self.positions is not None:
            return self.positions
        if self.native is not None:
            return self.native
        raise SystemFileError("system has neither initial nor native coordinates")


def save_system(spec: SystemSpec, path) -> None:
    lines = ["# flashcg system v1", "[system]", f"n_beads = {spec.n_beads}",
             f"energy_unit = {spec.energy_unit}", "", "[beads]"]
    for i in range(spec.n_beads):
        lines.append(f"{i} {int(spec.types[i])} {spec.masses[i]:.6f}")
    if spec.prior is not None and spec.prior.num_bonds:
        lines.append("")
        lines.append("[bonds]")
        for (i, j), k, r0 in zip(spec.prior.bonds, spec.prior.spring_k,
                                 spec.prior.rest_length):
            lines.append(f"{int(i)} {int(j)} {k:.6f} {r0:.6f}")
    for label, block in (("positions", spec.positions), ("native", spec.native)):
        if block is not None:
            lines.append("")
            lines.append(f"[{label}]")
            for x, y, z in block:
                lines.append(f"{x:.9f} {y:.9f} {z:.9f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_system(path) -> SystemSpec:
    section = None
    meta: dict = {}
    beads, bonds, positions, native = [], [], [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                if section not in ("system", "beads", "bonds", "positions", "native"):
                    raise SystemFileError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if section == "system":
                if "=" not in line:
                    raise SystemFileError(f"{path}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in ("n_beads", "energy_unit"):
                    raise SystemFileError(f"{path}:{lineno}: unknown key {key!r}")
                meta[key] = val
            elif section == "beads":
                parts = line.split()
                if len(parts) != 3:
                    raise SystemFileError(f"{path}:{lineno}: bead rows are 'index type mass'")
                beads.append((int(parts[0]), int(parts[1]), float(parts[2])))
            elif section == "bonds":
                parts = line.split()
                if len(parts) != 4:
                    raise SystemFileError(f"{path}:{lineno}: bond rows are 'i j k r0'")
                bonds.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
            elif section in ("positions", "native"):
                parts = line.split()
                if len(parts) != 3:
                    raise SystemFileError(f"{path}:{lineno}: coordinate rows are 'x y z'")
                (positions if section == "positions" else native).append(
                    tuple(float(p) for p in parts))
            else:
                raise SystemFileError(f"{path}:{lineno}: content outside any section")

    if "n_beads" not in meta:
        raise SystemFileError(f"{path}: missing n_beads")
    n = int(meta["n_beads"])
    if len(beads) != n:
        raise SystemFileError(f"{path}: expected {n} bead rows, found {len(beads)}")
    beads.sort()
    if [b[0] for b in beads] != list(range(n)):
        raise SystemFileError(f"{path}: bead indices must cover 0..{n - 1}")

    types = np.array([b[1] for b in beads], dtype=np.int64)
    masses = np.array([b[2] for b in beads], dtype=np.float64)
    prior = None
    if bonds:
        arr = np.array(bonds, dtype=np.float64)
        prior = PriorSpec(bonds=arr[:, :2].astype(np.int64),
                          spring_k=arr[:, 2], rest_length=arr[:, 3])
    pos_arr = np.array(positions, dtype=np.float64) if positions else None
    nat_arr = np.array(native, dtype=np.float64) if native else None
    for label, block in (("positions", pos_arr), ("native", nat_arr)):
        if block is not None and block.shape != (n, 3):
            raise SystemFileError(f"{path}: [{label}] must have {n} rows")
    return SystemSpec(types=types, masses=masses, prior=prior,
                      positions=pos_arr, native=nat_arr,
                      energy_unit=meta.get("energy_unit", "kJ/mol"))


def _chain_prior(n: int) -> PriorSpec:
    idx = np.arange(n - 1)
    return PriorSpec(bonds=np.stack([idx, idx + 1], axis=1),
                     spring_k=np.full(n - 1, DEFAULT_BOND_K),
                     rest_length=np.full(n - 1, DEFAULT_BOND_R0))


def gen_coil(n: int, seed: int) -> np.ndarray:
    """Random walk with fixed bond length and mild self-avoidance."""
    rng = np.random.default_rng(seed)
    pos = np.zeros((n, 3))
    for i in range(1, n):
        for _ in range(64):
            step = rng.normal(size=3)
            step *= DEFAULT_BOND_R0 / np.linalg.norm(step)
            cand = pos[i - 1] + step
            if i < 2 or np.min(np.linalg.norm(pos[:i - 1] - cand, axis=1)) > 0.3:
                break
        pos[i] = cand
    return pos


def gen_helix(n: int, seed: int = 0) -> np.ndarray:
    """Helical spiral with CG alpha-helix-like radius, rise and turn."""
    radius, rise, turn = 0.23, 0.15, math.radians(100.0)
    k = np.arange(n)
    return np.stack([radius * np.cos(turn * k),
                     radius * np.sin(turn * k),
                     rise * k], axis=1)


def gen_globule(n: int, seed: int) -> np.ndarray:
    """Collapsed blob: random sphere packing relaxed to a minimum separation."""
    rng = np.random.default_rng(seed)
    radius = 0.28 * max(n, 2) ** (1.0 / 3.0)
    pos = rng.normal(size=(n, 3))
    pos *= (radius * rng.uniform(0, 1, n) ** (1.0 / 3.0) /
            np.linalg.norm(pos, axis=1))[:, None]
    min_sep = 0.3
    for _ in range(60):
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(dist, 1e9)
        close = dist < min_sep
        if not close.any():
            break
        push = np.where(close, (min_sep - dist) / np.maximum(dist, 1e-9), 0.0)
        pos += 0.5 * np.einsum("ij,ijk->ik", push, diff)
    return pos


def generate_system(kind: str, n: int, seed: int, bonded: bool = True) -> SystemSpec:
    makers = {"coil": gen_coil, "helix": gen_helix, "globule": gen_globule}
    if kind not in makers:
        raise SystemFileError(f"unknown system kind {kind!r}; pick one of {sorted(makers)}")
    positions = makers[kind](n, seed)
    rng = np.random.default_rng(seed + 1)
    types = rng.integers(0, GENERATOR_TYPES, size=n)
    return SystemSpec(types=types,
                      masses=np.full(n, DEFAULT_MASS),
                      prior=_chain_prior(n) if (bonded and n > 1) else None,
                      positions=positions,
                      native=positions.copy())


def skewed_segments(n_segments: int, n_edges: int, kind: str):
    """Segment-size layouts for degree-skew experiments at fixed edge count.

    Returns (ptr, dst) where dst repeats each segment id by its size.
    "uniform" spreads edges evenly; "powerlaw" concentrates them in a heavy
    head (Zipf weights) so a few segments are very long.
    """
    if kind == "uniform":
        sizes = np.full(n_segments, n_edges // n_segments, dtype=np.int64)
        sizes[:n_edges % n_segments] += 1
    elif kind == "powerlaw":
        w = 1.0 / np.arange(1, n_segments + 1, dtype=np.float64) ** 1.1
        sizes = np.floor(w / w.sum() * n_edges).astype(np.int64)
        sizes[0] += n_edges - sizes.sum()
    else:
        raise ValueError(f"unknown layout kind {kind!r}")
    ptr = np.zeros(n_segments + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    dst = np.repeat(np.arange(n_segments, dtype=np.int64), sizes)
    return ptr, dst
