"""Langevin dynamics over batched replicas with either force backend.

Units are nm / ps / amu with energies in kJ/mol, which makes kJ/(mol nm
amu) exactly 1 nm/ps^2. Integration uses BAOAB splitting: the trailing
half-kick of each step is applied by the driver right after the fresh
force evaluation, so each step costs exactly one energy/force pass and the
friction-free, zero-temperature limit is plain velocity Verlet.

Randomness is counter-based: every (seed, replica, step) triple opens its
own Philox stream, so replica results are independent of scheduling and
checkpoints need only the step counter to resume bit-exactly.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flash import PipelineMode, flash_energy_forces
from .neighbors import build_neighbors_cells, group_by_destination, group_by_source
from .params_io import load_checkpoint, save_checkpoint
from .traffic import TrafficReport

KB = 0.00831446261815324  # kJ/(mol K)
FORCE_BLOWUP_LIMIT = 1.0e6  # kJ/(mol nm)

SCALARS_SCHEMA = "step,replica,potential,prior,kinetic_T,wall_ms"
# wall_ms is measured time and is excluded from byte-determinism checks
NONDETERMINISTIC_COLUMNS = ("wall_ms",)


class SimulationBlowupError(RuntimeError):
    """Non-finite or absurd forces; the diagnostic frame names the file."""


@dataclass
class SimState:
    positions: np.ndarray   # R x N x 3 nm
    velocities: np.ndarray  # R x N x 3 nm/ps
    masses: np.ndarray      # N amu
    step: int = 0

    @property
    def n_replicas(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_beads(self) -> int:
        return int(self.positions.shape[1])


@dataclass(frozen=True)
class SimConfig:
    dt_fs: float = 4.0
    temperature: float = 300.0  # K
    friction: float = 1.0       # 1/ps
    n_steps: int = 100
    n_replicas: int = 1
    seed: int = 0
    neighbor_stride: int = 1
    output_stride: int = 10
    mode: str = "32bit"         # 32bit | 64bit
    backend: PipelineMode = field(default_factory=PipelineMode)
    workers: int = 1
    checkpoint_path: str | None = None
    checkpoint_step: int | None = None

    def __post_init__(self):
        if not (self.dt_fs > 0):
            raise ValueError("dt must be positive")
        if self.temperature < 0 or self.friction < 0:
            raise ValueError("temperature and friction must be nonnegative")
        if self.mode not in ("32bit", "64bit"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def dtype(self):
        return np.float64 if self.mode == "64bit" else np.float32

    @property
    def dt_ps(self) -> float:
        return self.dt_fs * 1.0e-3


@dataclass(frozen=True)
class PriorSpec:
    """Harmonic bonds: E = sum 1/2 k (|r_i - r_j| - r0)^2."""

    bonds: np.ndarray      # M x 2 int indices
    spring_k: np.ndarray   # M, kJ/(mol nm^2)
    rest_length: np.ndarray  # M, nm

    def __post_init__(self):
        b = np.asarray(self.bonds)
        if b.size and (np.any(b[:, 0] == b[:, 1]) or np.any(self.spring_k < 0)
                       or np.any(self.rest_length <= 0)):
            raise ValueError("bonds need i != j, k >= 0 and r0 > 0")

    @property
    def num_bonds(self) -> int:
        return int(np.asarray(self.bonds).shape[0])


def prior_energy_forces(positions: np.ndarray, prior: PriorSpec):
    """Harmonic bond energy and analytic forces for one replica."""
    if prior is None or prior.num_bonds == 0:
        return 0.0, np.zeros_like(positions)
    i, j = prior.bonds[:, 0], prior.bonds[:, 1]
    rij = positions[i] - positions[j]
    d = np.sqrt(np.einsum("bk,bk->b", rij, rij))
    stretch = d - prior.rest_length.astype(positions.dtype)
    k = prior.spring_k.astype(positions.dtype)
    energy = float(0.5 * np.sum(k * stretch * stretch))
    safe = np.where(d > 0, d, 1.0)
    fvec = (-k * stretch / safe)[:, None] * rij
    forces = np.zeros_like(positions)
    np.add.at(forces, i, fvec)
    np.add.at(forces, j, -fvec)
    return energy, forces


def make_step_rng(seed: int, replica: int, step: int) -> np.random.Generator:
    """Counter-based stream for one (replica, step) pair."""
    bg = np.random.Philox(key=np.array([seed, replica], dtype=np.uint64),
                          counter=np.array([0, 0, 0, step], dtype=np.uint64))
    return np.random.Generator(bg)


def half_kick(state: SimState, forces: np.ndarray, config: SimConfig) -> SimState:
    dt = config.dt_ps
    m = state.masses[None, :, None].astype(state.velocities.dtype)
    v = state.velocities + (0.5 * dt) * forces / m
    return replace_state(state, velocities=v)


def replace_state(state: SimState, **kw) -> SimState:
    return SimState(
        positions=kw.get("positions", state.positions),
        velocities=kw.get("velocities", state.velocities),
        masses=state.masses,
        step=kw.get("step", state.step),
    )


def langevin_step(state: SimState, forces: np.ndarray, config: SimConfig,
                  rngs) -> SimState:
    """Half-kick, half-drift, OU velocity refresh, half-drift.

    The step's completing half-kick belongs to the driver, which applies it
    with freshly evaluated forces; see integrate(). Deterministic for a
    fixed seed, replica index and step counter.
    """
    dt = config.dt_ps
    dtype = state.positions.dtype
    m = state.masses[None, :, None].astype(dtype)

    v = state.velocities + (0.5 * dt) * forces / m
    r = state.positions + (0.5 * dt) * v

    c1 = math.exp(-config.friction * dt)
    c2 = np.sqrt((1.0 - c1 * c1) * KB * config.temperature / m)
    noise = np.stack([rngs[rep].standard_normal(r.shape[1:]) for rep in
                      range(state.n_replicas)]).astype(dtype)
    v = c1 * v + c2 * noise

    r = r + (0.5 * dt) * v
    return replace_state(state, positions=r, velocities=v, step=state.step + 1)


def kinetic_temperature(state: SimState) -> np.ndarray:
    """Instantaneous kinetic temperature per replica, K."""
    m = state.masses[None, :, None]
    ke = 0.5 * np.sum(m * state.velocities ** 2, axis=(1, 2))
    dof = 3 * state.n_beads
    return 2.0 * ke / (dof * KB)


def _check_forces(forces: np.ndarray):
    if not np.all(np.isfinite(forces)) or np.any(np.abs(forces) > FORCE_BLOWUP_LIMIT):
        raise SimulationBlowupError("non-finite or runaway forces")


def integrate(force_fn, state: SimState, config: SimConfig, observer=None) -> SimState:
    """BAOAB loop: one force evaluation per step.

    force_fn(positions, step) returns (forces, info); the trailing
    half-kick of each step uses the new forces, which also serve as the
    next step's leading half-kick forces.
    """
    forces, info = force_fn(state.positions, state.step)
    _check_forces(forces)
    if observer is not None:
        observer(state, forces, info, initial=True)
    for _ in range(config.n_steps):
        rngs = [make_step_rng(config.seed, rep, state.step)
                for rep in range(state.n_replicas)]
        state = langevin_step(state, forces, config, rngs)
        forces, info = force_fn(state.positions, state.step)
        _check_forces(forces)
        state = half_kick(state, forces, config)
        if observer is not None:
            observer(state, forces, info, initial=False)
    return state


@dataclass
class RunResult:
    trajectory_path: Path | None
    scalars_path: Path | None
    steps: int
    replicas: int
    wall_seconds: float
    dt_fs: float
    final_state: SimState
    traffic: TrafficReport
    mean_edges: float


def _format_frame(types, positions, step, replica):
    lines = [f"{positions.shape[0]}", f"step={step} replica={replica}"]
    for t, (x, y, z) in zip(types, positions):
        lines.append(f"B{int(t)} {x:.9f} {y:.9f} {z:.9f}")
    return "\n".join(lines) + "\n"


class _ReplicaForces:
    """Per-replica model+prior force provider with cached neighbor structures."""

    def __init__(self, params, types, prior, config: SimConfig):
        self.params = params
        self.types = types
        self.prior = prior
        self.config = config
        self.cached = {}
        self.traffic = TrafficReport()
        self.edge_counts = []

    def one_replica(self, rep, positions, step):
        cfg = self.config
        rebuild = rep not in self.cached or step % max(cfg.neighbor_stride, 1) == 0
        if rebuild:
            nl = build_neighbors_cells(positions, self.params.config.cutoff)
            layouts = (group_by_destination(nl), group_by_source(nl)) \
                if (cfg.backend.fused or cfg.backend.segred) else None
            self.cached[rep] = (nl, layouts)
        nl, layouts = self.cached[rep]
        out = flash_energy_forces(positions, self.types, self.params,
                                  cfg.backend, nl=nl, layouts=layouts)
        e_prior, f_prior = prior_energy_forces(positions, self.prior)
        self.edge_counts.append(nl.num_edges)
        return out, e_prior, f_prior

    def __call__(self, positions, step):
        reps = range(positions.shape[0])
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(
                    lambda rep: self.one_replica(rep, positions[rep], step), reps))
        else:
            results = [self.one_replica(rep, positions[rep], step) for rep in reps]
        forces = np.stack([out.forces + f_prior for out, _, f_prior in results])
        for out, _, _ in results:
            self.traffic.merge(out.traffic)
        info = {
            "potential": np.array([out.energy for out, _, _ in results]),
            "prior": np.array([e_prior for _, e_prior, _ in results]),
        }
        return forces.astype(positions.dtype), info


def run_simulation(params, system, config: SimConfig, out_dir,
                   resume_from=None) -> RunResult:
    """Integrate, writing an XYZ trajectory and a CSV scalar log.

    Frames and scalars are emitted for the initial state and then every
    output_stride steps, ordered by (step, replica); output is byte
    deterministic for fixed (config, seed, worker count) except the wall_ms
    column. Blow-ups dump a diagnostic frame and raise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype

    if resume_from is not None:
        chk = load_checkpoint(resume_from)
        state = SimState(positions=chk["positions"].astype(dtype),
                         velocities=chk["velocities"].astype(dtype),
                         masses=chk["masses"].astype(np.float64),
                         step=int(chk["step"]))
    else:
        r0 = system.initial_positions()
        pos = np.repeat(r0[None, :, :], config.n_replicas, axis=0).astype(dtype)
        state = SimState(positions=pos, velocities=np.zeros_like(pos),
                         masses=system.masses.astype(np.float64), step=0)

    provider = _ReplicaForces(params, system.types, system.prior, config)
    traj_path = out_dir / "trajectory.xyz"
    scalars_path = out_dir / "scalars.csv"
    traj_f = open(traj_path, "w")
    scal_f = open(scalars_path, "w")
    scal_f.write("# flashcg-scalars v1\n")
    scal_f.write(SCALARS_SCHEMA + "\n")

    t_start = time.perf_counter()
    last_wall = [t_start]

    def observer(st, forces, info, initial):
        now = time.perf_counter()
        wall_ms = (now - last_wall[0]) * 1e3
        last_wall[0] = now
        if config.checkpoint_step is not None and st.step == config.checkpoint_step \
                and config.checkpoint_path:
            save_checkpoint(config.checkpoint_path, st.positions, st.velocities,
                            st.masses, st.step, config.seed)
        if not (initial or st.step % max(config.output_stride, 1) == 0):
            return
        kin = kinetic_temperature(st)
        for rep in range(st.n_replicas):
            traj_f.write(_format_frame(system.types, st.positions[rep], st.step, rep))
            scal_f.write(f"{st.step},{rep},{info['potential'][rep]:.10g},"
                         f"{info['prior'][rep]:.10g},{kin[rep]:.10g},{wall_ms:.3f}\n")

    try:
        state = integrate(provider, state, config, observer=observer)
    except SimulationBlowupError:
        dump = out_dir / "blowup.xyz"
        with open(dump, "w") as f:
            for rep in range(state.n_replicas):
                f.write(_format_frame(system.types, state.positions[rep],
                                      state.step, rep))
        traj_f.close()
        scal_f.close()
        raise SimulationBlowupError(
            f"simulation blew up at step {state.step}; diagnostic frame in {dump}")
    finally:
        traj_f.close()
        scal_f.close()

    wall = time.perf_counter() - t_start
    mean_edges = float(np.mean(provider.edge_counts)) if provider.edge_counts else 0.0
    return RunResult(trajectory_path=traj_path, scalars_path=scalars_path,
                     steps=config.n_steps, replicas=config.n_replicas,
                     wall_seconds=wall, dt_fs=config.dt_fs, final_state=state,
                     traffic=provider.traffic, mean_edges=mean_edges)


def throughput_report(result: RunResult) -> dict:
    """Aggregate rate in timestep*mol/s and the ns/day conversion."""
    if result.wall_seconds <= 0:
        raise ValueError("cannot report throughput for a run with zero elapsed time")
    rate = result.steps * result.replicas / result.wall_seconds
    ns_per_day = rate * result.dt_fs * 86400.0 / 1.0e6
    return {
        "steps": result.steps,
        "replicas": result.replicas,
        "wall_seconds": result.wall_seconds,
        "timestep_mol_per_s": rate,
        "ns_per_day": ns_per_day,
    }
