"""Command-line surface: simulate, verify, bench, quantize, analyze, gen-system.

Exit codes: 0 ok, 1 usage/config error, 2 verification failure,
3 simulation blow-up.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_BLOWUP = 3


def _global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="run configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--mode", choices=("32bit", "64bit"), default=None)
    parser.add_argument("--fused", choices=("on", "off"), default=None)
    parser.add_argument("--segred", choices=("on", "off"), default=None)
    parser.add_argument("--quant", choices=("on", "off"), default=None)
    parser.add_argument("--out", type=str, default=None, help="output directory")


def _load_run_config(args):
    from .config import RunConfig, apply_cli_overrides, parse_config

    rc = parse_config(args.config) if args.config else RunConfig()
    return apply_cli_overrides(rc, args)


def _load_inputs(rc):
    from .params_io import load_params
    from .quantize import QuantizedParams, quantize_model
    from .systems import load_system

    system = load_system(rc.path("system", must_exist=True))
    dtype = np.float64 if rc.backend.get("mode") == "64bit" else np.float32
    params = load_params(rc.path("params", must_exist=True), dtype=dtype)
    if rc.backend.get("quant") and not isinstance(params, QuantizedParams):
        params = quantize_model(params, seed=rc.simulation.get("seed", 0))
    return system, params


def cmd_simulate(args) -> int:
    from .md import SimulationBlowupError, run_simulation, throughput_report

    rc = _load_run_config(args)
    system, params = _load_inputs(rc)
    out_dir = rc.path("out") if "out" in rc.paths else Path("out")
    sim = rc.sim_config()
    try:
        result = run_simulation(params, system, sim, out_dir,
                                resume_from=getattr(args, "resume", None))
    except SimulationBlowupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    report = throughput_report(result)
    print(f"wrote {result.trajectory_path} and {result.scalars_path}")
    print(f"steps={report['steps']} replicas={report['replicas']} "
          f"wall={report['wall_seconds']:.3f}s "
          f"rate={report['timestep_mol_per_s']:.1f} timestep*mol/s "
          f"({report['ns_per_day']:.1f} ns/day aggregate)")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    rc = _load_run_config(args)
    seed = rc.simulation.get("seed", 0)
    mode = rc.backend.get("mode", "32bit")
    results = run_verification(seed=seed, mode=mode, quick=args.quick,
                               fault=args.inject_fault)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    if failed:
        print(f"verification FAILED: {', '.join(r.name for r in failed)}",
              file=sys.stderr)
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench, write_bench_csv

    rc = _load_run_config(args)
    system, params = _load_inputs(rc)
    out_dir = rc.path("out") if "out" in rc.paths else Path("bench_out")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    replicas = sorted({1, rc.simulation.get("n_replicas", 1)})
    combos = [(False, False, False), (True, False, False),
              (False, True, False), (True, True, False), (True, True, True)]
    sim_kw = dict(rc.simulation)
    sim_kw.pop("n_steps", None)
    sim_kw.pop("n_replicas", None)
    sim_kw.pop("seed", None)
    sim_kw["out"] = str(Path(out_dir) / "cells")
    sim_kw["workers"] = rc.backend.get("workers", 1)
    rows = run_bench(params, system, sim_kw, replicas, combos,
                     steps=args.steps, seed=rc.simulation.get("seed", 0))
    csv_path = Path(out_dir) / "bench.csv"
    write_bench_csv(rows, csv_path)
    print(f"wrote {csv_path} ({len(rows)} cells)")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .neighbors import build_neighbors_bruteforce
    from .params_io import load_params, save_params
    from .quantize import quantize_model
    from .reference import reference_energy_forces
    from .verify import energy_rel_err

    params = load_params(args.params_in)
    errors: list = []
    qparams = quantize_model(params, seed=args.seed or 0, errors=errors)
    save_params(qparams, args.params_out)
    print(f"{'layer':<24}{'calibrated sq. error':>24}")
    for name, err in errors:
        print(f"{name:<24}{err:>24.6e}")

    rng = np.random.default_rng(args.seed or 0)
    cfg = params.config
    worst = 0.0
    for _ in range(args.check_states):
        n = int(rng.integers(16, 48))
        positions = rng.uniform(0, 0.8 * n ** (1 / 3) * cfg.cutoff,
                                (n, 3)).astype(np.float32)
        types = rng.integers(0, cfg.num_atom_types, n)
        nl = build_neighbors_bruteforce(positions, cfg.cutoff)
        full = reference_energy_forces(positions, types, params, nl=nl)
        quant = reference_energy_forces(positions, types, qparams, nl=nl)
        worst = max(worst, energy_rel_err(quant.energy, full.energy, full.per_atom))
    print(f"quantized vs full-precision energy over {args.check_states} random "
          f"states: max relative error {worst:.3e}")
    print(f"wrote {args.params_out} ({len(errors)} quantized layers)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import analysis
    from .systems import load_system

    system = load_system(args.system)
    frames = analysis.read_trajectory(args.trajectory)
    if args.rmsd_only:
        native = system.native
        if native is None:
            print("error: rmsd requires native reference coordinates", file=sys.stderr)
            return EXIT_USAGE
        rows = [(s, analysis.rmsd(p, native)) for s, _, _, p in frames]
        out = Path(args.out or "metrics.csv")
        with open(out, "w") as f:
            f.write("# flashcg-metrics v1\nframe,step,rmsd\n")
            for i, (s, r) in enumerate(rows):
                f.write(f"{i},{s},{r:.8f}\n")
        print(f"wrote {out}")
        return EXIT_OK

    if system.native is None:
        print("error: Q/GDT metrics require native reference coordinates",
              file=sys.stderr)
        return EXIT_USAGE
    series = analysis.compute_metrics(frames, system.native, args.cutoff,
                                      with_gdt=args.gdt)
    out = Path(args.out or "metrics.csv")
    analysis.write_metrics_csv(series, out)
    stats = analysis.graph_stats([p for _, _, _, p in frames], args.cutoff)
    peak_q = analysis.largest_metastable_q(series.q) if series.q.size >= 11 \
        else float(np.max(series.q))
    print(f"wrote {out}")
    print(f"largest metastable Q: {peak_q:.4f}")
    if series.gdt is not None:
        top = series.q >= np.quantile(series.q, 0.9)
        print(f"mean GDT-TS over highest-Q frames: {float(series.gdt[top].mean()):.4f}")
    print(f"edges: first={stats['edges'][0]} last={stats['edges'][-1]} "
          f"max_degree={int(stats['max_degree'].max())}")
    return EXIT_OK


def cmd_gen_system(args) -> int:
    from .systems import generate_system, save_system

    spec = generate_system(args.kind, args.n, args.seed or 0,
                           bonded=not args.no_bonds)
    save_system(spec, args.file)
    print(f"wrote {args.file} ({spec.n_beads} beads, kind={args.kind})")
    return EXIT_OK


def cmd_gen_params(args) -> int:
    from .model import init_params
    from .params_io import save_params

    rc = _load_run_config(args)
    params = init_params(rc.model_config(), args.seed if args.seed is not None else 0)
    save_params(params, args.file)
    print(f"wrote {args.file} ({params.config})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashcg",
        description="Coarse-grained MD with fused, IO-lean neural force backends")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run Langevin dynamics")
    _global_flags(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the oracle suite")
    _global_flags(p)
    p.add_argument("--quick", action="store_true", help="reduced instance counts")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="sweep backends and replica counts")
    _global_flags(p)
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("quantize", help="write a channel-quantized parameter file")
    p.add_argument("params_in", type=str)
    p.add_argument("params_out", type=str)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check-states", type=int, default=100,
                   help="random states for the printed accuracy comparison")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("analyze", help="structural metrics from a trajectory")
    p.add_argument("trajectory", type=str)
    p.add_argument("system", type=str)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--cutoff", type=float, default=1.5)
    p.add_argument("--gdt", action="store_true")
    p.add_argument("--rmsd-only", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-system", help="write a synthetic system file")
    p.add_argument("file", type=str)
    p.add_argument("--kind", choices=("coil", "helix", "globule"), default="coil")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-bonds", action="store_true")
    p.set_defaults(func=cmd_gen_system)

    p = sub.add_parser("gen-params", help="write randomly initialized parameters")
    _global_flags(p)
    p.add_argument("file", type=str)
    p.set_defaults(func=cmd_gen_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
