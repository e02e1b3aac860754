import numpy as np
import pytest

from flashcg.cli import EXIT_BLOWUP, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from flashcg.config import RunConfigError, parse_config

CONFIG_TEXT = """\
[model]
hidden_dim = 8
rbf_dim = 4
num_blocks = 1
cutoff = 1.2
num_atom_types = 8
filter_hidden_dim = 8
readout_hidden_dim = 4

[simulation]
dt_fs = 2.0
temperature = 300
friction = 1.0
n_steps = 10
n_replicas = 1
seed = 7
neighbor_stride = 1
output_stride = 5

[backend]
mode = 32bit
fused = on
segred = on
quant = off
workers = 1

[paths]
system = sys.txt
params = params.flcg
out = outdir
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.cfg").write_text(CONFIG_TEXT)
    assert main(["gen-system", "sys.txt", "--kind", "globule", "--n", "16",
                 "--seed", "3"]) == EXIT_OK
    assert main(["gen-params", "params.flcg", "--config", "run.cfg",
                 "--seed", "5"]) == EXIT_OK
    return tmp_path


def test_config_parses(workdir):
    rc = parse_config("run.cfg")
    assert rc.model["hidden_dim"] == 8
    assert rc.backend["fused"] is True
    assert rc.sim_config().n_steps == 10
    assert rc.pipeline_mode().segred is True


def test_config_unknown_key_rejected(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nhidden_dims = 8\n")
    with pytest.raises(RunConfigError, match="hidden_dims"):
        parse_config(bad)
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(RunConfigError, match="nonsense"):
        parse_config(bad)


def test_minimal_simulate_writes_outputs(workdir):
    assert main(["simulate", "--config", "run.cfg"]) == EXIT_OK
    assert (workdir / "outdir" / "trajectory.xyz").exists()
    assert (workdir / "outdir" / "scalars.csv").exists()


def test_two_bead_system_ten_steps(workdir):
    assert main(["gen-system", "two.txt", "--kind", "coil", "--n", "2"]) == EXIT_OK
    text = (workdir / "run.cfg").read_text().replace("sys.txt", "two.txt")
    (workdir / "two.cfg").write_text(text)
    assert main(["simulate", "--config", "two.cfg", "--out", "two_out"]) == EXIT_OK
    assert (workdir / "two_out" / "trajectory.xyz").exists()
    assert (workdir / "two_out" / "scalars.csv").exists()


def test_missing_params_file_names_path(workdir, capsys):
    text = (workdir / "run.cfg").read_text().replace("params.flcg", "absent.flcg")
    (workdir / "missing.cfg").write_text(text)
    assert main(["simulate", "--config", "missing.cfg"]) == EXIT_USAGE
    assert "absent.flcg" in capsys.readouterr().err


def test_verify_quick_passes(workdir):
    assert main(["verify", "--config", "run.cfg", "--quick"]) == EXIT_OK


def test_verify_64bit_mode_tightens_tolerances(workdir, capsys):
    assert main(["verify", "--quick", "--mode", "64bit"]) == EXIT_OK
    out = capsys.readouterr().out
    # the pipeline-equivalence line reports the 64-bit force tolerance
    line = next(l for l in out.splitlines() if "pipeline-equivalence" in l)
    assert "1.0e-09" in line


def test_verify_inject_fault_fails_naming_check(workdir, capsys):
    assert main(["verify", "--config", "run.cfg", "--quick",
                 "--inject-fault"]) == EXIT_VERIFY
    err = capsys.readouterr()
    assert "pipeline-equivalence" in err.err + err.out


def test_simulate_blowup_exit_code(workdir, capsys):
    # an absurd bond constant with a huge step detonates immediately
    sys_text = (workdir / "sys.txt").read_text()
    sys_text = sys_text.replace("[bonds]\n", "[bonds]\n0 4 1e14 3.9\n")
    (workdir / "bad_sys.txt").write_text(sys_text)
    text = (workdir / "run.cfg").read_text().replace("sys.txt", "bad_sys.txt")
    text = text.replace("dt_fs = 2.0", "dt_fs = 100.0")
    (workdir / "blow.cfg").write_text(text)
    assert main(["simulate", "--config", "blow.cfg", "--out", "blow_out"]) == EXIT_BLOWUP
    assert "blew up" in capsys.readouterr().err


def test_cross_backend_flags_round_trip(workdir):
    assert main(["simulate", "--config", "run.cfg", "--fused", "off",
                 "--segred", "off", "--mode", "64bit", "--out", "ref_out"]) == EXIT_OK
    assert main(["simulate", "--config", "run.cfg", "--fused", "on",
                 "--segred", "on", "--mode", "64bit", "--out", "fl_out"]) == EXIT_OK
    from flashcg.analysis import read_trajectory
    ref = read_trajectory(workdir / "ref_out" / "trajectory.xyz")
    fl = read_trajectory(workdir / "fl_out" / "trajectory.xyz")
    for (s1, r1, _, p1), (s2, r2, _, p2) in zip(ref, fl):
        assert (s1, r1) == (s2, r2)
        assert np.max(np.abs(p1 - p2)) <= 1e-6


def test_determinism_excluding_wall_column(workdir):
    assert main(["simulate", "--config", "run.cfg", "--out", "d1"]) == EXIT_OK
    assert main(["simulate", "--config", "run.cfg", "--out", "d2"]) == EXIT_OK
    t1 = (workdir / "d1" / "trajectory.xyz").read_bytes()
    t2 = (workdir / "d2" / "trajectory.xyz").read_bytes()
    assert t1 == t2

    def strip_wall(path):
        lines = path.read_text().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines[2:]]

    assert strip_wall(workdir / "d1" / "scalars.csv") \
        == strip_wall(workdir / "d2" / "scalars.csv")


def test_quantize_cli_table(workdir, capsys):
    assert main(["quantize", "params.flcg", "qparams.flcg"]) == EXIT_OK
    out = capsys.readouterr().out
    # one row per linear layer: 1 block x (pre + 2 filter + 2 post) + 2 readout
    rows = [l for l in out.splitlines() if l.startswith(("block", "readout"))]
    assert len(rows) == 7
    assert (workdir / "qparams.flcg").exists()
    text = (workdir / "run.cfg").read_text().replace("params.flcg", "qparams.flcg")
    (workdir / "q.cfg").write_text(text)
    assert main(["simulate", "--config", "q.cfg", "--out", "q_out"]) == EXIT_OK


def test_analyze_outputs_metrics(workdir):
    assert main(["simulate", "--config", "run.cfg"]) == EXIT_OK
    assert main(["analyze", "outdir/trajectory.xyz", "sys.txt",
                 "--out", "metrics.csv", "--cutoff", "1.2"]) == EXIT_OK
    lines = (workdir / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("# flashcg-metrics")
    assert lines[1] == "frame,step,rmsd,q,edges"
    assert len(lines) > 2


def test_analyze_rmsd_only_without_q(workdir):
    assert main(["simulate", "--config", "run.cfg"]) == EXIT_OK
    assert main(["analyze", "outdir/trajectory.xyz", "sys.txt",
                 "--rmsd-only", "--out", "r.csv"]) == EXIT_OK
    assert (workdir / "r.csv").exists()


def test_analyze_empty_trajectory_errors(workdir):
    (workdir / "empty.xyz").write_text("")
    assert main(["analyze", "empty.xyz", "sys.txt"]) == EXIT_USAGE


def test_analyze_native_reference_required(workdir, capsys):
    assert main(["simulate", "--config", "run.cfg"]) == EXIT_OK
    sys_text = (workdir / "sys.txt").read_text()
    head, _, _ = sys_text.partition("[native]")
    (workdir / "nonative.txt").write_text(head)
    assert main(["analyze", "outdir/trajectory.xyz", "nonative.txt"]) == EXIT_USAGE
    assert "native" in capsys.readouterr().err


def test_bench_csv_schema(workdir):
    assert main(["bench", "--config", "run.cfg", "--steps", "2",
                 "--out", "benchdir"]) == EXIT_OK
    lines = (workdir / "benchdir" / "bench.csv").read_text().splitlines()
    assert lines[0] == "# flashcg-bench v1"
    header = lines[1].split(",")
    assert "io_ratio" in header and "timestep_mol_per_s" in header
    rows = [dict(zip(header, l.split(","))) for l in lines[2:]]
    assert len(rows) >= 5
    for row in rows:
        assert float(row["io_ratio"]) > 1.0
        assert float(row["timestep_mol_per_s"]) > 0


def test_gen_system_kinds(workdir):
    for kind in ("coil", "helix", "globule"):
        assert main(["gen-system", f"{kind}.txt", "--kind", kind, "--n", "12"]) == EXIT_OK
    from flashcg.systems import load_system
    spec = load_system(workdir / "helix.txt")
    assert spec.n_beads == 12
    assert spec.prior is not None and spec.prior.num_bonds == 11
