import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from faultxfer.cli import main
from faultxfer.config import emit_config, preset_config
from faultxfer.dynamics import make_system
from faultxfer.sysid import TrajectoryBuffer


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_version_and_help():
    r = subprocess.run([sys.executable, "-m", "faultxfer.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "identify", "transfer", "train", "evaluate", "reproduce", "show-config"):
        assert cmd in r.stdout


def test_evaluate_zero_policy_at_origin(capsys, tmp_path):
    code, out, _ = run(capsys, "evaluate", "--system", "temperature", "--policy", "zero", "--x0", "0",
                       "--out", tmp_path / "o")
    assert code == 0 and out.startswith("mean 0.0 +/- 0.0")
    res = json.loads((tmp_path / "o" / "evaluation.json").read_text())
    assert res["mean"] == 0.0 and res["std"] == 0.0


def test_manifest_lists_outputs_with_hashes(capsys, tmp_path):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "simulate", "--system", "spring", "--seed", "2", "--episodes", "2", "--horizon", "20",
                     "--out", out)
    assert code == 0
    m = manifest(out)
    for key in ("command", "config_hash", "tool_version", "timestamp", "seeds", "outputs"):
        assert key in m
    assert m["command"] == "simulate" and m["seeds"] == [2]
    for entry in m["outputs"]:
        data = (out / entry["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]
    assert not list(out.glob("**/*.partial"))


def test_rerun_is_byte_identical(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "--system", "pendulum", "--seed", "5", "--noise", "0.2", "--horizon", "50",
                   "--out", tmp_path / d)[0] == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
    ma, mb = manifest(tmp_path / "a"), manifest(tmp_path / "b")
    assert ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]


def test_output_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("FAULTXFER_OUT", str(tmp_path / "env"))
    assert run(capsys, "evaluate", "--policy", "lqr", "--episodes", "2")[0] == 0
    assert (tmp_path / "env" / "evaluation.json").is_file()


@pytest.mark.parametrize(
    "argv, message",
    [
        (["evaluate", "--policy", "missing.json"], "policy file not found"),
        (["evaluate", "--policy", "zero", "--x0", "1,2"], "--x0 needs 1 values"),
        (["simulate", "--seed", "a,b"], "--seed expects"),
        (["identify", "nope.csv"], "buffer file not found"),
        (["reproduce", "lqr-tabel"], "unknown preset"),
        (["transfer", "--models", "none.json"], "model file not found"),
    ],
)
def test_errors_exit_one_without_artifacts(capsys, tmp_path, argv, message):
    out = tmp_path / "o"
    code, _, err = run(capsys, *argv, "--out", out)
    assert code == 1
    assert err.startswith(f"faultxfer {argv[0]}: error:") and message in err
    assert len(err.strip().splitlines()) == 1
    assert not out.exists()


def test_bad_config_reports_suggestion(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("systm: spring\n")
    code, _, err = run(capsys, "evaluate", "--config", cfg, "--policy", "zero", "--out", tmp_path / "o")
    assert code == 1 and "did you mean 'system'" in err
    assert not (tmp_path / "o").exists()


def test_failed_commit_leaves_nothing(capsys, tmp_path, monkeypatch):
    import faultxfer.cli as cli

    real = cli.json.dumps

    def failing(obj, *a, **k):
        if isinstance(obj, dict) and "outputs" in obj:
            raise OSError("disk full")
        return real(obj, *a, **k)

    monkeypatch.setattr(cli.json, "dumps", failing)
    out = tmp_path / "o"
    code, _, err = run(capsys, "evaluate", "--policy", "zero", "--out", out)
    assert code == 1 and "disk full" in err
    assert all(p.is_dir() for p in out.glob("**/*"))


def test_identify_recovers_temperature_model(capsys, tmp_path):
    spec = make_system("temperature")
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 200)
    u = rng.uniform(-1, 1, 200)
    x_next = x + spec.dt * (-0.1 * x + u)
    buf = TrajectoryBuffer(n=1, m=1, dt=spec.dt, tag="s", cap=None)
    for i in range(200):
        buf.add(i, 0, x[i], u[i], x_next[i], 0.0)
    path = tmp_path / "buf.csv"
    path.write_text(buf.to_csv())
    code, out, _ = run(capsys, "identify", path, "--out", tmp_path / "o")
    assert code == 0
    res = json.loads((tmp_path / "o" / "identification.json").read_text())
    np.testing.assert_allclose(res["source"]["A"], [[-0.1]], atol=1e-6)
    np.testing.assert_allclose(res["source"]["B"], [[1.0]], atol=1e-6)
    assert res["source"]["residual"] < 1e-10
    assert manifest(tmp_path / "o")["config_hash"] is None


def test_simulate_identify_transfer_chain(capsys, tmp_path):
    for plant in ("source", "target"):
        assert run(capsys, "simulate", "--system", "spring", "--plant", plant, "--policy", "zero", "--noise", "0.5",
                   "--episodes", "5", "--horizon", "100", "--out", tmp_path / plant)[0] == 0
    assert run(capsys, "identify", tmp_path / "source" / "trajectory.csv",
               "--target", tmp_path / "target" / "trajectory.csv", "--out", tmp_path / "id")[0] == 0
    ident = json.loads((tmp_path / "id" / "identification.json").read_text())
    np.testing.assert_allclose(np.array(ident["F_B"]) @ ident["source"]["B"], ident["target"]["B"], atol=1e-6)
    code, out, _ = run(capsys, "transfer", "--system", "spring", "--models", tmp_path / "id" / "identification.json",
                       "--out", tmp_path / "t")
    assert code == 0 and "rho=" in out
    pi_t = tmp_path / "t" / "pi_t.json"
    code, out, _ = run(capsys, "evaluate", "--system", "spring", "--plant", "target", "--policy", pi_t,
                       "--episodes", "5", "--out", tmp_path / "e")
    assert code == 0
    ev_t = json.loads((tmp_path / "e" / "evaluation.json").read_text())["mean"]
    run(capsys, "evaluate", "--system", "spring", "--plant", "target", "--policy", "lqr", "--episodes", "5",
        "--out", tmp_path / "d")
    ev_d = json.loads((tmp_path / "d" / "evaluation.json").read_text())["mean"]
    assert ev_t == pytest.approx(ev_d, rel=0.05)


def test_train_writes_checkpoints(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("system: temperature\ncontroller: rl\ntraining:\n  steps_per_iteration: 500\n"
                   "  minibatch_size: 250\n  epochs: 1\n  eval_episodes: 2\n  hidden: 4\nevaluation:\n  episodes: 2\n")
    out = tmp_path / "o"
    code, _, _ = run(capsys, "train", "--config", cfg, "--iterations", "4", "--checkpoint-every", "2", "--out", out)
    assert code == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["iter_00002.json", "iter_00004.json"]
    lines = (out / "curve.csv").read_text().splitlines()
    assert lines[1].startswith("seed,iteration,env_steps") and len(lines) == 2 + 4
    names = {e["path"] for e in manifest(out)["outputs"]}
    assert names == {"policy.json", "curve.csv", "checkpoints/iter_00002.json", "checkpoints/iter_00004.json"}
    assert run(capsys, "evaluate", "--config", cfg, "--policy", out / "policy.json", "--out", tmp_path / "e")[0] == 0


def test_reproduce_table_rows(capsys, tmp_path):
    out = tmp_path / "o"
    code, stdout, _ = run(capsys, "reproduce", "lqr-table", "--system", "temperature", "--out", out)
    assert code == 0 and "jumpstart" in stdout
    lines = (out / "lqr-table_temperature.csv").read_text().splitlines()
    assert lines[0].startswith("# faultxfer-table")
    assert lines[1] == "variant,system,mean,std,n_episodes"
    rows = [l.split(",") for l in lines[2:]]
    assert [r[0] for r in rows] == ["pi_s on P_t", "pi_lqr on P_t", "pi_t on P_t"]
    assert all(r[1] == "temperature" and r[4] == "100" for r in rows)
    m = manifest(out)
    assert m["command"] == "reproduce" and m["seeds"] == [0, 1, 2, 3, 4]
    assert {e["path"] for e in m["outputs"]} == {"lqr-table_temperature.json", "lqr-table_temperature.csv"}


def test_show_config_is_fixpoint(capsys, tmp_path):
    code, text, _ = run(capsys, "show-config", "--preset", "mpc-table", "--system", "spring")
    assert code == 0 and text == emit_config(preset_config("mpc-table", "spring"))
    path = tmp_path / "c.yaml"
    path.write_text(text)
    assert run(capsys, "show-config", "--config", path)[1] == text
