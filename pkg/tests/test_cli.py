import csv
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

from eqsim.channel import make_rng, simulate
from eqsim.cli import (ConfigError, atomic_write, load_manifest, main, manifest_from_dict,
                       summarize_trajectory)
from eqsim.harness import ARCHS, estimate_resources

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.toml"


def read_csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.toml")):
        m = load_manifest(path)
        assert m.echo()["version"] == "eqsim-run/1"
    a = load_manifest(CONFIGS / "fig5a.toml").system
    assert (a.p_i, a.p_t, a.train.seq_len, a.train.lr) == (33, 1, 512, 0.001)
    c = load_manifest(CONFIGS / "fig5c.toml").system
    assert (c.p_i, c.p_t, c.train.seq_len) == (32, 2, 256)


def test_manifest_errors():
    with pytest.raises(ConfigError):
        manifest_from_dict({"chanel": {}})
    with pytest.raises(ConfigError):
        manifest_from_dict({"channel": {"fibre_km": 3}})
    with pytest.raises(ConfigError):
        manifest_from_dict({"channel": {"snr_db": 15, "pam_order": 3}})
    m = manifest_from_dict({"channel": {"lambda": 1.3e-6}, "system": {"seed": 5}})
    assert m.channel.lam == 1.3e-6 and m.channel.seed == 5
    assert manifest_from_dict({}, seed=9).channel.seed == 9


def test_sim_channel_matches_library(tmp_path):
    out = tmp_path / "rx.csv"
    assert main(["sim-channel", str(SMOKE), "--symbols", "256", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 256
    m = load_manifest(SMOKE)
    tx, rx = simulate(256, m.channel, make_rng(m.channel.seed))
    got = np.array([[float(r["rx_sample_even"]), float(r["rx_sample_odd"])] for r in rows])
    assert np.array_equal(got.ravel(), rx.values())
    assert np.array_equal([float(r["tx_symbol"]) for r in rows], tx.symbols)
    assert b"\r\n" not in out.read_bytes()


def test_sim_channel_seed_flag_anywhere(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["--seed", "3", "sim-channel", str(SMOKE), "--symbols", "64", "--out", str(a)]) == 0
    assert main(["sim-channel", str(SMOKE), "--symbols", "64", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_exit_codes(tmp_path):
    assert main(["sim-channel", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[system]\nseedz = 1\n")
    assert main(["sim-channel", str(bad)]) == 2
    bad.write_text("[system\n")
    assert main(["sim-channel", str(bad)]) == 2
    assert main(["sim-channel", str(SMOKE), "--symbols", "10"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["resources", "--p-i", "5:4"]) == 2
    assert main(["report", str(tmp_path / "none.csv")]) == 2
    # the output location is a directory: I/O error
    assert main(["resources", "--p-i", "1:2", "--out", str(tmp_path)]) == 3


def test_pack_verify(capsys):
    assert main(["pack-verify", "--d", "4", "--w", "3"]) == 0
    assert "tested=2048 mismatches=0" in capsys.readouterr().out
    assert main(["pack-verify", "--d", "12", "--w", "6"]) == 4
    assert "constraint violation" in capsys.readouterr().out


def test_resources_matches_library(tmp_path):
    out = tmp_path / "res.csv"
    assert main(["resources", "--p-i", "1:64", "--p-t", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 3 * 64
    for r in rows:
        est = estimate_resources(r["arch"], int(r["p_i"]), 1)
        assert (int(r["dsp"]), int(r["lut_est"])) == (est.dsp_count, est.lut_estimate)
    for arch in ARCHS:
        dsp = [int(r["dsp"]) for r in rows if r["arch"] == arch]
        assert all(b > a for a, b in zip(dsp, dsp[1:]))
    by = {(r["arch"], r["p_i"]): int(r["dsp"]) for r in rows}
    assert all(by[("conv_map", str(p))] < by[("conv_inst", str(p))] for p in range(2, 65))


def test_train_smoke_report_and_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["train", str(SMOKE), "--out", str(tmp_path / "a")]) == 0
    assert time.perf_counter() - t0 < 60
    assert main(["train", str(SMOKE), "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("trajectory.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_csv(tmp_path / "a" / "trajectory.csv")
    assert list(rows[0]) == ["run_id", "update_idx", "time_ms", "ber"]
    assert len(rows) == 200 // 10 + 1
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"]["version"] == "eqsim-run/1"

    rep = tmp_path / "rep.json"
    assert main(["report", str(tmp_path / "a" / "trajectory.csv"), "--out", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["converged_runs"] == summary["converged_runs"]
    assert r["n_runs"] == 1
    assert not list(tmp_path.rglob("*.tmp"))


def test_summarize_trajectory_oracle():
    text = ("run_id,update_idx,time_ms,ber\n"
            "0,0,0.0,0.5\n0,10,0.1,0.01\n0,20,0.2,0.01\n"
            "1,0,0.0,0.5\n1,10,0.1,0.01\n1,20,0.2,0.3\n")
    s = summarize_trajectory(text, 0.027)
    assert s["per_run_t_conv_ms"] == [0.1, None]
    assert s["converged_fraction"] == 0.5
    with pytest.raises(ConfigError):
        summarize_trajectory("a,b\n1,2\n", 0.027)


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "x.txt"
    atomic_write(target, "old\n")

    class Boom(Exception):
        pass

    import os
    real = os.replace

    def fail(*a):
        raise Boom

    monkeypatch.setattr(os, "replace", fail)
    with pytest.raises(Boom):
        atomic_write(target, "new\n")
    monkeypatch.setattr(os, "replace", real)
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
