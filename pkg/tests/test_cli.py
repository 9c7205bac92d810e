import json
import subprocess
import sys

import pytest
import yaml

from fracouple import cli
from fracouple import experiments as ex

MINIMAL = dict(model="additive_baseline", H=0.7, theta=0.65, alpha=0.25, K=2.0, c3=8.0, beta=2.5, varsigma=1.25,
               dt=0.0625, T_hist=16, n_replicas=4, t_max=40, seed=1)
FAST = dict(MINIMAL, rho_hat=0.6, C_K=1.0, delta1=0.0)


def write_cfg(tmp_path, d, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


def test_minimal_config_defaults(tmp_path):
    cfg, resolved = cli.parse_config(write_cfg(tmp_path, MINIMAL))
    assert cfg.coupling.delta1 == 0.9
    assert cfg.workers == 1 and cfg.x1 == (1.0,)
    assert resolved["ell_max"] == cfg.coupling.ell_max


def test_default_config_parses():
    cfg, _ = cli.parse_config(cli.default_config_path())
    assert cfg.model == "additive_baseline" and cfg.coupling.alpha == 0.25


@pytest.mark.parametrize("change, msg", [
    (dict(H=None), "missing required key: H"),
    (dict(alpha=0.6), "alpha must lie in \\(0, 1/2\\)"),
    (dict(beta=1.5), "beta must exceed 1/\\(1-2\\*alpha\\)"),
    (dict(bogus=1), "unknown config keys: bogus"),
    (dict(n_replicas=0), "n_replicas must be >= 1"),
    (dict(model="nope"), "unknown model"),
])
def test_config_errors(tmp_path, change, msg):
    d = dict(MINIMAL)
    for k, v in change.items():
        if v is None:
            d.pop(k)
        else:
            d[k] = v
    with pytest.raises(cli.ConfigError, match=msg):
        cli.parse_config(write_cfg(tmp_path, d))


def test_nested_coupling_section(tmp_path):
    d = dict(MINIMAL, coupling={"delta1": 0.3})
    cfg, _ = cli.parse_config(write_cfg(tmp_path, d))
    assert cfg.coupling.delta1 == 0.3
    with pytest.raises(cli.ConfigError, match="unknown coupling keys"):
        cli.parse_config(write_cfg(tmp_path, dict(MINIMAL, coupling={"zzz": 1})))


def test_overrides_and_workers_env(tmp_path, monkeypatch):
    p = write_cfg(tmp_path, MINIMAL)
    cfg, _ = cli.parse_config(p, cli._coerce_overrides(["t_max=12.5", "past=zero"]))
    assert cfg.t_max == 12.5 and cfg.past == "zero"
    with pytest.raises(cli.ConfigError):
        cli._coerce_overrides(["novalue"])
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.parse_config(p)[0].workers == 3


def test_constants_file_and_digest(tmp_path):
    cpath = tmp_path / "const.json"
    cpath.write_text(json.dumps({"rho_hat": 0.55, "C_K": 1.0, "kappa2": 5.0}))
    good = dict(MINIMAL, constants={"path": "const.json", "digest": cli.sha256_file(cpath)})
    cfg, _ = cli.parse_config(write_cfg(tmp_path, good))
    assert cfg.coupling.rho_hat == 0.55 and cfg.coupling.kappa2 == 5.0
    bad = dict(MINIMAL, constants={"path": "const.json", "digest": "0" * 64})
    with pytest.raises(cli.ConfigError, match="digest mismatch"):
        cli.parse_config(write_cfg(tmp_path, bad))
    with pytest.raises(cli.ConfigError, match="not found"):
        cli.parse_config(write_cfg(tmp_path, dict(MINIMAL, constants="missing.json")))


def test_manifest_round_trip_and_tamper(tmp_path):
    p = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "noise.csv"
    assert cli.main(["fbm", "--config", str(p), "--out", str(out), "--horizon", "2"]) == 0
    man = tmp_path / "noise.csv.manifest.json"
    m = cli.RunManifest.load(man)
    assert m.config_digest == cli.sha256_file(p) and m.seed == 1 and m.outputs == [str(out)]
    w = cli.fk.read_noise_csv(out)
    assert w.increments.shape == (1, 32)
    p.write_text(p.read_text() + "\n# edited\n")
    with pytest.raises(ValueError, match="config digest mismatch"):
        cli.RunManifest.load(man)


def test_integrate_command(tmp_path):
    p = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "x.csv"
    assert cli.main(["integrate", "--config", str(p), "--out", str(out), "--horizon", "1"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,x1" and len(lines) == 1 + 17
    assert float(lines[1].split(",")[1]) == 1.0


def test_couple_byte_identical(tmp_path, capsys):
    p = write_cfg(tmp_path, FAST)
    outs = []
    for k in range(2):
        o = tmp_path / f"log{k}.csv"
        assert cli.main(["couple", "--config", str(p), "--out", str(o), "--set", "t_max=200"]) == 0
        outs.append(o.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].decode().splitlines()[0] == ",".join(cli.ce.TRIAL_LOG_HEADER)
    assert "tau_inf=" in capsys.readouterr().out


def test_tail_command(tmp_path, capsys):
    p = write_cfg(tmp_path, FAST)
    o = tmp_path / "surv.csv"
    assert cli.main(["tail", "--config", str(p), "--out", str(o), "--set", "n_replicas=6"]) == 0
    assert o.read_text().startswith("t,survival,ci_lo,ci_hi,n_at_risk")
    assert "consistent=" in capsys.readouterr().out


def test_tail_rejects_zero_replicas(tmp_path, capsys):
    p = write_cfg(tmp_path, FAST)
    rc = cli.main(["tail", "--config", str(p), "--out", str(tmp_path / "s.csv"), "--set", "n_replicas=0"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("fracouple:error:config: n_replicas must be >= 1")


def test_runtime_error_prefix(tmp_path, capsys):
    p = write_cfg(tmp_path, dict(MINIMAL, c3=1e-3, rho_hat=0.6, C_K=1.0))
    rc = cli.main(["couple", "--config", str(p), "--out", str(tmp_path / "c.csv")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("fracouple:error:")


def test_validate_exit_codes(tmp_path, monkeypatch, capsys):
    p = write_cfg(tmp_path, MINIMAL)
    monkeypatch.setattr(ex, "validate_suite", lambda *a, **k: [ex.CheckItem("x", "fail", 1.0, 0.0)])
    assert cli.main(["validate", "--config", str(p), "--out", str(tmp_path / "v.csv")]) == 2
    monkeypatch.setattr(ex, "validate_suite", lambda *a, **k: [ex.CheckItem("x", "pass", 0.0, 1.0)])
    assert cli.main(["validate", "--config", str(p), "--out", str(tmp_path / "v.csv")]) == 0
    assert (tmp_path / "v.csv").read_text() == "item,status,value,threshold\nx,pass,0.0,1.0\n"


def test_validate_default_subprocess(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fracouple.cli", "validate", "--out", str(tmp_path / "v.csv")],
                       capture_output=True, text=True, timeout=600)
    assert r.returncode == 0, r.stdout + r.stderr
    assert ",fail," not in r.stdout


def test_calibrate_writes_constants(tmp_path, capsys):
    p = write_cfg(tmp_path, MINIMAL)
    o = tmp_path / "const.json"
    assert cli.main(["calibrate", "--config", str(p), "--out", str(o)]) == 0
    c = json.loads(o.read_text())
    assert 0 < c["rho_hat"] < 1 and c["C_K"] >= 1.0 and c["c2"] >= 1.0
    assert c["config_digest"] == cli.sha256_file(p)
    assert cli.sha256_file(o) in capsys.readouterr().out
    d = dict(MINIMAL, c3=max(8.0, c["c3_floor"]), constants={"path": "const.json", "digest": cli.sha256_file(o)})
    cfg, _ = cli.parse_config(write_cfg(tmp_path, d, "cfg2.yaml"))
    assert cfg.coupling.rho_hat == c["rho_hat"]
