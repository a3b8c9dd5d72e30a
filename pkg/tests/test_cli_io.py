import hashlib
import io
import json

import numpy as np
import pytest

from dh_lyapunov.cli_io import FixedPointCache, atomic_write, run
from dh_lyapunov.dist_models import REF1_SPEC, spec_to_dict
from dh_lyapunov.transfer_grid import TailGrid, grid_to_csv

FAST = ["--grid", "256", "--steps", "20000", "--eps", "0.1,0.05", "--tol", "1e-8"]


def call(argv):
    buf = io.StringIO()
    code = run(argv, stdout=buf)
    return code, buf.getvalue()


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture()
def spec_file(tmp_path):
    p = tmp_path / "ref1.json"
    p.write_text(json.dumps(spec_to_dict(REF1_SPEC)))
    return p


def test_validate_ref1_file(tmp_path, spec_file):
    code, text = call(["validate", "--model", str(spec_file), "--out", str(tmp_path / "o")])
    env = json.loads(text)
    assert code == 0 and env["payload"]["dh_ok"] is True
    assert env["schema_version"] == 1 and env["model_hash"]
    assert (tmp_path / "o" / f"validate_{env['model_hash']}.json").exists()


def test_invalid_regime_exit_2(tmp_path):
    bad = json.dumps({"mixture": [{"weight": 1.0, "biweight": [1.5, 3.0]}]})
    code, _ = call(["alpha", "--model", bad, "--out", str(tmp_path)])
    assert code == 2
    code, _ = call(["validate", "--model", bad, "--out", str(tmp_path)])
    assert code == 2


def test_malformed_inputs_exit_2(tmp_path):
    assert call(["alpha", "--model", "{not json", "--out", str(tmp_path)])[0] == 2
    assert call(["alpha", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path)])[0] == 2
    assert call(["lyapunov", "--eps", "0.1", "--out", str(tmp_path)])[0] == 2
    assert call(["lyapunov", "--seed", "1", "--eps", "1.5", "--out", str(tmp_path)])[0] == 2


def test_config_file_and_flag_override(tmp_path, spec_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": spec_file.name, "seed": 3, "eps": [0.1], "steps": 50000}))
    code, text = call(["lyapunov", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")])
    env = json.loads(text)
    assert code == 0
    assert env["config"]["seed"] == 4 and env["config"]["steps"] == 50000
    methods = {e["method"] for e in env["payload"]["estimates"]}
    assert methods == {"sigma_chain", "s_chain", "matrix_product"}
    csv_text = (tmp_path / "o" / f"lyapunov_{env['model_hash']}.csv").read_text()
    assert csv_text.splitlines()[0].startswith("epsilon,method")


def test_schema_lists_columns():
    code, text = call(["schema"])
    doc = json.loads(text)
    assert code == 0 and "L_transfer" in doc["csv_columns"]["sweep"]
    assert set(doc["exit_codes"]) == {"0", "2", "3", "4"}


def test_fixed_point_writes_grid(tmp_path):
    out = tmp_path / "o"
    code, text = call(["fixed-point", "--eps", "0.1", "--grid", "256", "--out", str(out)])
    env = json.loads(text)
    assert code == 0
    g = env["payload"]["grids"][0]
    assert g["role_tag"] == "nu_eps" and g["epsilon"] == 0.1
    assert (out / g["file"]).read_text().startswith("node,value\n")
    assert 0.05 < g["L"] < 0.15


def test_numeric_failure_exit_3(tmp_path):
    code, _ = call(["fixed-point", "--eps", "0.1", "--grid", "256", "--tol", "1e-30", "--out", str(tmp_path)])
    assert code == 3


def test_cache_round_trip(tmp_path):
    cache = FixedPointCache(tmp_path)
    g = TailGrid(np.geomspace(1, 10, 5), [1.0, 0.7, 0.3, 0.1, 0.0], 1.0, epsilon=0.1)
    calls = []
    a = cache.fetch("ab" + "0" * 62, lambda: calls.append(1) or g)
    b = cache.fetch("ab" + "0" * 62, lambda: calls.append(1) or g)
    assert calls == [1] and cache.hits == 1 and cache.misses == 1
    assert grid_to_csv(a) == grid_to_csv(b)
    assert (tmp_path / "ab").is_dir()


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write(tmp_path / "x" / "f.txt", "hello")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]


@pytest.mark.slow
def test_dh_verify_deterministic_and_cache(tmp_path, monkeypatch):
    base = ["dh-verify", "--seed", "11", *FAST]
    cache = tmp_path / "cache"
    runs = []
    for name, extra in (("cold", ["--cache", str(cache)]), ("warm", ["--cache", str(cache)]), ("nocache", [])):
        out = tmp_path / name
        code, _ = call(base + extra + ["--out", str(out)])
        assert code in (0, 4)
        runs.append(out)
    files = sorted(p.name for p in runs[0].iterdir() if not p.name.endswith(".run.json"))
    assert any(f.endswith(".csv") for f in files) and any(f.endswith(".json") for f in files)
    for f in files:
        assert digest(runs[0] / f) == digest(runs[1] / f) == digest(runs[2] / f)
    stem = files[0].rsplit(".", 1)[0]
    info = [json.loads((r / f"{stem}.run.json").read_text())["cache"] for r in runs[:2]]
    assert info[0]["misses"] > 0 and info[1]["hits"] == info[0]["misses"] and info[1]["misses"] == 0
    # the environment variable names the cache root when no flag is given
    monkeypatch.setenv("DH_LAB_CACHE", str(cache))
    code, _ = call(base + ["--out", str(tmp_path / "env")])
    assert json.loads((tmp_path / "env" / f"{stem}.run.json").read_text())["cache"]["misses"] == 0
    assert digest(tmp_path / "env" / f"{stem}.csv") == digest(runs[0] / f"{stem}.csv")
    # the flag wins over the environment
    code, _ = call(base + ["--cache", str(tmp_path / "other"), "--out", str(tmp_path / "flag")])
    assert (tmp_path / "other").is_dir()


def test_warnings_reach_envelope(tmp_path):
    code, text = call(["alpha", "--im-max", "20", "--out", str(tmp_path)])
    env = json.loads(text)
    assert code == 0 and isinstance(env["warnings"], list)
    assert 0.45 < env["payload"]["alpha"] < 0.46
