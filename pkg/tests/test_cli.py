import io
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from sandlab import cli, greens
from sandlab.lattice import Field


def run(argv):
    buf = io.StringIO()
    code = cli.run(argv, stdout=buf)
    return code, buf.getvalue()


def test_gap_exact_equals_search():
    code_a, a = run(["gap", "--m", "2", "--exact", "--no-timing"])
    code_b, b = run(["gap", "--m", "2", "--search", "--no-timing"])
    assert code_a == code_b == 0
    ra, rb = json.loads(a)["result"], json.loads(b)["result"]
    assert abs(ra["gap"] - rb["gap"]) <= 1e-12
    assert ra["scaled_gap"] == pytest.approx(rb["scaled_gap"], abs=1e-12)


def test_document_envelope():
    code, text = run(["group", "--m", "3", "--snf"])
    doc = json.loads(text)
    assert code == 0
    assert set(doc) == {"version", "command", "config", "seed", "wall_time", "result"}
    assert doc["wall_time"] >= 0 and doc["config"]["m"] == 3
    factors = [int(d) for d in doc["result"]["invariant_factors"]]
    assert factors == [6, 6, 18, 18] and int(doc["result"]["order"]) == 6 * 6 * 18 * 18


def test_same_seed_same_bytes():
    argv = ["iid", "--law", "2:0.8,5:0.2", "--radius", "12", "--trials", "4", "--seed", "7", "--no-timing"]
    assert run(argv)[1] == run(argv)[1]
    chain = ["chain", "--m", "3", "--steps", "2000", "--stats", "-", "--seed", "11", "--no-timing"]
    assert run(chain)[1] == run(chain)[1]


def test_worker_count_does_not_change_output(monkeypatch):
    argv = ["iid", "--law", "2:0.8,5:0.2", "--radius", "12", "--trials", "6", "--seed", "7", "--no-timing"]
    one = json.loads(run(argv + ["--workers", "1"])[1])["result"]
    monkeypatch.setenv("SANDLAB_THREADS", "3")
    three = json.loads(run(argv + ["--workers", "1"])[1])["result"]
    assert one == three


def test_threads_env_must_be_integer(monkeypatch):
    monkeypatch.setenv("SANDLAB_THREADS", "many")
    assert run(["iid", "--law", "2:1", "--radius", "4", "--trials", "1"])[0] == 1


@pytest.mark.parametrize("argv", [
    [], ["bogus"], ["gap"], ["iid", "--law", "2:0.5"], ["chain", "--m", "2", "--steps", "1.5"],
    ["gap", "--m", "2", "--exact", "--search"], ["cutoff", "--m", "8", "--N-grid", "a,b"],
])
def test_usage_errors_exit_one(argv):
    assert run(argv)[0] == 1


def test_bad_pile_file(tmp_path):
    path = tmp_path / "pile.json"
    path.write_text("{not json")
    assert run(["stabilize", "--m", "3", "--in", str(path)])[0] == 1


def test_numerical_guard_exits_two():
    assert run(["greens", "--domain", "z2", "--M", "8", "--tol", "1e-30"])[0] == 2


def test_greens_binary_roundtrip(tmp_path):
    out = tmp_path / "g.bin"
    code, text = run(["greens", "--m", "8", "--out", str(out)])
    assert code == 0
    loaded = Field.load(out)
    assert np.array_equal(loaded.values, greens.greens_torus(8).values.values)
    meta = json.loads((tmp_path / "g.bin.json").read_text())
    assert meta["m"] == 8 and json.loads(text)["result"]["sidecar"] == str(out) + ".json"


def test_floats_have_seventeen_digits():
    assert cli.dumps(0.1) == "0.10000000000000001"
    assert cli.dumps(1.0) == "1.0"
    assert cli.dumps(float("nan")) == "null"
    assert cli.dumps({"a": [1, 2.5], "b": {}}) == '{\n "a": [1, 2.5],\n "b": {}\n}'
    _, text = run(["gap", "--m", "3", "--exact"])
    for number in re.findall(r'"gap": ([0-9.e-]+)', text):
        assert float(number) == json.loads(text)["result"]["gap"]


def test_csv_export():
    code, text = run(["gap", "--m", "2", "--exact", "--format", "csv", "--no-timing"])
    rows = dict(line.split(",", 1) for line in text.strip().splitlines()[1:])
    assert code == 0 and float(rows["result.gap"]) == pytest.approx(1 - 2 ** -0.5)


def test_stabilize_constant_pile():
    code, text = run(["stabilize", "--m", "4", "--constant", "4"])
    res = json.loads(text)["result"]
    assert code == 0 and res["grains_before"] == res["grains_after"] + res["grains_to_sink"]


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "sandlab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sandlab" in proc.stdout
