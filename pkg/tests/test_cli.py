import json
import os

import numpy as np
import pytest

from higgsq.cli import main, save_tensor
from higgsq.grids import Grid, lloyd_max_1d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    return code, json.loads(out)


@pytest.fixture
def tensor(tmp_path):
    w = np.random.default_rng(0).standard_normal((32, 256))
    path = tmp_path / "w.bin"
    save_tensor(str(path), w, "float64")
    return path, w


def test_grid_build(capsys, tmp_path):
    code, out, _ = run(capsys, "grid", "build", "--builder", "lloydmax", "-n", 2, "--out", tmp_path / "g.hgrd")
    assert code == 0 and "0.363380" in out and "seed = 0" in out
    assert Grid.from_bytes((tmp_path / "g.hgrd").read_bytes()).n == 2
    code, data = run_json(capsys, "grid", "build", "--builder", "lloydmax", "-n", 1)
    assert code == 0 and data["mse_per_dim"] == 1.0 and data["seeds"]["seed"] == 0


def test_grid_build_invalid_n(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["grid", "build", "--builder", "lloydmax", "-n", "0"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_grid_build_bad_output_dir(capsys, tmp_path):
    code, _, err = run(capsys, "grid", "build", "--builder", "lloydmax", "-n", 2,
                       "--out", tmp_path / "missing" / "g.hgrd")
    assert code == 3


def test_seed_env(capsys, monkeypatch):
    monkeypatch.setenv("HIGGSQ_SEED", "17")
    code, data = run_json(capsys, "grid", "build", "--builder", "lloydmax", "-n", 2)
    assert data["seeds"]["seed"] == 17


def test_lossless_round_trip(capsys, tmp_path, tensor):
    path, w = tensor
    q, back = tmp_path / "w.hqtz", tmp_path / "back.bin"
    assert run(capsys, "quantize", "--input", path, "--lossless", "-g", 64, "--out", q)[0] == 0
    assert run(capsys, "dequantize", "--input", q, "--out", back)[0] == 0
    meta = json.loads((tmp_path / "back.bin.json").read_text())
    got = np.fromfile(back, "<f8").reshape(meta["shape"])
    assert np.abs(got - w).max() < 1e-10


def test_text_tensor_input(capsys, tmp_path):
    w = np.random.default_rng(1).standard_normal((4, 64))
    np.savetxt(tmp_path / "w.txt", w)
    g = tmp_path / "g.hgrd"
    (g).write_bytes(lloyd_max_1d(4).to_bytes())
    code, data = run_json(capsys, "quantize", "--input", tmp_path / "w.txt", "--grid", g, "-g", 64,
                          "--out", tmp_path / "q.hqtz")
    assert code == 0 and 0.05 < data["t2"] < 0.2


def test_effective_bits_printed(capsys, tmp_path):
    pts = np.random.default_rng(0).standard_normal((256, 2))
    g = tmp_path / "g.hgrd"
    g.write_bytes(Grid(pts).to_bytes())
    w = np.random.default_rng(2).standard_normal(4096)
    save_tensor(str(tmp_path / "w.bin"), w, "float32")
    code, out, _ = run(capsys, "quantize", "--input", tmp_path / "w.bin", "--grid", g, "-g", 1024,
                       "--out", tmp_path / "q.hqtz")
    assert code == 0 and "effective_bits = 4.0156" in out


def test_corrupt_inputs(capsys, tmp_path, tensor):
    path, _ = tensor
    g = tmp_path / "g.hgrd"
    g.write_bytes(lloyd_max_1d(4).to_bytes())
    q = tmp_path / "q.hqtz"
    assert run(capsys, "quantize", "--input", path, "--grid", g, "-g", 64, "--out", q)[0] == 0
    blob = q.read_bytes()
    cases = {"trunc.hqtz": blob[: len(blob) // 2], "crc.hqtz": blob[:-5] + bytes([blob[-5] ^ 1]) + blob[-4:],
             "magic.hqtz": b"ABCD" + blob[4:]}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        out = tmp_path / f"{name}.bin"
        code, _, err = run(capsys, "dequantize", "--input", tmp_path / name, "--grid", g, "--out", out)
        assert code == 4, name
        assert not out.exists()
    bad_grid = tmp_path / "bad.hgrd"
    bad_grid.write_bytes(g.read_bytes()[:-3])
    assert run(capsys, "quantize", "--input", path, "--grid", bad_grid, "--out", tmp_path / "x.hqtz")[0] == 4
    assert not (tmp_path / "x.hqtz").exists()
    assert run(capsys, "dequantize", "--input", tmp_path / "nope.hqtz", "--grid", g,
               "--out", tmp_path / "y.bin")[0] == 3


def test_calibrate_quadratic(capsys, tmp_path):
    out = tmp_path / "a.json"
    code, data = run_json(capsys, "calibrate", "--model", "quadratic", "--reps", 32, "--out", out)
    assert code == 0
    np.testing.assert_allclose(data["alphas"], data["analytic_alphas"], rtol=0.02)
    assert json.loads(out.read_text())["alphas"] == data["alphas"]


def _menu_files(tmp_path, capsys, grids):
    paths = []
    for n in grids:
        p = tmp_path / f"lm{n}.hgrd"
        p.write_bytes(lloyd_max_1d(n).to_bytes())
        paths.append(p)
    spec = tmp_path / "quad.json"
    spec.write_text(json.dumps({"kind": "quadratic", "z": [1, 2, 3], "dims": [256, 512, 1024], "seed": 0}))
    code, _, _ = run(capsys, "menu", "--model", spec, "--grids", *paths, "-g", 64,
                     "--out-csv", tmp_path / "m.csv", "--out-json", tmp_path / "m.json")
    assert code == 0
    code, _, _ = run(capsys, "calibrate", "--model", spec, "--reps", 4, "--out", tmp_path / "a.json")
    assert code == 0
    return ["--menu-csv", tmp_path / "m.csv", "--menu-json", tmp_path / "m.json", "--alphas", tmp_path / "a.json"]


def test_allocate_single_option(capsys, tmp_path):
    files = _menu_files(tmp_path, capsys, [16])
    code, data = run_json(capsys, "allocate", *files, "--budget", 4.5, "--out", tmp_path / "alloc.json")
    assert code == 0 and data["labels"] == ["lm16"] * 3
    code, data = run_json(capsys, "allocate", *files, "--budget", 3.0)
    assert code == 5 and data["min_avg_bits"] == pytest.approx(4.25)


def test_allocate_curve(capsys, tmp_path):
    files = _menu_files(tmp_path, capsys, [2, 4, 16, 64])
    budgets = [0.5, 1.5, 2.0, 3.0, 4.0, 5.0, 6.5]
    code, data = run_json(capsys, "allocate", *files, "--budget", *budgets, "--curve-csv", tmp_path / "c.csv")
    assert code == 0
    pts = data["curve"]
    assert pts[0]["allocation"] is None and "minimum" in pts[0]["error"]
    deltas = [p["allocation"]["predicted_delta"] for p in pts if p["allocation"]]
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))
    assert (tmp_path / "c.csv").read_text().startswith("b_max,avg_bits,predicted_delta,choice")


def test_linearity_cli_deterministic(capsys, tmp_path):
    spec = tmp_path / "quad.json"
    spec.write_text(json.dumps({"kind": "quadratic", "z": [1, 2], "dims": [256, 512], "seed": 0}))
    outs = []
    for k in range(2):
        out = tmp_path / f"lin{k}.csv"
        code, data = run_json(capsys, "linearity", "--model", spec, "--t-levels", 0.05, 0.1,
                              "--reps", 4, "--quant-seeds", 2, "--out", out, "--seed", 5)
        assert code == 0 and data["seeds"]["seed"] == 5
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    code, data = run_json(capsys, "linearity", "--model", spec, "--t-levels", "--out", tmp_path / "e.csv")
    assert code == 0 and data["rows"] == 0
    assert not [f for f in os.listdir(tmp_path) if ".part" in f or f.startswith(".tmp-")]
