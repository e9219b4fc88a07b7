import hashlib
import json

import numpy as np
import pytest

from dpplkit import io as fio
from dpplkit.cli import load_dataset, main
from dpplkit.constraints import hierarchy_constraint
from dpplkit.probdist import make_rng
from oracles import SUM_MATRIX

SMALL = ["--n", "20", "--grid", "10x8"]


def run_ok(argv, capsys=None):
    code = main(argv)
    assert code == 0, argv
    if capsys is not None:
        return json.loads(capsys.readouterr().out)


def digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_data_split_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    res = run_ok(["gen-data", "--kind", "heat", "--n", "200", "--seed", "1", "--out", str(a)], capsys)
    assert res == {"train": 160, "test": 40}
    first = digest(a)
    run_ok(["gen-data", "--kind", "heat", "--n", "200", "--seed", "1", "--out", str(a)], capsys)
    assert digest(a) == first
    # Elsewhere only the echoed output directory differs.
    run_ok(["gen-data", "--kind", "heat", "--n", "200", "--seed", "1", "--out", str(b)], capsys)
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert digest(a / "fields") == digest(b / "fields")
    man = fio.read_json(a / "manifest.json")
    assert len(man["split"]["train"]) == 160 and man["prng"] == "PCG64"
    ds = load_dataset(a)
    assert ds.fields.shape == (200, 64, 64)


def test_gen_data_m_range_and_csv(tmp_path):
    out = tmp_path / "pme"
    run_ok(["gen-data", "--kind", "pme", "--m-range", "3", "4", "--format", "csv"] + SMALL + ["--out", str(out)])
    man = fio.read_json(out / "manifest.json")
    assert man["param_range"] == [3.0, 4.0]
    assert all(3 <= p <= 4 for p in man["params"])
    ds = load_dataset(out)
    assert ds.fields.shape == (20, 10, 8)


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kind": "heat", "bogus": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--grid", "64by64", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--kind", "stefan", "--param-range", "0.5", "1.5", "--out", str(tmp_path)]) == 2
    assert main(["train", "--projector", "nonlinear"] + SMALL + ["--out", str(tmp_path)]) == 2
    assert main(["eval", "--out", str(tmp_path)]) == 2


def test_io_error_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 4


def test_train_oblique_and_echo_reproduces(tmp_path, capsys):
    out = tmp_path / "run"
    res = run_ok(["train", "--loss", "crps", "--projector", "oblique", "--epochs", "20"] + SMALL + ["--out", str(out)], capsys)
    assert max(res["per_sample"]["ce"]) <= 1e-18
    rep = fio.read_json(out / "report.json")
    assert len(rep["losses"]) == 20 and rep["seed"] == 1
    again = tmp_path / "again"
    run_ok(["train", "--config", str(out / "config.json"), "--out", str(again)], capsys)
    assert fio.read_json(again / "report.json")["losses"] == rep["losses"]
    ck = fio.read_json(out / "checkpoint.json")
    assert ck["model"]["degree"] == 3


def test_train_nll_baseline(tmp_path, capsys):
    out = tmp_path / "nll"
    run_ok(["train", "--loss", "nll", "--projector", "none", "--epochs", "5"] + SMALL + ["--out", str(out)], capsys)
    rep = fio.read_json(out / "report.json")
    assert rep["config"]["loss"] == "nll" and rep["config"]["projector"]["mode"] == "none"
    assert rep["test"]["ce_mean"] > 0


def test_train_nonlinear_pme(tmp_path, capsys):
    out = tmp_path / "pme"
    argv = ["train", "--kind", "pme", "--projector", "nonlinear", "--epochs", "3", "--n", "10", "--grid", "20x16"]
    res = run_ok(argv + ["--out", str(out)], capsys)
    rep = fio.read_json(out / "report.json")
    assert 1 <= rep["newton_max_iterations"] <= 50
    assert res["ce_inf"] <= 1e-10


def test_eval_bands_and_crps(tmp_path, capsys):
    out = tmp_path / "run"
    run_ok(["train", "--projector", "oblique", "--epochs", "10"] + SMALL + ["--out", str(out)], capsys)
    ev = tmp_path / "ev"
    res = run_ok(["eval", "--checkpoint", str(out / "checkpoint.json"), "--out", str(ev)], capsys)
    bands = fio.read_csv(ev / "bands.csv", header=True)
    header = (ev / "bands.csv").read_text().splitlines()[0].split(",")
    assert header == ["sample", "t", "x", "mean", "lo3", "hi3", "truth", "crps"]
    mean, lo, hi, crps = bands[:, 3], bands[:, 4], bands[:, 5], bands[:, 7]
    assert np.all(lo <= mean) and np.all(mean <= hi)
    n_test = len(set(bands[:, 0]))
    per_sample = crps.reshape(n_test, -1).sum(axis=1)
    assert abs(per_sample.mean() - res["crps"]) <= 1e-12 * max(1.0, res["crps"])
    rep = fio.read_json(ev / "eval_report.json")
    np.testing.assert_allclose(per_sample, rep["per_sample"]["crps"], rtol=1e-12)


def test_eval_zero_sigma_bands(tmp_path, capsys):
    out = tmp_path / "run"
    run_ok(["train", "--projector", "none", "--epochs", "0"] + SMALL + ["--out", str(out)], capsys)
    ck = fio.read_json(out / "checkpoint.json")
    n, k = ck["model"]["n"], ck["model"]["degree"] + 1
    V = np.zeros((n, k))
    V[:, 0] = -1e3
    ck["model"]["V"] = V.ravel().tolist()
    fio.write_json(out / "checkpoint.json", ck)
    ev = tmp_path / "ev"
    run_ok(["eval", "--checkpoint", str(out / "checkpoint.json"), "--out", str(ev)], capsys)
    bands = fio.read_csv(ev / "bands.csv", header=True)
    assert np.array_equal(bands[:, 4], bands[:, 3]) and np.array_equal(bands[:, 5], bands[:, 3])
    np.testing.assert_allclose(bands[:, 7], np.abs(bands[:, 6] - bands[:, 3]), atol=1e-15)


def test_project_feasible_identity(tmp_path, capsys):
    lin = hierarchy_constraint(SUM_MATRIX)
    bottom = make_rng(0).normal(size=(7, 6))
    X = np.hstack([bottom @ SUM_MATRIX.T, bottom])
    fio.write_csv(tmp_path / "x.csv", X)
    fio.write_json(tmp_path / "c.json", {"type": "linear", "A": lin.A, "b": lin.b})
    out = tmp_path / "p"
    run_ok(["project", "--input", str(tmp_path / "x.csv"), "--constraint", str(tmp_path / "c.json"), "--out", str(out)], capsys)
    Y = fio.read_csv(out / "projected.csv")
    assert np.max(np.abs(Y - X)) <= 1e-12


def test_project_hierarchy_csv(tmp_path, capsys):
    (tmp_path / "S.csv").write_text("\n".join(",".join(str(int(v)) for v in r) for r in SUM_MATRIX) + "\n")
    X = make_rng(1).normal(size=(200, 10))
    fio.write_array_bin(tmp_path / "x.bin", X)
    out = tmp_path / "p"
    res = run_ok(["project", "--input", str(tmp_path / "x.bin"), "--hierarchy", str(tmp_path / "S.csv"), "--out", str(out)], capsys)
    assert res["rows"] == 200 and res["ce_max"] <= 1e-18
    Y = fio.read_array_bin(out / "projected.bin")
    assert np.max(np.abs(Y[:, :4] - Y[:, 4:] @ SUM_MATRIX.T)) <= 1e-12


def test_project_circle(tmp_path, capsys):
    X = make_rng(2).normal(size=(50, 2)) * 2
    fio.write_csv(tmp_path / "x.csv", X)
    fio.write_json(tmp_path / "c.json", {"type": "sphere", "radius": 1.0})
    out = tmp_path / "p"
    run_ok(["project", "--input", str(tmp_path / "x.csv"), "--constraint", str(tmp_path / "c.json"), "--out", str(out)], capsys)
    Y = fio.read_csv(out / "projected.csv")
    np.testing.assert_allclose(np.linalg.norm(Y, axis=1), 1.0, atol=1e-8)


def test_bench_small(tmp_path, capsys):
    out = tmp_path / "b"
    res = run_ok(["bench", "--mc-samples", "5", "--repeats", "1"] + SMALL + ["--out", str(out)], capsys)
    rep = fio.read_json(out / "bench.json")
    assert rep["ratio"] == pytest.approx(res["ratio"]) and rep["seed"] == 1
    assert {"platform", "cpu_count", "numpy"} <= set(rep["machine"])


def test_threads_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DPPL_THREADS", "1")
    run_ok(["gen-data"] + SMALL + ["--out", str(tmp_path / "d")], capsys)
    assert fio.read_json(tmp_path / "d" / "config.json")["command"] == "gen-data"
