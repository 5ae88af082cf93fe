import csv
import json

import numpy as np
import pytest
from scipy.integrate import trapezoid

from wassgp import cli
from wassgp.diagnostics import CheckResult, DiagnosticReport
from wassgp.errors import IllConditionedError
from wassgp.gp_core import load_model, predict_many
from wassgp.dist_core import quantile_from_samples


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(0)
    s_rows, d_rows, t_rows = ["obs_id,value"], ["obs_id,x,f"], ["obs_id,y"]
    x = np.linspace(0, 1, 50)
    for k in range(12):
        mu, sd = rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.15)
        for v in np.clip(rng.normal(mu, sd, 60), 0, 1):
            s_rows.append(f"o{k},{float(v)!r}")
        f = np.exp(-0.5 * ((x - mu) / sd) ** 2)
        f /= trapezoid(f, x)
        for xi, fi in zip(x, f):
            d_rows.append(f"o{k},{float(xi)!r},{float(fi)!r}")
        t_rows.append(f"o{k},{float(np.sin(6 * mu) + sd)!r}")
    return {"samples": write(tmp_path / "s.csv", "\n".join(s_rows) + "\n"),
            "densities": write(tmp_path / "d.csv", "\n".join(d_rows) + "\n"),
            "targets": write(tmp_path / "t.csv", "\n".join(t_rows) + "\n")}


# ---------------------------------------------------------------------------
# distance
# ---------------------------------------------------------------------------

def test_distance_examples(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "obs_id,value\na,0\na,1\n")
    b = write(tmp_path / "b.csv", "obs_id,value\nb,0\nb,2\n")
    assert run(capsys, "distance", a, b)[:2] == (0, "0.707106781187\n")
    assert run(capsys, "distance", a, a)[:2] == (0, "0\n")
    px = write(tmp_path / "px.csv", "obs_id,value\np,0.25\nq,3\n")
    assert run(capsys, "distance", px, px, "--obs-a", "p", "--obs-b", "q")[:2] == (0, "2.75\n")


def test_distance_density_file(tmp_path, capsys):
    u = write(tmp_path / "u.csv", "obs_id,x,f\nu,0,1\nu,0.5,1\nu,1,1\n")
    v = write(tmp_path / "v.csv", "obs_id,x,f\nv,2,1\nv,2.5,1\nv,3,1\n")
    rc, out, _ = run(capsys, "distance", u, v)
    assert rc == 0 and float(out) == pytest.approx(2.0, abs=1e-12)


def test_distance_needs_obs_id(tmp_path, dataset, capsys):
    rc, out, err = run(capsys, "distance", dataset["samples"], dataset["samples"])
    assert rc == 2 and "pass an obs_id" in err


# ---------------------------------------------------------------------------
# fit / predict
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kernel, inputs", [("powexp", "samples"), ("fbm", "densities"),
                                            ("legendre", "densities"), ("pca", "samples")])
def test_fit_predict_roundtrip(tmp_path, dataset, capsys, kernel, inputs):
    model = tmp_path / "m.json"
    rc, out, err = run(capsys, "fit", "--inputs", dataset[inputs], "--targets",
                       dataset["targets"], "--model", model, "--kernel", kernel,
                       "--order", 3, "--nugget", "off", "--starts", 3)
    assert rc == 0, err
    summary = json.loads(out)
    assert summary["n"] == 12 and float(summary["L"]) == pytest.approx(load_model(
        model.read_text()).nll, rel=1e-10)
    preds = tmp_path / "p.csv"
    rc, _, err = run(capsys, "predict", "--model", model, "--inputs", dataset[inputs],
                     "--out", preds)
    assert rc == 0, err
    rows = list(csv.DictReader(preds.open()))
    assert [r["obs_id"] for r in rows] == [f"o{k}" for k in range(12)]
    truth = {r["obs_id"]: float(r["y"]) for r in csv.DictReader(dataset["targets"].open())}
    for r in rows:
        assert float(r["mean"]) == pytest.approx(truth[r["obs_id"]], rel=1e-6, abs=1e-6)
        assert float(r["sd"]) >= 0


def test_predict_matches_library(tmp_path, dataset, capsys):
    model = tmp_path / "m.json"
    run(capsys, "fit", "--inputs", dataset["samples"], "--targets", dataset["targets"],
        "--model", model, "--starts", 2, "--summary", tmp_path / "s.json")
    q = write(tmp_path / "q.csv", "obs_id,value\nz,0.1\nz,0.9\nz,0.5\n")
    rc, out, _ = run(capsys, "predict", "--model", model, "--inputs", q)
    assert rc == 0
    m = load_model(model.read_text())
    mean, var = predict_many(m, [quantile_from_samples([0.1, 0.9, 0.5], 512)])
    row = list(csv.DictReader(out.splitlines()))[0]
    assert row["mean"] == format(mean[0], ".12g")
    assert row["sd"] == format(np.sqrt(var[0]), ".12g")


def test_fit_is_byte_identical(tmp_path, dataset, capsys):
    outs = []
    for k, threads in enumerate((1, 1, 3)):
        model = tmp_path / f"m{k}.json"
        rc, out, _ = run(capsys, "fit", "--inputs", dataset["samples"], "--targets",
                         dataset["targets"], "--model", model, "--starts", 4,
                         "--seed", 7, "--threads", threads)
        assert rc == 0
        outs.append((model.read_bytes(), out))
    assert outs[0] == outs[1] == outs[2]


def test_fit_two_points(tmp_path, capsys):
    s = write(tmp_path / "s.csv", "obs_id,value\na,0\na,1\nb,2\nb,4\n")
    t = write(tmp_path / "t.csv", "obs_id,y\na,1\nb,2\n")
    rc, _, err = run(capsys, "fit", "--inputs", s, "--targets", t, "--model",
                     tmp_path / "m.json", "--starts", 2)
    assert rc == 0, err


# ---------------------------------------------------------------------------
# exit codes and config
# ---------------------------------------------------------------------------

def test_malformed_input_exit_2(tmp_path, dataset, capsys):
    bad = write(tmp_path / "bad.csv", "obs_id,value\na,1\na,oops\n")
    rc, _, err = run(capsys, "fit", "--inputs", bad, "--targets", dataset["targets"],
                     "--model", tmp_path / "m.json")
    assert rc == 2
    assert err.count("\n") == 1 and f"{bad}: line 3:" in err
    rc, _, err = run(capsys, "predict", "--model", write(tmp_path / "m.json", "{"),
                     "--inputs", dataset["samples"])
    assert rc == 2 and "malformed model" in err


def test_numeric_failure_exit_3(tmp_path, dataset, capsys, monkeypatch):
    def boom(*a, **k):
        raise IllConditionedError("all starts failed", smallest_pivot=-1.0, jitter=1e-7)
    monkeypatch.setattr(cli, "fit_ml", boom)
    rc, _, err = run(capsys, "fit", "--inputs", dataset["samples"], "--targets",
                     dataset["targets"], "--model", tmp_path / "m.json")
    assert rc == 3 and "numeric failure" in err


def test_diagnose_exit_codes(tmp_path, capsys, monkeypatch):
    out = tmp_path / "r.json"
    rc, _, err = run(capsys, "diagnose", "negdef", "--out", out)
    assert rc == 0 and "203/203 checks passed" in err
    assert json.loads(out.read_text())["passed"]
    bad = DiagnosticReport([CheckResult("negdef", {}, 1.0, 0.0, False)])
    monkeypatch.setattr(cli.diagnostics, "run_negdef_suite", lambda seed: bad)
    rc, out_text, _ = run(capsys, "diagnose", "negdef")
    assert rc == 4 and json.loads(out_text)["checks"][0]["pass"] is False


def test_config_file(tmp_path, dataset, capsys):
    cfg = write(tmp_path / "c.cfg", "# defaults\nkernel = fbm\nstarts = 2  # few\nseed=3\n")
    model = tmp_path / "m.json"
    rc, out, err = run(capsys, "fit", "--config", cfg, "--inputs", dataset["samples"],
                       "--targets", dataset["targets"], "--model", model)
    assert rc == 0, err
    assert json.loads(out)["kernel"] == "FBM"
    args = cli.parse_args(["fit", "--config", str(cfg), "--inputs", "i", "--targets", "t",
                           "--model", "m", "--kernel", "powexp"])
    assert (args.kernel, args.starts, args.seed) == ("powexp", 2, 3)
    for text, what in (("colour = red\n", "unknown key"), ("starts = 0\n", "starts"),
                       ("kernel = rbf\n", "invalid choice"), ("junk\n", "key = value")):
        rc, _, err = run(capsys, "fit", "--config", write(tmp_path / "x.cfg", text),
                         "--inputs", dataset["samples"], "--targets", dataset["targets"],
                         "--model", model)
        assert rc == 2 and what in err


def test_benchmark_small(tmp_path, capsys):
    rc, out, err = run(capsys, "benchmark", "table1", "--n-train", 15, "--n-test", 10,
                       "--orders", "3", "--starts", 2, "--out-dir", tmp_path)
    assert rc == 0, err
    assert "distribution" in out
    rep = json.loads((tmp_path / "table1.json").read_text())
    assert rep["rows"][0]["model"] == "distribution"
    assert (tmp_path / "table1.csv").read_text().startswith("model,")
    assert (tmp_path / "table1_pairs.csv").exists()
