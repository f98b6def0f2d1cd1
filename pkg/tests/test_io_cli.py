import json
import subprocess
import sys

import numpy as np
import pytest

from wmest.cli import main
from wmest.io import (
    InputFormatError,
    read_covariance_csv,
    read_sample_csv,
    read_weights_csv,
    write_sample_csv,
)
from wmest.model import ClusteredSample
from wmest.reference import load_table, reproduce_breakdown


def _write(path, text):
    path.write_text(text)
    return path


# --- CSV readers ---------------------------------------------------------------


def test_sample_roundtrip(tmp_path):
    s = ClusteredSample([[[0.1, 1e-300], [2.5, -3.0]], [[1 / 3, 7.0]]], ids=[5, 2])
    p = tmp_path / "s.csv"
    write_sample_csv(p, s)
    back = read_sample_csv(p)
    assert back.ids == (5, 2)
    np.testing.assert_array_equal(back.points, s.points)


def test_sample_without_header_and_with_comments(tmp_path):
    p = _write(tmp_path / "s.csv", "# comment\n1,0,0\n\n2,1,1\n1,2,2\n")
    s = read_sample_csv(p)
    assert s.ids == (1, 2) and list(s.sizes) == [2, 1]


@pytest.mark.parametrize(
    "text,line",
    [
        ("cluster_id,x1\n1,0\n2,abc\n", 3),
        ("cluster_id,x1,x2\n1,0,0\n1,0\n", 3),
        ("cluster_id,x1\n1.5,0\n", 2),
        ("id,x1\n1,0\n", 1),
        ("cluster_id,x1\n1,nan\n", 2),
    ],
)
def test_sample_errors_carry_line_numbers(tmp_path, text, line):
    p = _write(tmp_path / "bad.csv", text)
    with pytest.raises(InputFormatError) as exc:
        read_sample_csv(p)
    assert exc.value.line == line
    assert f":{line}:" in str(exc.value)


def test_weight_layouts(tmp_path):
    a = read_weights_csv(_write(tmp_path / "a.csv", "cluster_id,weight\n1,2.0\n2,0.5\n"))
    assert a.ids == [1, 2] and a.sizes is None
    b = read_weights_csv(_write(tmp_path / "b.csv", "cluster_id,m_i,w_i\n1,4,2.0\n2,8,0.5\n"))
    np.testing.assert_array_equal(b.sizes, [4, 8])
    for bad in ("cluster_id,weight\n1,0\n", "cluster_id,weight\n1,1\n1,2\n", "cluster_id,m_i,w_i\n1,0,1\n"):
        with pytest.raises(InputFormatError):
            read_weights_csv(_write(tmp_path / "bad.csv", bad))


def test_packaged_reference_tables_load():
    assert len(load_table("reference_breakdown")) == 16
    assert {r["estimator"] for r in load_table("reference_weights")} >= {"spatial-median", "huber"}
    rows = reproduce_breakdown()
    assert all(r[-1] in ("PASS", "INFO") for r in rows)


# --- CLI -------------------------------------------------------------------------


@pytest.fixture
def two_points(tmp_path):
    return _write(tmp_path / "two.csv", "cluster_id,x1,x2\n1,1,0\n2,2,0\n")


def test_estimate_mean_unweighted(tmp_path, two_points):
    out = tmp_path / "out"
    assert main(["estimate", str(two_points), "--family", "mean", "--out-dir", str(out)]) == 0
    assert (out / "theta.csv").read_text().splitlines()[1] == "1.5,0.0"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["notes"]["weights"] == "w ≡ 1"
    assert sorted(manifest["outputs"]) == sorted(str(out / f) for f in ("theta.csv", "covariance.csv", "result.json"))
    cov = read_covariance_csv(out / "covariance.csv")
    assert set(cov) == {"B_hat", "C_hat", "V_hat", "Sigma_hat"}
    np.testing.assert_allclose(cov["V_hat"], np.eye(2))


def test_estimate_weighted(tmp_path):
    s = _write(tmp_path / "s.csv", "cluster_id,x1,x2\n1,0,0\n2,2,0\n")
    w = _write(tmp_path / "w.csv", "cluster_id,weight\n1,1\n2,3\n")
    out = tmp_path / "o"
    assert main(["estimate", str(s), str(w), "--family", "mean", "--out-dir", str(out)]) == 0
    assert (out / "theta.csv").read_text().splitlines()[1] == "1.5,0.0"
    missing = _write(tmp_path / "w2.csv", "cluster_id,weight\n1,1\n")
    assert main(["estimate", str(s), str(missing), "--out-dir", str(out)]) == 1


def test_estimate_singular_v_exits_2(tmp_path, capsys):
    s = _write(tmp_path / "s.csv", "cluster_id,x1,x2\n1,1,1\n1,1,1\n2,1,1\n")
    out = tmp_path / "o"
    assert main(["estimate", str(s), "--family", "spatial-median", "--out-dir", str(out)]) == 2
    assert not (out / "covariance.csv").exists()
    assert "spatial-median" in capsys.readouterr().err


def test_estimate_nonconvergence_exits_2(tmp_path):
    rng = np.random.default_rng(0)
    rows = "\n".join(f"{i % 4 + 1},{x:.6f},{y:.6f}" for i, (x, y) in enumerate(rng.normal(size=(30, 2))))
    s = _write(tmp_path / "s.csv", "cluster_id,x1,x2\n" + rows + "\n")
    assert main(["estimate", str(s), "--family", "lp-median", "--tol", "1e-300", "--out-dir", str(tmp_path / "o")]) == 2


def test_estimate_malformed_exits_1(tmp_path, capsys):
    s = _write(tmp_path / "s.csv", "cluster_id,x1,x2\n1,1,1\n1,1\n")
    assert main(["estimate", str(s), "--out-dir", str(tmp_path / "o")]) == 1
    assert ":3:" in capsys.readouterr().err
    assert main(["estimate", str(tmp_path / "missing.csv")]) == 1
    assert main(["estimate", str(s), "--family", "nope"]) == 1


def test_optimize_weights_then_breakdown(tmp_path):
    cfg = _write(
        tmp_path / "cfg.json",
        json.dumps({"configuration": "C1", "distribution": {"family": "gaussian", "rho": 0.2},
                    "estimators": ["spatial-median"], "replications": 100, "seed": 3}),
    )
    out = tmp_path / "o"
    assert main(["optimize-weights", str(cfg), "--out-dir", str(out)]) == 0
    table = read_weights_csv(out / "weights.csv")
    np.testing.assert_array_equal(table.sizes, [4] * 9 + [64])
    assert np.dot(table.sizes, table.weights) == pytest.approx(100, abs=1e-9)
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "sweep,det_sigma" and len(trace) > 2

    bout = tmp_path / "b"
    assert main(["breakdown", str(out / "weights.csv"), "--eps-star", "0.5", "--out-dir", str(bout)]) == 0
    header, row = (bout / "breakdown.csv").read_text().splitlines()
    assert header.startswith("config,rho,estimator,k_star,epsilon,prefix_sum")
    assert 18 <= int(row.split(",")[3]) <= 26

    assert main(["breakdown", str(out / "weights.csv"), "--spatial-median-exact", "--out-dir", str(bout)]) == 0
    fields = (bout / "breakdown.csv").read_text().splitlines()[1].split(",")
    k_star, k1, k0 = int(fields[3]), int(fields[6]), int(fields[7])
    assert k1 == k_star <= k0


def test_breakdown_needs_sizes(tmp_path):
    w = _write(tmp_path / "w.csv", "cluster_id,weight\n1,2\n2,1\n")
    assert main(["breakdown", str(w), "--eps-star", "0.5", "--out-dir", str(tmp_path)]) == 1
    s = _write(tmp_path / "s.csv", "cluster_id,x1\n1,0\n2,1\n2,2\n")
    assert main(["breakdown", str(w), "--eps-star", "0.5", "--sample", str(s), "--out-dir", str(tmp_path)]) == 0
    assert main(["breakdown", str(w), "--eps-star", "1.5", "--sample", str(s), "--out-dir", str(tmp_path)]) == 1


def test_optimize_weights_bad_config(tmp_path):
    bad = _write(tmp_path / "c.json", '{"configuration": "C1"}')
    assert main(["optimize-weights", str(bad), "--out-dir", str(tmp_path)]) == 1


def test_reproduce_breakdown_table(tmp_path):
    assert main(["reproduce", "--table", "breakdown", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "breakdown.csv").read_text().splitlines()
    assert lines[0] == "table,distribution,config,rho,estimator,metric,value,stderr,published,error,tolerance,status"
    c3 = [l for l in lines if ",C3,0.2,spatial-median,epsilon_pct," in l]
    assert len(c3) == 1 and c3[0].endswith("PASS")
    assert ",46.0," in c3[0]


def test_reproduce_rejects_unknown_table(tmp_path):
    assert main(["reproduce", "--table", "table9", "--out-dir", str(tmp_path)]) == 1
    assert main(["reproduce", "--table", "breakdown", "--configs", "C7", "--out-dir", str(tmp_path)]) == 1


def test_reproduce_efficiency_mean_is_self_reference(tmp_path, monkeypatch):
    monkeypatch.setenv("WMEST_SEED", "5")
    assert main(["reproduce", "--table", "efficiency-gaussian", "--configs", "C2",
                 "--replications", "20", "--out-dir", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 5
    rows = [l.split(",") for l in (tmp_path / "efficiency-gaussian.csv").read_text().splitlines()[1:]]
    mean_ratios = [r for r in rows if r[4] == "mean" and r[5].startswith("ratio")]
    assert len(mean_ratios) == 4
    assert all(float(r[6]) == 1.0 for r in mean_ratios)


def test_reproduce_weights_c2_band(tmp_path):
    assert main(["reproduce", "--table", "weights", "--configs", "C2", "--replications", "200",
                 "--seed", "1", "--out-dir", str(tmp_path)]) == 0
    rows = [l.split(",") for l in (tmp_path / "weights.csv").read_text().splitlines()[1:]]
    sel = [r for r in rows if r[3] == "0.2" and r[4] == "spatial-median" and r[5] == "group_mean_m4"]
    assert len(sel) == 1
    assert sel[0][-1] == "PASS"
    assert abs(float(sel[0][6]) / float(sel[0][8]) - 1) <= 0.10


def test_simulate_writes_report(tmp_path):
    cfg = _write(
        tmp_path / "cfg.json",
        json.dumps({"configuration": {"name": "pairs", "sizes": [2, 2, 6]},
                    "distribution": {"family": "student", "nu": 9, "rho": 0.5},
                    "estimators": ["huber", {"kind": "lp-median", "p": 3}], "replications": 5}),
    )
    assert main(["simulate", str(cfg), "--seed", "4", "--out-dir", str(tmp_path)]) == 0
    report = (tmp_path / "report.csv").read_text().splitlines()
    assert report[0] == "config,distribution,rho,estimator,metric,value,stderr"
    assert any(",student9,0.5,huber(k=1.345),efficiency," in l for l in report)
    assert len((tmp_path / "estimates.csv").read_text().splitlines()) == 1 + 2 * 2 * 5


def test_console_script_runs_as_module(tmp_path, two_points):
    proc = subprocess.run(
        [sys.executable, "-m", "wmest.cli", "estimate", str(two_points), "--family", "mean", "--out-dir", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip() == "1.5,0.0"


def test_reruns_are_identical_apart_from_timestamps(tmp_path, two_points):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["estimate", str(two_points), "--family", "huber", "--out-dir", str(d)]) == 0
    for name in ("theta.csv", "covariance.csv", "result.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
