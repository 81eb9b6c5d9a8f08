import json
import os
from importlib import resources

import jsonschema
import numpy as np
import pytest

from wfanova import cli
from wfanova.cli import DataError, fmt, ingest_csv, main
from wfanova.model import ComputationError, ModelParams
from wfanova.simulation import generate_replication, make_sim_model

SCHEMA = json.loads(resources.files("wfanova").joinpath("schemas/report.schema.json").read_text())


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def read_dir(path):
    return {name: (path / name).read_bytes() for name in sorted(os.listdir(path))}


def load(path):
    return json.loads(path.read_text(encoding="utf-8"))


TOY = """group_id,subject_id,t,y
a,1,0.0,1.5
a,1,0.5,2.5
a,2,0.0,0.5
a,2,1.0,3.0
b,3,0.2,1.0
b,3,0.4,1.25
b,3,1.0,2.0
b,4,0.1,0.0
"""


def test_ingest_toy_file(tmp_path):
    data = ingest_csv(write(tmp_path / "d.csv", TOY))
    assert data.I == 2 and data.J_i == [2, 2]
    assert data.group_ids == ("a", "b")
    assert [g.subject_ids for g in data.groups] == [("1", "2"), ("3", "4")]
    assert [np.diff(g.offsets).tolist() for g in data.groups] == [[2, 2], [3, 1]]
    assert data.interval == (0.0, 1.0)
    t, y = data.groups[1].subject(0)
    np.testing.assert_array_equal(t, [0.2, 0.4, 1.0])
    np.testing.assert_array_equal(y, [1.0, 1.25, 2.0])


def test_unsorted_rows_give_the_same_data(tmp_path):
    lines = TOY.strip().split("\n")
    shuffled = "\n".join([lines[0]] + [lines[k] for k in (8, 3, 1, 6, 2, 7, 5, 4)]) + "\n"
    a = ingest_csv(write(tmp_path / "a.csv", TOY))
    b = ingest_csv(write(tmp_path / "b.csv", shuffled))
    assert a.group_ids == b.group_ids
    for ga, gb in zip(a.groups, b.groups):
        np.testing.assert_array_equal(ga.t, gb.t)
        np.testing.assert_array_equal(ga.y, gb.y)
        np.testing.assert_array_equal(ga.offsets, gb.offsets)


def test_numeric_labels_sort_numerically(tmp_path):
    text = "group_id,subject_id,t,y\n10,1,0,1\n9,2,1,2\n9,3,0,1\n"
    data = ingest_csv(write(tmp_path / "d.csv", text))
    assert data.group_ids == ("9", "10")


def _bad_line_17():
    rows = ["group_id,subject_id,t,y"]
    for k in range(15):
        rows.append(f"{k % 3},{k % 5},{k / 10},{k}")
    rows.append("1,1,0.95,oops")
    return "\n".join(rows) + "\n"


def test_non_numeric_cell_names_its_line(tmp_path):
    path = write(tmp_path / "d.csv", _bad_line_17())
    with pytest.raises(DataError) as info:
        ingest_csv(path)
    assert info.value.line == 17 and "line 17" in str(info.value)
    out = tmp_path / "out"
    assert main(["fit", "--input", path, "--out", str(out), "--seed", "1"]) == cli.EXIT_DATA
    err = load(out / "error.json")
    assert err["line"] == 17 and err["exit_code"] == 3


@pytest.mark.parametrize("text,line", [
    ("group_id,t,y\na,0,1\n", 1),
    ("group_id,subject_id,t,y\na,1,0,1\na,1,0,2\n", 3),
    ("group_id,subject_id,t,y\na,1,0,1\na,1,nan,2\n", 3),
    ("group_id,subject_id,t,y\na,1,0\n", 2),
])
def test_malformed_files(tmp_path, text, line):
    with pytest.raises(DataError) as info:
        ingest_csv(write(tmp_path / "d.csv", text))
    assert info.value.line == line


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        ingest_csv(str(tmp_path / "nope.csv"))


def test_log_and_endpoint_transforms(tmp_path):
    text = "group_id,subject_id,t,y\na,1,0,1\na,1,2,2.718281828459045\na,2,0,1\na,2,4,1\nb,3,0,1\nb,3,3,1\n"
    data = ingest_csv(write(tmp_path / "d.csv", text), log_y=True, rescale_endpoints=True)
    assert data.groups[0].subject(0)[1][1] == pytest.approx(1.0, abs=1e-15)
    ends = [g.subject(j)[0][-1] for g in data.groups for j in range(g.J)]
    np.testing.assert_allclose(ends, 3.0)
    with pytest.raises(DataError):
        ingest_csv(write(tmp_path / "neg.csv", "group_id,subject_id,t,y\na,1,0,-1\na,1,1,1\n"),
                   log_y=True)


def test_fmt_is_lossless():
    rng = np.random.default_rng(0)
    for x in rng.standard_normal(1000) * 10.0 ** rng.integers(-300, 300, 1000):
        assert float(fmt(x)) == x


@pytest.mark.parametrize("model_id", [5, 8])
def test_simulated_csv_round_trips_exactly(tmp_path, model_id):
    out = tmp_path / "sim"
    assert main(["simulate", "--model", str(model_id), "--seed", "7", "--out", str(out)]) == 0
    data = ingest_csv(str(out / "data.csv"))
    ref, truth = generate_replication(make_sim_model(model_id), 7)
    assert data.I == ref.I
    for g, h in zip(data.groups, ref.groups):
        np.testing.assert_array_equal(g.t, h.t)
        np.testing.assert_array_equal(g.y, h.y)
    saved = load(out / "truth.json")
    np.testing.assert_array_equal(np.asarray(saved["u"]), truth["u"])
    assert load(out / "manifest.json")["seed"] == 7


@pytest.fixture(scope="module")
def model3_fit(tmp_path_factory):
    base = tmp_path_factory.mktemp("m3")
    assert main(["simulate", "--model", "3", "--seed", "11", "--out", str(base / "sim")]) == 0
    out = base / "fit"
    code = main(["fit", "--input", str(base / "sim" / "data.csv"), "--out", str(out), "-p", "1",
                 "-q", "1", "--tau0", "0.3", "--seed", "2", "--threads", "1",
                 "--curve-points", "11", "--warp-points", "7"])
    assert code == 0
    return base, out


def test_fit_report_matches_schema(model3_fit):
    _, out = model3_fit
    report = load(out / "report.json")
    jsonschema.validate(report, SCHEMA)
    vr = report["variance_ratios"]
    for key in ("z", "w"):
        h, ci = vr[f"h_{key}"], vr[f"ci_h{key}"]
        assert 0 <= ci[0] <= h <= ci[1] <= 1
    assert report["estimator"] == "ML" and report["seed"] == 2
    assert report["f_tests"][0]["target"] == "theta[0]"
    assert 0 <= report["f_tests"][0]["p_value"] <= 1


def test_fit_outputs(model3_fit):
    _, out = model3_fit
    assert set(os.listdir(out)) == {"params.json", "report.json", "fitted_curves.csv",
                                    "warps.csv", "manifest.json"}
    params = ModelParams.from_dict(load(out / "params.json"))
    assert params.r == 1 and params.p == 1
    warps = np.genfromtxt(out / "warps.csv", delimiter=",", skip_header=1, usecols=(2, 3))
    assert warps.shape == (50 * 7, 2)
    for block in warps.reshape(50, 7, 2):
        assert block[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert block[-1, 1] == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(block[:, 1]) > 0)
    fitted = np.genfromtxt(out / "fitted_curves.csv", delimiter=",", skip_header=1)
    assert fitted.shape == (50 * 11, 4) and np.all(np.isfinite(fitted))
    manifest = load(out / "manifest.json")
    assert manifest["arguments"]["tau0"] == "0.3" and manifest["version"]


def test_fit_is_byte_identical_when_rerun(model3_fit):
    base, out = model3_fit
    before = read_dir(out)
    assert main(["fit", "--input", str(base / "sim" / "data.csv"), "--out", str(out), "-p", "1",
                 "-q", "1", "--tau0", "0.3", "--seed", "2", "--threads", "1",
                 "--curve-points", "11", "--warp-points", "7"]) == 0
    assert read_dir(out) == before


def test_report_subcommand(model3_fit, tmp_path, capsys):
    _, out = model3_fit
    summ = tmp_path / "summary"
    assert main(["report", "--input", str(out), "--out", str(summ)]) == 0
    text = capsys.readouterr().out
    assert "h_z = " in text and "h_w = " in text and "F-test theta[0]" in text
    first = read_dir(summ)
    assert main(["report", "--input", str(out), "--out", str(summ)]) == 0
    assert read_dir(summ) == first


@pytest.mark.parametrize("model_id", range(1, 11))
def test_simulate_then_fit_with_defaults(tmp_path, model_id):
    sim = tmp_path / "sim"
    assert main(["simulate", "--model", str(model_id), "--seed", str(model_id),
                 "--out", str(sim)]) == 0
    out = tmp_path / "fit"
    assert main(["fit", "--input", str(sim / "data.csv"), "--out", str(out)]) == 0
    report = load(out / "report.json")
    jsonschema.validate(report, SCHEMA)
    assert isinstance(report["seed"], int)


def test_simulate_is_byte_identical(tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / "sim"
        assert main(["simulate", "--model", "10", "--seed", "3", "--out", str(out)]) == 0
        runs.append(read_dir(out))
    assert runs[0] == runs[1]


def test_benchmark_is_byte_identical(tmp_path):
    out = tmp_path / "bench"
    args = ["benchmark", "--models", "1", "--reps", "5", "--seed", "1", "--threads", "1",
            "--out", str(out)]
    assert main(args) == 0
    first = read_dir(out)
    assert main(args) == 0
    assert read_dir(out) == first
    header = first["benchmark_table.csv"].decode().split("\n")[0].split(",")
    assert header[:5] == ["model", "target", "bias_C", "bias_2s", "bias_ML"]
    rows = [r for r in first["benchmark_table.csv"].decode().strip().split("\n")[1:]]
    assert [r.split(",")[1] for r in rows] == ["mu", "phi1", "psi1"]


@pytest.mark.parametrize("argv", [
    [],
    ["fit", "--out", "x"],
    ["simulate", "--model", "11", "--out", "{tmp}/s"],
    ["benchmark", "--models", "1", "--reps", "1", "--out", "{tmp}/b"],
    ["benchmark", "--estimators", "XX", "--out", "{tmp}/b"],
    ["fit", "--input", "{tmp}/d.csv", "--out", "{tmp}/f", "--tau0", "a,b"],
    ["fit", "--input", "{tmp}/d.csv", "--out", "{tmp}/f", "--tau0", "0.6,0.3"],
    ["fit", "--input", "{tmp}/d.csv", "--out", "{tmp}/missing/f"],
])
def test_usage_errors_exit_2(tmp_path, argv):
    write(tmp_path / "d.csv", TOY)
    assert main([a.replace("{tmp}", str(tmp_path)) for a in argv]) == cli.EXIT_USAGE


def test_report_on_empty_directory_is_a_data_error(tmp_path):
    assert main(["report", "--input", str(tmp_path)]) == cli.EXIT_DATA


def test_numerical_failure_exit_4(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise ComputationError("covariance not positive definite")

    monkeypatch.setattr(cli, "_fit", boom)
    out = tmp_path / "f"
    path = write(tmp_path / "d.csv", TOY)
    assert main(["fit", "--input", path, "--out", str(out), "--seed", "0"]) == cli.EXIT_NUMERIC
    err = load(out / "error.json")
    assert err["exit_code"] == 4 and err["error_type"] == "ComputationError"


def test_auto_seed_is_recorded(tmp_path):
    out = tmp_path / "s"
    assert main(["simulate", "--model", "1", "--out", str(out)]) == 0
    seed = load(out / "manifest.json")["seed"]
    again = tmp_path / "s2"
    assert main(["simulate", "--model", "1", "--seed", str(seed), "--out", str(again)]) == 0
    assert (out / "data.csv").read_bytes() == (again / "data.csv").read_bytes()


def test_fit_with_bootstrap_section(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--model", "1", "--seed", "4", "--out", str(sim)]) == 0
    out = tmp_path / "fit"
    assert main(["fit", "--input", str(sim / "data.csv"), "--out", str(out), "--seed", "9",
                 "--bootstrap", "3", "--level", "0.9", "--threads", "1"]) == 0
    report = load(out / "report.json")
    jsonschema.validate(report, SCHEMA)
    boot = report["bootstrap"]
    assert boot["B"] == 3 and len(boot["h_z"]) == 3
    assert all(0 <= h <= 1 for h in boot["h_z"])
    assert report["variance_ratios"]["level"] == 0.9
