import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fastntk import cli
from fastntk.cli import SWEEP_HEADER, main


def write_spec(tmp_path, name="model.json", **spec):
    path = tmp_path / name
    path.write_text(json.dumps(spec))
    return str(path)


FCN = dict(family="fcn", depth=3, width=16, output_size=4, input_dim=3)


def test_compute_auto_records_structured(tmp_path):
    out = tmp_path / "r.json"
    assert main(["compute", "--model", write_spec(tmp_path, **FCN), "--n1", "2", "--seed", "0", "--out", str(out)]) == 0
    record = json.loads(out.read_text())
    assert record["method"] == "structured_derivatives"
    assert record["requested_method"] == "auto"
    assert np.array(record["ntk"]).shape == (8, 8)
    assert set(record["predicted"]) == {"jacobian_contraction", "ntk_vector_products", "structured_derivatives"}


def test_compute_is_byte_identical(tmp_path):
    spec = write_spec(tmp_path, **FCN)
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        args = ["compute", "--model", spec, "--seed", "7", "--count-flops", "--sequential", "--out", str(p)]
        assert main(args) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_single_entry_agrees_across_methods(tmp_path):
    spec = write_spec(tmp_path, family="fcn", depth=2, width=5, output_size=1, input_dim=3)
    values = []
    for method in ("jacobian-contraction", "ntk-vector-products", "structured-derivatives"):
        out = tmp_path / f"{method}.json"
        main(["compute", "--model", spec, "--n1", "1", "--method", method, "--out", str(out)])
        values.append(json.loads(out.read_text())["ntk"][0][0])
    assert max(values) - min(values) <= 1e-10 * abs(values[0])


def test_compute_counts_match_prediction(tmp_path):
    out = tmp_path / "r.json"
    main(["compute", "--model", write_spec(tmp_path, **FCN), "--count-flops", "--n2", "3", "--out", str(out)])
    record = json.loads(out.read_text())
    assert record["measured_flops"] == record["predicted_flops"]
    assert record["n2"] == 3


def test_compute_csv(tmp_path):
    out = tmp_path / "r.csv"
    main(["compute", "--model", write_spec(tmp_path, **FCN), "--format", "csv", "--no-values", "--out", str(out)])
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0][0] == "method" and rows[1][0] == "structured_derivatives"


def test_bad_spec_exit_code(tmp_path, capsys):
    assert main(["compute", "--model", write_spec(tmp_path, family="rnn", depth=1, width=2, output_size=1)]) == 2
    assert main(["compute", "--model", str(tmp_path / "missing.json")]) == 2
    assert main(["compute"]) == 2
    assert "error" in capsys.readouterr().err


def test_compute_cap_refusal(tmp_path, monkeypatch):
    monkeypatch.setenv("NTK_MEM_CAP_BYTES", "16")
    assert main(["compute", "--model", write_spec(tmp_path, **FCN)]) == 4


def test_check_default_grid_passes(capsys):
    assert main(["check"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_check_corrupted_rule_fails(tmp_path, capsys):
    assert main(["check", "--model", write_spec(tmp_path, **FCN), "--corrupt-rules"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_check_cnn(tmp_path):
    spec = write_spec(tmp_path, family="cnn", depth=2, width=3, output_size=2, pixels=8, filter=3)
    assert main(["check", "--model", spec]) == 0


def test_check_cap(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NTK_MEM_CAP_BYTES", "100")
    assert main(["check", "--model", write_spec(tmp_path, **FCN)]) == 4
    assert "refused" in capsys.readouterr().err


def test_check_default_cap_is_a_million_entries(tmp_path, monkeypatch):
    monkeypatch.delenv("NTK_MEM_CAP_BYTES", raising=False)
    big = write_spec(tmp_path, family="fcn", depth=2, width=400, output_size=4, input_dim=3)
    assert main(["check", "--model", big, "--n1", "2"]) == 4


def test_sweep_header_and_rows(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--w", "4,8", "--o", "2", "--n", "1", "--t", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert out.read_text().splitlines()[0] == ",".join(SWEEP_HEADER)
    assert len(rows) == 6
    for row in rows:
        assert row["error"] == ""
        measured = int(row["measured_flops"])
        assert measured == int(row["predicted_flops"])
        assert float(row["flops_per_entry"]) == measured / (int(row["n"]) ** 2 * int(row["o"]) ** 2)


def test_sweep_empty_grid(capsys):
    assert main(["sweep", "--w", ""]) == 0
    assert capsys.readouterr().out == ",".join(SWEEP_HEADER) + "\n"


def test_sweep_records_failures(monkeypatch, capsys):
    real = cli.ntk

    def flaky(prog, params, x1, x2, method):
        if prog.param_shapes[0][0] == 8:
            raise RuntimeError("boom")
        return real(prog, params, x1, x2, method)

    monkeypatch.setattr(cli, "ntk", flaky)
    assert main(["sweep", "--w", "4,8", "--t", "1", "--n", "1", "--methods", "jacobian_contraction"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert rows[0]["error"] == "" and "boom" in rows[1]["error"]


def test_sweep_grid_file(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"w": [4], "o": [1, 2], "n": 1, "t": [1], "methods": ["ntk-vector-products"]}))
    assert main(["sweep", "--grid", str(grid)]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["o"] for r in rows] == ["1", "2"]
    assert {r["method"] for r in rows} == {"ntk_vector_products"}


def test_sweep_cnn_axes(tmp_path, capsys):
    spec = write_spec(tmp_path, family="cnn", depth=1, width=2, output_size=2, pixels=4, filter=1)
    assert main(["sweep", "--model", spec, "--w", "2", "--t", "1", "--n", "1", "--d", "4,9", "--f", "1,3"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 12 and all(r["error"] == "" for r in rows)


def test_sweep_invalid_axis():
    assert main(["sweep", "--w", "0"]) == 2


def test_cost_verb(tmp_path, capsys):
    assert main(["cost", "--model", write_spec(tmp_path, **FCN), "--n1", "2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["selected_method"] == "structured_derivatives"
    assert len(report["estimates"]) == 3 and len(report["closed_form"]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fastntk", "cost", "--model", write_spec(tmp_path, **FCN), "--format", "csv"],
        capture_output=True,
        text=True,
        check=True,
    )
    assert proc.stdout.startswith("method,term,flops")


def test_unknown_method_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["compute", "--model", write_spec(tmp_path, **FCN), "--method", "magic"])
