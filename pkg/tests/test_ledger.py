"""Run ledger and artifact files."""
from __future__ import annotations

import math
import sqlite3

import pytest

from artifacts import format_cell, parse_cell, read_csv, read_json, sha256_file, write_csv, write_json
from ledger import init_ledger, ledger_path, list_runs, record_run, run_artifacts, verify_artifacts

RUN = {
    "kind": "screen",
    "seed": 2**64 - 1,
    "config_sha256": "0" * 64,
    "toolkit_version": "0.1.0",
    "plant_model_version": "1.1",
}


def test_empty_directory_has_no_runs(tmp_path):
    assert list_runs(ledger_path(tmp_path)) == []
    assert init_ledger(ledger_path(tmp_path)).exists()
    assert list_runs(ledger_path(tmp_path)) == []


def test_record_and_verify(tmp_path):
    design = write_csv(tmp_path / "design.csv", ["run", "y"], [[0, 1.5], [1, 2.5]])
    report = write_json(tmp_path / "report.json", {"kind": "screen"})
    path = ledger_path(tmp_path)
    run_id = record_run(path, **RUN, status="ok", report_path="report.json", artifact_paths=[design, report])

    [run] = list_runs(path)
    assert run["id"] == run_id
    assert run["seed"] == str(2**64 - 1)
    assert [a["path"] for a in run_artifacts(path, run_id)] == ["design.csv", "report.json"]
    assert verify_artifacts(path, run_id) == [("design.csv", True), ("report.json", True)]

    design.write_text("run,y\n0,1.5\n1,2.6\n", encoding="utf-8")
    report.unlink()
    assert verify_artifacts(path, run_id) == [("design.csv", False), ("report.json", False)]


def test_failed_runs_need_no_artifacts(tmp_path):
    path = ledger_path(tmp_path)
    record_run(path, **RUN, status="failed", message="cycle 3: hold_pressure out of range")
    [run] = list_runs(path)
    assert run["status"] == "failed"
    assert run["message"].startswith("cycle 3")
    assert run_artifacts(path, run["id"]) == []


def test_status_is_constrained(tmp_path):
    with pytest.raises(sqlite3.IntegrityError):
        record_run(ledger_path(tmp_path), **RUN, status="maybe")


@pytest.mark.parametrize(
    "value, text",
    [(True, "true"), (False, "false"), (3, "3"), (0.1, "0.1"), (None, ""), ("hold_pressure", "hold_pressure")],
)
def test_cell_format(value, text):
    assert format_cell(value) == text
    assert parse_cell(text) == value


def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "bad.csv", ["a", "b"], [[1]])


def test_csv_uses_unix_line_endings(tmp_path):
    path = write_csv(tmp_path / "x.csv", ["a"], [[1.25], [2]])
    assert path.read_bytes() == b"a\n1.25\n2\n"
    assert read_csv(path) == [{"a": "1.25"}, {"a": "2"}]


def test_json_is_sorted_and_infinity_is_a_string(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": math.inf, "a": [1, 2]})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert read_json(path) == {"a": [1, 2], "b": "inf"}
    assert len(sha256_file(path)) == 64
