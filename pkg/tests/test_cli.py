"""Operator CLI: validate, simulate, export, purge, serve preflight."""

from __future__ import annotations

import json
import os
import socket
import time
import zipfile

import click
import pytest
from click.testing import CliRunner

from conftest import survival_config_dict
from convene.api.auth import write_allowlist
from convene.cli import main, parse_duration
from helpers import survival_plan_doc


@pytest.fixture
def runner():
    return CliRunner()


def write_json(path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


# -- durations ------------------------------------------------------------------


def test_durations_cover_seconds_minutes_hours_days():
    assert parse_duration("45s") == 45.0
    assert parse_duration("90m") == 5400.0
    assert parse_duration("12h") == 43200.0
    assert parse_duration("30d") == 2592000.0
    assert parse_duration("1.5h") == 5400.0


@pytest.mark.parametrize("bad", ["", "10w", "h", "12", "4 hrs"])
def test_malformed_durations_are_rejected(bad):
    with pytest.raises(click.BadParameter):
        parse_duration(bad)


# -- validate --------------------------------------------------------------------


def test_validate_accepts_a_clean_config(runner, tmp_path):
    path = write_json(tmp_path / "config.json", survival_config_dict())
    result = runner.invoke(main, ["validate", path])
    assert result.exit_code == 0, result.output
    assert result.output.strip() == "ok: exp-survival (7 stages)"


def test_validate_prints_one_issue_per_line_and_exits_1(runner, tmp_path):
    doc = survival_config_dict()
    doc["stages"] = [s for s in doc["stages"] if s["id"] != "profile"]
    path = write_json(tmp_path / "config.json", doc)
    result = runner.invoke(main, ["validate", path])
    assert result.exit_code == 1
    lines = [line for line in result.output.splitlines() if line]
    assert lines, "expected at least one issue line"
    for line in lines:
        severity, _, rest = line.partition(": ")
        assert severity in ("error", "warning")
        assert ": " in rest  # path: message


def test_validate_rejects_broken_json(runner, tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{ not json")
    result = runner.invoke(main, ["validate", str(path)])
    assert result.exit_code == 1
    assert result.output.startswith("error:")


# -- simulate --------------------------------------------------------------------


def test_simulate_writes_the_archive_and_reports_completion(runner, tmp_path):
    plan_path = write_json(tmp_path / "plan.json", survival_plan_doc(cohort_count=2))
    out = tmp_path / "run.zip"
    result = runner.invoke(main, ["simulate", plan_path, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "simulate: allTerminal; cohorts 2/2 complete" in result.output
    with zipfile.ZipFile(out) as archive:
        names = archive.namelist()
    assert "events.jsonl" in names
    assert "payouts.csv" in names


def test_simulate_runs_are_reproducible_byte_for_byte(runner, tmp_path):
    plan_path = write_json(tmp_path / "plan.json", survival_plan_doc(jitter=2.0))
    first, second = tmp_path / "a.zip", tmp_path / "b.zip"
    assert runner.invoke(main, ["simulate", plan_path, "--out", str(first)]).exit_code == 0
    assert runner.invoke(main, ["simulate", plan_path, "--out", str(second)]).exit_code == 0
    assert first.read_bytes() == second.read_bytes()


def test_simulate_exits_1_when_cut_short_but_still_writes(runner, tmp_path):
    plan_path = write_json(
        tmp_path / "plan.json",
        survival_plan_doc(jitter=3.0, stop={"maxSimSeconds": 4.0}),
    )
    out = tmp_path / "partial.zip"
    result = runner.invoke(main, ["simulate", plan_path, "--out", str(out)])
    assert result.exit_code == 1
    assert "maxSimSeconds" in result.output
    assert out.exists()


def test_simulate_rejects_uncovered_plans(runner, tmp_path):
    doc = survival_plan_doc()
    del doc["participants"][0]["stages"]["election"]
    plan_path = write_json(tmp_path / "plan.json", doc)
    result = runner.invoke(main, ["simulate", plan_path])
    assert result.exit_code == 1
    assert "error:" in result.output


# -- export ----------------------------------------------------------------------


def test_export_reopens_a_persisted_run(runner, tmp_path):
    config_dir = tmp_path / "data"
    data_dir = config_dir / "experiments" / "exp-survival"
    plan_path = write_json(tmp_path / "plan.json", survival_plan_doc())
    sim = runner.invoke(
        main,
        ["simulate", plan_path, "--out", str(tmp_path / "sim.zip"), "--data-dir", str(data_dir)],
    )
    assert sim.exit_code == 0, sim.output
    out = tmp_path / "late-export.zip"
    result = runner.invoke(
        main,
        ["--config-dir", str(config_dir), "export", "exp-survival", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert f"wrote {out}" in result.output
    with zipfile.ZipFile(out) as archive:
        assert "events.jsonl" in archive.namelist()


def test_export_unknown_experiment_exits_1(runner, tmp_path):
    result = runner.invoke(main, ["--config-dir", str(tmp_path), "export", "ghost"])
    assert result.exit_code == 1
    assert "no stored experiment" in result.output


# -- purge -----------------------------------------------------------------------


def seeded_experiment_dir(config_dir, experiment_id: str, age_seconds: float):
    target = config_dir / "experiments" / experiment_id
    target.mkdir(parents=True)
    events = target / "events.jsonl"
    events.write_text("{}\n")
    stamp = time.time() - age_seconds
    os.utime(events, (stamp, stamp))
    return target


def test_purge_dry_run_lists_without_deleting(runner, tmp_path):
    old = seeded_experiment_dir(tmp_path, "exp-old", age_seconds=40 * 86400)
    result = runner.invoke(
        main, ["--config-dir", str(tmp_path), "purge", "--older-than", "30d", "--dry-run"]
    )
    assert result.exit_code == 0
    assert "would remove" in result.output
    assert "matched: 1" in result.output
    assert old.exists()


def test_purge_removes_only_idle_experiments(runner, tmp_path):
    old = seeded_experiment_dir(tmp_path, "exp-old", age_seconds=40 * 86400)
    fresh = seeded_experiment_dir(tmp_path, "exp-fresh", age_seconds=60)
    result = runner.invoke(
        main, ["--config-dir", str(tmp_path), "purge", "--older-than", "30d"]
    )
    assert result.exit_code == 0
    assert "purged: 1" in result.output
    assert not old.exists()
    assert fresh.exists()


def test_purge_with_no_data_dir_is_a_noop(runner, tmp_path):
    result = runner.invoke(
        main, ["--config-dir", str(tmp_path), "purge", "--older-than", "30d"]
    )
    assert result.exit_code == 0
    assert "nothing to purge" in result.output


# -- serve preflight ----------------------------------------------------------------


def test_serve_exits_2_without_an_allowlist(runner, tmp_path):
    result = runner.invoke(main, ["--config-dir", str(tmp_path), "serve"])
    assert result.exit_code == 2
    assert "allowlist not found" in result.output


def test_serve_exits_2_on_a_bad_bind_address(runner, tmp_path):
    write_allowlist(tmp_path / "allowlist.json", {"owner@example.org": "tok"})
    result = runner.invoke(
        main, ["--config-dir", str(tmp_path), "serve", "--bind", "127.0.0.1:notaport"]
    )
    assert result.exit_code == 2
    assert "bad bind address" in result.output


def test_serve_exits_3_when_the_port_is_taken(runner, tmp_path):
    write_allowlist(tmp_path / "allowlist.json", {"owner@example.org": "tok"})
    holder = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        holder.bind(("127.0.0.1", 0))
        port = holder.getsockname()[1]
        result = runner.invoke(
            main, ["--config-dir", str(tmp_path), "serve", "--bind", f"127.0.0.1:{port}"]
        )
    finally:
        holder.close()
    assert result.exit_code == 3
    assert "cannot bind" in result.output
