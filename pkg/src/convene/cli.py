"""Operator entry point: serve, validate, simulate, export, purge.

Exit codes are part of the contract: serve exits 2 on bad configuration and
3 when the port cannot be bound; validate exits 1 when the config has
errors; simulate exits 1 when the stop condition cuts the run short (a
partial archive is still written).
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import socket
import sys
import time
from pathlib import Path

import click

from convene import __version__
from convene.api.auth import Allowlist
from convene.errors import ConfigParseError, ConveneError
from convene.model.parse import parse_experiment_config
from convene.model.validate import has_errors, validate_experiment_config
from convene.sim.plan import load_simulation_plan
from convene.sim.runner import run_simulation

log = logging.getLogger("convene")

DURATION_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> float:
    """Durations like 45s, 90m, 12h, 30d."""
    match = re.fullmatch(r"(\d+(?:\.\d+)?)([smhd])", text.strip())
    if match is None:
        raise click.BadParameter(f"{text!r} is not a duration (use 45s, 90m, 12h, 30d)")
    return float(match.group(1)) * DURATION_UNITS[match.group(2)]


@click.group()
@click.option(
    "--config-dir",
    type=click.Path(path_type=Path),
    default=Path("./convene-data"),
    show_default=True,
    help="Directory holding allowlist.json and per-experiment data.",
)
@click.option("--log-level", default="info", show_default=True, help="Logging level.")
@click.pass_context
def main(ctx: click.Context, config_dir: Path, log_level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    ctx.obj = {"config_dir": config_dir}


@main.command()
@click.option("--bind", default="127.0.0.1:8000", show_default=True, help="host:port to listen on.")
@click.pass_context
def serve(ctx: click.Context, bind: str) -> None:
    """Run the HTTP/WebSocket service over the experiments in the config dir."""
    config_dir: Path = ctx.obj["config_dir"]
    allowlist_path = config_dir / "allowlist.json"
    if not allowlist_path.exists():
        click.echo(f"error: allowlist not found at {allowlist_path}", err=True)
        sys.exit(2)
    try:
        allowlist = Allowlist.load(allowlist_path)
    except ConveneError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    host_name, _, port_text = bind.partition(":")
    try:
        port = int(port_text or "8000")
    except ValueError:
        click.echo(f"error: bad bind address {bind!r}", err=True)
        sys.exit(2)

    # Fail fast on an occupied port instead of letting the server loop die.
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host_name or "127.0.0.1", port))
    except OSError as e:
        click.echo(f"error: cannot bind {bind}: {e}", err=True)
        sys.exit(3)
    finally:
        probe.close()

    import uvicorn

    from convene.api.app import ExperimentHost, create_app

    experiment_host = ExperimentHost(allowlist, data_root=config_dir / "experiments")
    mounted = experiment_host.open_existing()
    app = create_app(experiment_host, tick_interval=0.25)
    log.info(
        "listening version=%s bind=%s experiments=%d", __version__, bind, mounted
    )
    uvicorn.run(app, host=host_name or "127.0.0.1", port=port, log_level="warning")


@main.command()
@click.argument("config_path", type=click.Path(exists=True, path_type=Path))
def validate(config_path: Path) -> None:
    """Check an experiment config; exit 0 only when it is error free."""
    try:
        doc = json.loads(config_path.read_text())
        config = parse_experiment_config(doc)
    except (json.JSONDecodeError, ConfigParseError) as e:
        click.echo(f"error: {e}")
        sys.exit(1)
    report = validate_experiment_config(config)
    for issue in report:
        click.echo(f"{issue.severity}: {issue.path}: {issue.message}")
    if has_errors(report):
        sys.exit(1)
    click.echo(f"ok: {config.id} ({len(config.stages)} stages)")


@main.command()
@click.argument("plan_path", type=click.Path(exists=True, path_type=Path))
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=Path("simulation.zip"),
    show_default=True,
    help="Where to write the export archive.",
)
@click.option(
    "--data-dir",
    type=click.Path(path_type=Path),
    default=None,
    help="Persist the event log under this directory as well.",
)
def simulate(plan_path: Path, out: Path, data_dir: Path | None) -> None:
    """Run a plan headlessly under the virtual clock and export the archive."""
    try:
        plan = load_simulation_plan(plan_path)
    except ConveneError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    started = time.monotonic()
    result, runner = run_simulation(plan, data_dir=data_dir)
    out.write_bytes(runner.archive())
    click.echo(result.summary_line())
    click.echo(f"archive: {out} ({time.monotonic() - started:.2f}s wall)")
    if not result.completed:
        sys.exit(1)


@main.command()
@click.argument("experiment_id")
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=None,
    help="Archive path (defaults to <experimentId>.zip).",
)
@click.option("--actor", default=None, help="Experimenter identity for the export (defaults to the creator).")
@click.pass_context
def export(ctx: click.Context, experiment_id: str, out: Path | None, actor: str | None) -> None:
    """Write the full archive for a stored experiment."""
    from convene.engine.runtime import ExperimentRuntime

    config_dir: Path = ctx.obj["config_dir"]
    data_dir = config_dir / "experiments" / experiment_id
    if not (data_dir / "events.jsonl").exists():
        click.echo(f"error: no stored experiment at {data_dir}", err=True)
        sys.exit(1)
    runtime = ExperimentRuntime.open(data_dir)
    if actor is None:
        actor = next(
            (who for who, role in runtime.state.config.roles.items() if role == "creator"),
            "",
        )
    target = out or Path(f"{experiment_id}.zip")
    target.write_bytes(runtime.export_archive(actor))
    click.echo(f"wrote {target}")


@main.command()
@click.option("--older-than", required=True, help="Age cutoff, e.g. 30d, 12h.")
@click.option("--dry-run", is_flag=True, help="List what would be removed without deleting.")
@click.pass_context
def purge(ctx: click.Context, older_than: str, dry_run: bool) -> None:
    """Delete stored experiments whose event log has not grown since the cutoff."""
    cutoff_seconds = parse_duration(older_than)
    config_dir: Path = ctx.obj["config_dir"]
    experiments_dir = config_dir / "experiments"
    if not experiments_dir.exists():
        click.echo("nothing to purge")
        return
    now = time.time()
    removed = 0
    for events_file in sorted(experiments_dir.glob("*/events.jsonl")):
        age = now - events_file.stat().st_mtime
        if age < cutoff_seconds:
            continue
        target = events_file.parent
        if dry_run:
            click.echo(f"would remove {target} (idle {age / 86400:.1f}d)")
        else:
            shutil.rmtree(target)
            click.echo(f"removed {target}")
        removed += 1
    click.echo(f"{'matched' if dry_run else 'purged'}: {removed}")


if __name__ == "__main__":
    main()
