"""Command line entry point: ``mudguard run | validate-mud | dump-pipeline | bench``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from ..config import Config
from ..errors import ConfigError, MudError, ScenarioParseError
from ..mud import parse_mud
from .bench import bench as run_bench
from .oracle import oracle_check
from .scenario import Scenario, load_scenario
from .simulation import Simulation, metrics_text


def _config_for(scenario: Scenario, config_path: str | None) -> Config:
    data = dict(scenario.config)
    if config_path:
        try:
            override = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{config_path}: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError(f"{config_path}: expected a JSON object")
        data.update(override)
    return Config.from_dict(data)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeat for debug).")
def main(verbose: int) -> None:
    """Simulate ISP-side MUD whitelist monitoring and enforcement."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config overrides.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Write the RunReport JSON here.")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), help="Write flat metrics here.")
@click.option("--oracle/--no-oracle", default=False, help="Cross-check verdicts with the brute-force oracle.")
def run(scenario: str, config_path: str | None, report_path: str | None,
        metrics_path: str | None, oracle: bool) -> None:
    """Run SCENARIO. Exits 2 when whitelist-violation alerts fired."""
    try:
        sc = load_scenario(scenario)
        cfg = _config_for(sc, config_path)
        rep = Simulation(sc, cfg).run()
    except (ScenarioParseError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    text = rep.to_json()
    if report_path:
        Path(report_path).write_text(text)
        if metrics_path is None:
            metrics_path = str(Path(report_path).with_suffix(".metrics"))
    else:
        click.echo(text, nl=False)
    if metrics_path:
        Path(metrics_path).write_text(metrics_text(rep))
    click.echo(
        f"{sc.name}: {len(rep.verdict_log)} verdicts, {len(rep.alerts)} alerts "
        f"({len(rep.violation_alerts)} violations), {len(rep.acls)} ACLs, "
        f"filter_count={rep.counters['filter_count']}",
        err=True,
    )
    if oracle:
        res = oracle_check(rep, sc)
        click.echo(f"oracle: {'pass' if res.passed else 'FAIL'} ({res.checked} checked, {len(res.diffs)} diffs)", err=True)
        for d in res.diffs[:20]:
            click.echo(f"  {json.dumps(d, sort_keys=True)}", err=True)
        if not res.passed:
            sys.exit(3)
    sys.exit(rep.exit_code)


@main.command("validate-mud")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def validate_mud(path: str) -> None:
    """Parse a MUD file and list the whitelist it yields."""
    try:
        profile = parse_mud(Path(path).read_bytes())
    except MudError as exc:
        click.echo(f"invalid: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    click.echo(f"profile {profile.profile_id}  {profile.mud_url}")
    if profile.systeminfo:
        click.echo(f"  systeminfo: {profile.systeminfo}")
    for e in profile.entries():
        remote = e.dns_name or e.ip_literal or "*"
        port = "*" if e.dst_port is None else e.dst_port
        proto = "*" if e.protocol is None else e.protocol
        click.echo(f"  {e.direction.value:16} {remote} port={port} proto={proto}")
    click.echo(f"  {len(profile.wld)} entries, {len(profile.domains)} domains"
               + (", has owner placeholder" if profile.has_placeholder else ""))


@main.command("dump-pipeline")
@click.argument("scenario", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def dump_pipeline(scenario: str | None, config_path: str | None) -> None:
    """Print the pipeline tables after running SCENARIO (empty pipeline without one)."""
    try:
        sc = load_scenario(scenario) if scenario else Scenario(name="empty")
        sim = Simulation(sc, _config_for(sc, config_path))
        sim.run()
    except (ScenarioParseError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(sim.pipeline.dump(), nl=False)
    click.echo(f"# {sim.pipeline.filter_count()} filters", err=True)


@main.command()
@click.option("--packets", default=200_000, show_default=True, help="Packets pushed through process().")
@click.option("--seed", default=0, show_default=True)
@click.option("--target", default=100_000, show_default=True, help="Required packets/second.")
def bench(packets: int, seed: int, target: int) -> None:
    """Measure pipeline throughput."""
    res = run_bench(packets, seed)
    ok = res.pps >= target
    click.echo(f"{res.packets} packets in {res.seconds:.3f}s: {res.pps:,.0f} pkt/s "
               f"(target {target:,}: {'met' if ok else 'missed'})")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
