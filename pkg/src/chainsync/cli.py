"""Command-line interface.

`serve` runs the HTTP service; `register`, `subscribe`, `query`, and
`backfill-status` are thin clients against a running service; `scenario`
drives a deterministic scripted run locally; `fetch` is a one-shot
spork-aware range fetch against the chains a scenario describes.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path
from typing import Any

import click
import httpx

from chainsync import __version__
from chainsync.config import ApiConfig, ServiceConfig, load_config
from chainsync.core import ServiceCore
from chainsync.errors import ChainsyncError
from chainsync.fetcher import FetchRequest
from chainsync.scenario import ScenarioRunner, apply_chain_script, load_scenario
from chainsync.util import encode_payload


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Multi-chain event indexer with backfill, integrity checksums, and webhooks."""


def _call(method: str, base_url: str, path: str, payload: dict | None = None,
          params: dict | None = None) -> Any:
    try:
        response = httpx.request(
            method, base_url.rstrip("/") + path, json=payload, params=params, timeout=30.0
        )
    except httpx.HTTPError as exc:
        raise click.ClickException(f"cannot reach service at {base_url}: {exc}")
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise click.ClickException(f"{response.status_code}: {detail}")
    if response.headers.get("content-type", "").startswith("application/json"):
        return response.json()
    return response.text


def _echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


@main.command()
@click.option("--config", "config_path", envvar="CHAINSYNC_CONFIG", required=True,
              type=click.Path(exists=True), help="Service config file (JSON).")
@click.option("--host", default=None, help="Override api.host from the config.")
@click.option("--port", type=int, default=None, help="Override api.port from the config.")
def serve(config_path: str, host: str | None, port: int | None) -> None:
    """Run the sync service and its HTTP API."""
    import uvicorn

    from chainsync.service import create_app

    config = load_config(config_path)
    if host is not None or port is not None:
        api = ApiConfig(host=host or config.api.host, port=port or config.api.port)
        config = ServiceConfig(
            state_dir=config.state_dir, seed=config.seed, chains=config.chains,
            scheduler=config.scheduler, api=api,
        )
    core = ServiceCore(config)
    core.start()
    app = create_app(core)
    try:
        uvicorn.run(app, host=config.api.host, port=config.api.port, log_level="info")
    finally:
        core.close()


@main.command()
@click.option("--base-url", default="http://127.0.0.1:8460", show_default=True)
@click.option("--chain-id", required=True)
@click.option("--contract", "contract_address", required=True)
@click.option("--signature", "event_signature", required=True)
@click.option("--init-height", type=int, default=0, show_default=True)
@click.option("--schema-file", required=True, type=click.Path(exists=True),
              help="JSON mapping schema definition.")
def register(base_url: str, chain_id: str, contract_address: str, event_signature: str,
             init_height: int, schema_file: str) -> None:
    """Register an event of interest with its mapping schema."""
    schema = json.loads(Path(schema_file).read_text())
    out = _call("POST", base_url, "/registrations", {
        "chain_id": chain_id,
        "contract_address": contract_address,
        "event_signature": event_signature,
        "init_block_height": init_height,
        "mapping_schema": schema,
    })
    _echo_json(out)


@main.command()
@click.option("--base-url", default="http://127.0.0.1:8460", show_default=True)
@click.option("--registration-id", required=True)
@click.option("--url", required=True, help="Webhook endpoint to notify.")
def subscribe(base_url: str, registration_id: str, url: str) -> None:
    """Subscribe a webhook endpoint to a registered event."""
    out = _call("POST", base_url, "/subscriptions",
                {"registration_id": registration_id, "url": url})
    _echo_json(out)


def _parse_filter(raw: str) -> list[Any]:
    parts = raw.split(":", 2)
    if len(parts) != 3:
        raise click.ClickException(f"filter must look like column:op:value, got '{raw}'")
    column, op, value = parts
    try:
        return [column, op, json.loads(value)]
    except json.JSONDecodeError:
        return [column, op, value]


@main.command()
@click.option("--base-url", default="http://127.0.0.1:8460", show_default=True)
@click.option("--spec-file", type=click.Path(exists=True),
              help="Full query spec as JSON; other flags are ignored.")
@click.option("--event-type", "event_types", multiple=True)
@click.option("--filter", "filters", multiple=True,
              help="column:op:value (value parsed as JSON when possible); repeatable.")
@click.option("--sort", "sorts", multiple=True, help="column:asc|desc; repeatable.")
@click.option("--limit", type=int, default=100, show_default=True)
@click.option("--cursor", default=None)
@click.option("--group-by", default=None)
@click.option("--aggregate", default=None)
@click.option("--aggregate-column", default=None)
def query(base_url: str, spec_file: str | None, event_types: tuple[str, ...],
          filters: tuple[str, ...], sorts: tuple[str, ...], limit: int,
          cursor: str | None, group_by: str | None, aggregate: str | None,
          aggregate_column: str | None) -> None:
    """Query the event store."""
    if spec_file:
        body = json.loads(Path(spec_file).read_text())
    else:
        body = {
            "event_types": list(event_types) or None,
            "filters": [_parse_filter(f) for f in filters],
            "sort": [s.split(":", 1) for s in sorts],
            "limit": limit,
            "cursor": cursor,
            "group_by": group_by,
            "aggregate": aggregate,
            "aggregate_column": aggregate_column,
        }
    _echo_json(_call("POST", base_url, "/query", body))


@main.command(name="backfill-status")
@click.option("--base-url", default="http://127.0.0.1:8460", show_default=True)
@click.option("--registration-id", default=None, help="Limit to one registration.")
def backfill_status(base_url: str, registration_id: str | None) -> None:
    """Show sync cursors and outstanding backfill partitions."""
    if registration_id:
        regs = [_call("GET", base_url, f"/registrations/{registration_id}")]
    else:
        regs = _call("GET", base_url, "/registrations")
    for reg in regs:
        backfill = reg.get("backfill") or {}
        outstanding = backfill.get("outstanding", [])
        status = "collapsed" if reg["synced_start_block_height"] == reg["init_block_height"] \
            else f"{len(outstanding)} partitions outstanding"
        click.echo(
            f"{reg['registration_id'][:16]}  chain={reg['chain_id']} "
            f"init={reg['init_block_height']} start={reg['synced_start_block_height']} "
            f"latest={reg['synced_latest_block_height']}  backfill: {status}"
        )


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--state-dir", type=click.Path(), default=None,
              help="Persist journals here (needed for --resume); default is a temp dir.")
@click.option("--resume", is_flag=True, help="Continue an interrupted run from its journals.")
@click.option("--kill-at", default=None,
              help="TICK:PHASE (phase pre|mid|post): SIGKILL the process there.")
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON.")
def scenario(scenario_file: str, state_dir: str | None, resume: bool,
             kill_at: str | None, as_json: bool) -> None:
    """Run a deterministic scenario and evaluate its assertions."""
    spec = load_scenario(scenario_file)
    directory = state_dir or tempfile.mkdtemp(prefix="chainsync-scenario-")
    try:
        runner = ScenarioRunner(spec, directory, kill_at=kill_at, resume=resume)
    except ChainsyncError as exc:
        raise click.ClickException(str(exc))
    try:
        report = runner.run()
    finally:
        runner.close()
    if as_json:
        _echo_json(report.to_dict())
    else:
        for result in report.results:
            mark = "PASS" if result.passed else "FAIL"
            click.echo(f"[{mark}] {result.name}: {result.detail}")
        if report.first_failure is not None:
            click.echo(f"first failing assertion: {report.first_failure.name}")
    sys.exit(0 if report.passed else 1)


@main.command()
@click.option("--scenario", "scenario_file", required=True, type=click.Path(exists=True),
              help="Scenario file defining the chains and their mint script.")
@click.option("--chain-id", required=True)
@click.option("--from", "from_height", type=int, required=True)
@click.option("--to", "to_height", type=int, required=True)
@click.option("--contract", "contract_address", default=None)
@click.option("--signature", "event_signature", default=None)
def fetch(scenario_file: str, chain_id: str, from_height: int, to_height: int,
          contract_address: str | None, event_signature: str | None) -> None:
    """One-shot spork-aware range fetch for debugging."""
    spec = load_scenario(scenario_file)
    with tempfile.TemporaryDirectory(prefix="chainsync-fetch-") as tmp:
        core = ServiceCore(
            ServiceConfig(state_dir=Path(tmp), seed=spec.seed, chains=spec.chains),
            transport=lambda url, body, headers: 200,
        )
        try:
            apply_chain_script(core, spec)
            eoi_filter = None
            if contract_address and event_signature:
                eoi_filter = frozenset({(contract_address, event_signature)})
            result = core.fetcher.fetch_raw(
                FetchRequest(chain_id, from_height, to_height, eoi_filter)
            )
            for ev in result.events:
                click.echo(json.dumps({
                    "chain_id": ev.chain_id,
                    "block_height": ev.block_height,
                    "tx_index": ev.tx_index,
                    "log_index": ev.log_index,
                    "contract_address": ev.contract_address,
                    "event_signature": ev.event_signature,
                    "payload": encode_payload(ev.payload),
                }, sort_keys=True))
            click.echo(
                f"# {result.raw_count} events over "
                f"{len(result.subrange_counts)} endpoint subranges", err=True
            )
        finally:
            core.close()


if __name__ == "__main__":
    main()
