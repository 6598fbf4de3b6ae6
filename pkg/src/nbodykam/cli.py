"""Command line client for the scenario service.

Every task subcommand takes a scenario file (JSON with the system and
options), posts it to the service, and writes the returned outputs and
a manifest to the output directory.  By default the service runs in
process; --server points at a remote instance instead, and the files
land locally either way.

Exit codes: 0 on success, 2 when the run finished without converging,
3 on any error (bad input, domain failure, unreachable server).
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx

from .reporting import pretty_json, write_text
from .scenarios import OPTION_MODELS

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_ERROR = 3


class _CliError(click.ClickException):
    exit_code = EXIT_ERROR


class _Group(click.Group):
    """click reserves 2 for usage errors; here 2 means "did not converge",
    so usage errors move to the generic error code."""

    def parse_args(self, ctx, args):
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as exc:
            exc.exit_code = EXIT_ERROR
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_ERROR
            raise


def _post_in_process(path: str, payload: dict) -> tuple[int, dict]:
    from .service import app  # deferred so --server never imports fastapi state

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://nbodykam.local",
                                     timeout=None) as client:
            r = await client.post(path, json=payload)
            return r.status_code, r.json()

    return asyncio.run(go())


def _post_remote(server: str, path: str, payload: dict) -> tuple[int, dict]:
    with httpx.Client(base_url=server, timeout=None) as client:
        r = client.post(path, json=payload)
        return r.status_code, r.json()


def _post(server: str | None, path: str, payload: dict) -> tuple[int, dict]:
    if server:
        return _post_remote(server, path, payload)
    return _post_in_process(path, payload)


def _load_scenario(path: str, task: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _CliError(f"cannot read scenario {path}: {exc}")
    if not isinstance(doc, dict):
        raise _CliError("scenario must be a JSON object")
    declared = doc.pop("task", None)
    if declared is not None and declared != task:
        raise _CliError(
            f"scenario declares task {declared!r} but was given to {task!r}")
    return doc


def _write_outputs(out_dir: Path, outputs: dict[str, str],
                   manifest: dict) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in sorted(outputs.items()):
        p = out_dir / name
        write_text(p, text)
        written.append(p)
    p = out_dir / "manifest.json"
    write_text(p, pretty_json(manifest))
    written.append(p)
    return written


def _run_task(ctx: click.Context, task: str, scenario: str,
              out: str | None) -> None:
    doc = _load_scenario(scenario, task)
    out_dir = Path(out or doc.pop("output_dir", None) or f"out-{task}")
    doc.pop("output_dir", None)
    payload = {
        "system": doc.get("system"),
        "options": doc.get("options", {}),
        "seed": doc.get("seed", 0),
        "label": doc.get("label"),
    }
    server = ctx.obj.get("server")
    try:
        status, body = _post(server, f"/tasks/{task}", payload)
    except httpx.HTTPError as exc:
        click.echo(f"error: service unreachable: {exc}", err=True)
        ctx.exit(EXIT_ERROR)
    if status != 200:
        detail = body.get("detail", body)
        click.echo(f"error ({status}): {json.dumps(detail, default=str)}",
                   err=True)
        ctx.exit(EXIT_ERROR)
    for p in _write_outputs(out_dir, body["outputs"], body["manifest"]):
        click.echo(f"wrote {p}")
    click.echo(f"converged: {'true' if body['converged'] else 'false'}")
    ctx.exit(EXIT_OK if body["converged"] else EXIT_NOT_CONVERGED)


@click.group(cls=_Group)
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running service; default runs in process.")
@click.version_option(package_name="nbodykam")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Numerics for collision dynamics of homogeneous-potential N-body systems."""
    ctx.obj = {"server": server}


def _register(task: str) -> None:
    @main.command(name=task,
                  short_help=f"Run a {task} scenario and write its outputs.")
    @click.argument("scenario", type=click.Path(dir_okay=False))
    @click.option("--out", "-o", type=click.Path(file_okay=False), default=None,
                  help="Output directory (default: scenario output_dir "
                       f"or ./out-{task}).")
    @click.pass_context
    def _cmd(ctx: click.Context, scenario: str, out: str | None,
             _task: str = task) -> None:
        _run_task(ctx, _task, scenario, out)


for _name in sorted(OPTION_MODELS):
    _register(_name)


@main.command()
@click.pass_context
def selftest(ctx: click.Context) -> None:
    """Run the built-in numerical checks and print one line per check."""
    from .selftest import run_selftest

    ok, report = run_selftest()
    click.echo(report, nl=False)
    ctx.exit(EXIT_OK if ok else EXIT_ERROR)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Serve the HTTP API (requires uvicorn)."""
    try:
        import uvicorn
    except ImportError:
        click.echo("error: the 'server' extra is not installed", err=True)
        sys.exit(EXIT_ERROR)
    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
