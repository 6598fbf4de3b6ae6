"""HTTP facade over the scenario runners.

One POST endpoint per task plus a generic /run that takes a full
scenario document.  Responses carry the summary, the rendered output
files as text, and the manifest; writing files to disk is the client's
job (the CLI does it).  Domain errors map to 400, validation errors to
the framework's 422; a non-converged run is still a 200 with the
converged flag down, since the caller decides how hard to fail.
"""

from __future__ import annotations

from importlib import metadata

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .errors import NBodyKamError
from .parallel import thread_count
from .reporting import _sanitize
from .scenarios import OPTION_MODELS, Scenario, SystemModel, run_scenario


class TaskRequest(BaseModel):
    """Scenario minus the task name (that comes from the URL)."""

    model_config = ConfigDict(extra="forbid")

    system: SystemModel
    options: dict = {}
    seed: int = 0
    label: str | None = None


class TaskResponse(BaseModel):
    ok: bool
    converged: bool
    task: str
    summary: dict
    outputs: dict[str, str]
    manifest: dict


def _pkg_version() -> str:
    try:
        return metadata.version("nbodykam")
    except metadata.PackageNotFoundError:
        return "unknown"


def create_app() -> FastAPI:
    app = FastAPI(title="nbodykam", version=_pkg_version())

    @app.exception_handler(NBodyKamError)
    async def _domain_error(request: Request, exc: NBodyKamError):
        return JSONResponse(
            status_code=400,
            content={"detail": str(exc), "error_type": type(exc).__name__},
        )

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400,
            content={"detail": str(exc), "error_type": "ValueError"},
        )

    @app.get("/health")
    async def health() -> dict:
        return {
            "status": "ok",
            "version": _pkg_version(),
            "threads": thread_count(),
        }

    @app.get("/tasks")
    async def tasks() -> dict:
        return {"tasks": sorted(OPTION_MODELS)}

    @app.post("/run", response_model=TaskResponse)
    async def run(scenario: Scenario) -> TaskResponse:
        return _execute(scenario)

    def _execute(scenario: Scenario) -> TaskResponse:
        # option shape errors surface as 400 with the pydantic report
        try:
            scenario.typed_options()
        except Exception as exc:
            raise NBodyKamError(f"invalid options for {scenario.task}: {exc}")
        result = run_scenario(scenario)
        return TaskResponse(
            ok=result.ok,
            converged=result.converged,
            task=result.task,
            summary=_sanitize(result.summary),
            outputs=result.outputs,
            manifest=result.manifest,
        )

    def _register(task_name: str) -> None:
        @app.post(f"/tasks/{task_name}", response_model=TaskResponse,
                  name=f"run_{task_name.replace('-', '_')}")
        async def run_task(req: TaskRequest) -> TaskResponse:
            return _execute(Scenario(
                system=req.system,
                task=task_name,
                options=req.options,
                seed=req.seed,
                label=req.label,
            ))

    for name in OPTION_MODELS:
        _register(name)

    return app


app = create_app()
