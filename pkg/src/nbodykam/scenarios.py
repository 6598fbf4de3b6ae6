"""Scenario schema and task runners behind the service and the CLI.

A scenario is a mass system, a task name, and task-specific options;
options validate against the task's schema before any computation.
Runners return plain text outputs (CSV/JSON) plus a summary dict so the
service can ship them inline and the CLI can write files; a manifest
with input hashes and versions accompanies every run.

Determinism: runners seed their own generators from the scenario seed,
never from global state, and all reductions inherit the ordered
semantics of the underlying modules, so identical scenarios produce
byte-identical outputs at any thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import central as central_mod
from .action import ActionOptions, minimize_fixed_time, minimize_free_time
from .charts import (
    collinear_three_circle,
    cone_over,
    grid_on,
    kepler_circle,
    kepler_ray,
    uniform_angles,
)
from .ejection import is_minimizing, make_ejection, psi_quadrature
from .errors import NBodyKamError
from .flow import (
    FlowOptions,
    ReconstructOptions,
    collision_map,
    gradient_flow,
    reconstruct_calibrating,
    zero_set,
)
from .reporting import build_manifest, canonical_json, csv_text
from .space import MassSystem, random_reduced
from .spherehj import SphereFunction, SphereSolveOptions, solve_hjh
from .weakkam import WeakKamOptions, busemann, iterate_weak_kam

TaskName = Literal[
    "central-find", "minimizing-test", "phi", "weak-kam", "sphere-hj",
    "flow", "calibrate", "busemann", "ejection",
]

NAMED_SHAPES = ("kepler", "lagrange", "euler")
CIRCLE_CHARTS = ("kepler-circle", "collinear-circle")
LATTICE_CHARTS = ("kepler-ray", "kepler-cone", "collinear-cone")


class SystemModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    masses: list[float] = Field(min_length=2, max_length=6)
    dim: int = Field(default=2, ge=1, le=3)
    kappa: float = Field(default=0.5, gt=0.0, lt=1.0)

    @field_validator("masses")
    @classmethod
    def _positive(cls, v):
        if any(m <= 0.0 for m in v):
            raise ValueError("masses must be positive")
        return v

    def build(self) -> MassSystem:
        return MassSystem(masses=self.masses, dim=self.dim, kappa=self.kappa)


class CentralFindOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    attempts: int = Field(default=8, ge=0, le=256)
    tol: float = Field(default=1e-12, gt=0.0)
    include_catalog: bool = True


class MinimizingTestOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    configurations: list[str] = Field(default=["lagrange", "euler"])
    n_nodes: int = Field(default=256, ge=8, le=4096)
    transverse_starts: int = Field(default=3, ge=1, le=16)
    check_collinear: bool = False

    @field_validator("configurations")
    @classmethod
    def _known(cls, v):
        for name in v:
            if name not in NAMED_SHAPES:
                raise ValueError(f"unknown configuration {name!r}")
        if not v:
            raise ValueError("need at least one configuration")
        return v


class PhiOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: list[list[float]]
    y: list[list[float]]
    t: float | None = Field(default=None, gt=0.0)
    n_nodes: int = Field(default=64, ge=8, le=4096)
    transverse_starts: int = Field(default=0, ge=0, le=16)


class WeakKamTaskOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chart: str = "kepler-ray"
    lam_min: float = Field(default=0.25, gt=0.0)
    lam_max: float = Field(default=4.0, gt=0.0)
    per_octave: int = Field(default=8, ge=1, le=64)
    n_theta: int = Field(default=32, ge=4, le=1024)
    t: float = Field(default=0.2, gt=0.0)
    tol: float = Field(default=1e-9, gt=0.0)
    max_sweeps: int = Field(default=400, ge=1, le=20000)
    inner_nodes: int = Field(default=16, ge=4, le=1024)
    radius_factor: float = Field(default=4.0, gt=0.0)

    @field_validator("chart")
    @classmethod
    def _chart(cls, v):
        if v not in LATTICE_CHARTS:
            raise ValueError(f"chart must be one of {LATTICE_CHARTS}")
        return v


class SphereHjOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chart: str = "kepler-circle"
    n_theta: int = Field(default=128, ge=8, le=2048)
    t: float | None = Field(default=None, gt=0.0)
    n_lambda: int | None = Field(default=None, ge=8, le=2048)
    inner_nodes: int | None = Field(default=None, ge=4, le=1024)
    radius_factor: float = Field(default=3.0, gt=0.0)
    max_sweeps: int = Field(default=400, ge=1, le=20000)

    @field_validator("chart")
    @classmethod
    def _chart(cls, v):
        if v not in CIRCLE_CHARTS:
            raise ValueError(f"chart must be one of {CIRCLE_CHARTS}")
        return v


class FlowTaskOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chart: str = "kepler-circle"
    v_source: str = "cosine"
    n_theta: int = Field(default=64, ge=8, le=2048)
    start: float = 0.7853981633974483
    direction: int = Field(default=1)
    map_samples: int = Field(default=0, ge=0, le=512)
    zero_tol: float = Field(default=1e-6, gt=0.0)
    grad_tol: float = Field(default=1e-8, gt=0.0)
    max_span: float = Field(default=200.0, gt=0.0)
    solve: SphereHjOptions | None = None

    @field_validator("direction")
    @classmethod
    def _dir(cls, v):
        if v not in (-1, 1):
            raise ValueError("direction must be +1 or -1")
        return v

    @field_validator("v_source")
    @classmethod
    def _src(cls, v):
        if v not in ("constant", "cosine", "solve"):
            raise ValueError("v_source must be 'constant', 'cosine' or 'solve'")
        return v


class CalibrateOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chart: str = "kepler-circle"
    v_source: str = "constant"
    n_theta: int = Field(default=64, ge=8, le=2048)
    start: float = 0.0
    rho0: float = Field(default=1.0, gt=0.0)
    t0: float = 0.5
    t1: float = 2.0
    n_steps: int = Field(default=2000, ge=8, le=200000)
    solve: SphereHjOptions | None = None

    @field_validator("v_source")
    @classmethod
    def _src(cls, v):
        if v not in ("constant", "cosine", "solve"):
            raise ValueError("v_source must be 'constant', 'cosine' or 'solve'")
        return v


class BusemannOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu: float | None = Field(default=None, gt=0.0)
    x: list[list[float]] | None = None
    t_list: list[float] = Field(default=[4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 400.0])
    tol: float = Field(default=1e-3, gt=0.0)
    n_nodes: int = Field(default=64, ge=8, le=4096)


class EjectionTaskOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    configuration: str = "kepler"
    shape: list[list[float]] | None = None
    times: list[float] = Field(default=[1.0])
    quadrature_nodes: int = Field(default=2000, ge=16, le=100000)

    @field_validator("configuration")
    @classmethod
    def _known(cls, v):
        if v not in NAMED_SHAPES + ("custom",):
            raise ValueError(f"unknown configuration {v!r}")
        return v


OPTION_MODELS: dict[str, type[BaseModel]] = {
    "central-find": CentralFindOptions,
    "minimizing-test": MinimizingTestOptions,
    "phi": PhiOptions,
    "weak-kam": WeakKamTaskOptions,
    "sphere-hj": SphereHjOptions,
    "flow": FlowTaskOptions,
    "calibrate": CalibrateOptions,
    "busemann": BusemannOptions,
    "ejection": EjectionTaskOptions,
}


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    system: SystemModel
    task: TaskName
    options: dict = Field(default_factory=dict)
    seed: int = 0
    label: str | None = None
    output_dir: str | None = None

    def typed_options(self) -> BaseModel:
        return OPTION_MODELS[self.task](**self.options)


@dataclass
class TaskResult:
    ok: bool
    converged: bool
    task: str
    summary: dict
    outputs: dict[str, str]
    manifest: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "converged": self.converged,
            "task": self.task,
            "summary": self.summary,
            "outputs": self.outputs,
            "manifest": self.manifest,
        }


# -- shape and chart helpers -------------------------------------------------


def named_shape(system: MassSystem, name: str) -> np.ndarray:
    """Catalog shapes by name; Euler is the collinear arrangement."""
    if name == "kepler":
        return central_mod.two_body_central(system).s
    if name == "lagrange":
        return central_mod.equilateral_central(system).s
    if name == "euler":
        return central_mod.collinear_central(system).s
    raise ValueError(f"unknown configuration {name!r}")


def build_circle(system: MassSystem, name: str):
    if name == "kepler-circle":
        return kepler_circle(system)
    if name == "collinear-circle":
        return collinear_three_circle(system)
    raise ValueError(f"unknown circle chart {name!r}")


def build_lattice_chart(system: MassSystem, opts: WeakKamTaskOptions):
    if opts.chart == "kepler-ray":
        return kepler_ray(system, opts.lam_min, opts.lam_max)
    if opts.chart == "kepler-cone":
        return cone_over(kepler_circle(system), opts.lam_min, opts.lam_max)
    if opts.chart == "collinear-cone":
        return cone_over(collinear_three_circle(system), opts.lam_min, opts.lam_max)
    raise ValueError(f"unknown lattice chart {opts.chart!r}")


def _sphere_field(system: MassSystem, chart_name: str, source: str,
                  n_theta: int, solve_opts: SphereHjOptions | None):
    """A SphereFunction from a named source on a named chart."""
    circ = build_circle(system, chart_name)
    ang = uniform_angles(n_theta)
    if source == "cosine":
        return SphereFunction(circ, np.cos(ang))
    if source == "constant":
        psi = circ.psi_values(ang)
        vals = np.where(circ.node_valid(ang), psi, np.nan)
        return SphereFunction(circ, vals)
    if source == "solve":
        so = solve_opts or SphereHjOptions()
        return solve_hjh(system, circ, _sphere_solve_options(
            so.model_copy(update={"chart": chart_name, "n_theta": n_theta})))
    raise ValueError(f"unknown v_source {source!r}")


def _sphere_solve_options(o: SphereHjOptions) -> SphereSolveOptions:
    return SphereSolveOptions(
        n_theta=o.n_theta,
        t=o.t,
        n_lambda=o.n_lambda,
        inner_nodes=o.inner_nodes,
        radius_factor=o.radius_factor,
        max_sweeps=o.max_sweeps,
    )


# -- task runners --------------------------------------------------------------


def _run_central_find(system: MassSystem, o: CentralFindOptions, seed: int):
    rng = np.random.default_rng(seed)
    found: list = []
    if o.include_catalog and system.n_bodies <= 3:
        found.extend(central_mod.catalog(system))
    failures = 0
    for _ in range(o.attempts):
        x0 = random_reduced(system, rng, on_sphere=True)
        try:
            found.append(central_mod.find_central(system, x0, tol=o.tol))
        except NBodyKamError:
            failures += 1
    # dedup by potential value; distinct central values separate well
    unique: list = []
    for c in sorted(found, key=lambda c: c.potential_value):
        if all(abs(c.potential_value - u.potential_value) > 1e-6 * u.potential_value
               for u in unique):
            unique.append(c)
    candidates = unique if unique else None
    for c in unique:
        central_mod.classify_minimal(system, c, candidates=candidates)
    rows = []
    for c in unique:
        rows.append([c.label or "found", c.potential_value, c.multiplier,
                     c.residual, c.is_minimal]
                    + [v for row in c.s for v in row])
    coord_names = [f"s_{i}_{d}" for i in range(system.n_bodies)
                   for d in range(system.dim)]
    outputs = {
        "central.csv": csv_text(
            ["label", "potential", "multiplier", "residual", "is_minimal"]
            + coord_names, rows),
    }
    summary = {
        "n_found": len(unique),
        "n_attempts": o.attempts,
        "n_failures": failures,
        "labels": [c.label or "found" for c in unique],
        "potential_values": [c.potential_value for c in unique],
        "minimal_label": min(unique, key=lambda c: c.potential_value).label
        if unique else None,
    }
    return summary, outputs, bool(unique)


def _embed_planar(system: MassSystem, name: str) -> tuple[MassSystem, np.ndarray]:
    """Three-body named shapes need a planar ambient space."""
    if name == "kepler":
        if system.n_bodies != 2:
            raise ValueError("kepler needs two bodies")
        return system, named_shape(system, name)
    if system.n_bodies != 3:
        raise ValueError(f"{name} needs three bodies")
    if system.dim < 2:
        raise ValueError(f"{name} verdicts need a planar embedding (dim >= 2)")
    return system, named_shape(system, name)


def _run_minimizing_test(system: MassSystem, o: MinimizingTestOptions, seed: int):
    aopts = ActionOptions(n_nodes=o.n_nodes, transverse_starts=o.transverse_starts,
                          seed=seed)
    rows = []
    verdicts = {}
    all_converged = True
    for name in o.configurations:
        sys_, shape = _embed_planar(system, name)
        v = is_minimizing(sys_, shape, opts=aopts,
                          check_collinear=o.check_collinear)
        verdicts[name] = v.to_dict()
        all_converged &= v.converged
        rows.append([name, v.verdict, v.psi, v.phi_value, v.gap,
                     v.error_estimate, v.optimal_time, v.converged])
    outputs = {
        "verdicts.csv": csv_text(
            ["configuration", "verdict", "psi", "phi", "gap",
             "error_estimate", "optimal_time", "converged"], rows),
    }
    summary = {"verdicts": verdicts}
    return summary, outputs, all_converged


def _run_phi(system: MassSystem, o: PhiOptions, seed: int):
    x = np.asarray(o.x, dtype=float)
    y = np.asarray(o.y, dtype=float)
    aopts = ActionOptions(n_nodes=o.n_nodes, transverse_starts=o.transverse_starts,
                          seed=seed)
    if o.t is not None:
        res = minimize_fixed_time(system, x, y, o.t, aopts)
    else:
        res = minimize_free_time(system, x, y, aopts)
    summary = {
        "value": res.value,
        "optimal_time": res.optimal_time,
        "error_estimate": res.error_estimate,
        "converged": res.converged,
        "at_bracket_boundary": res.at_bracket_boundary,
        "fixed_time": o.t,
    }
    outputs = {}
    if res.path is not None:
        coord_names = [f"q_{i}_{d}" for i in range(system.n_bodies)
                       for d in range(system.dim)]
        rows = [[t] + [v for row in cfg for v in row]
                for t, cfg in zip(res.path.times, res.path.coords)]
        outputs["path.csv"] = csv_text(["t"] + coord_names, rows)
    return summary, outputs, bool(res.converged)


def _run_weak_kam(system: MassSystem, o: WeakKamTaskOptions, seed: int):
    chart = build_lattice_chart(system, o)
    u0 = grid_on(chart, per_octave=o.per_octave, n_theta=o.n_theta)
    wk = WeakKamOptions(inner_nodes=o.inner_nodes, radius_factor=o.radius_factor)
    it = iterate_weak_kam(system, u0, t=o.t, tol=o.tol,
                          max_sweeps=o.max_sweeps, opts=wk)
    prof_rows = list(it.grid.to_rows())
    hist_rows = [
        [k + 1, it.residual_history[k], it.drift_history[k],
         it.min_increment_history[k], it.boundary_fraction_history[k]]
        for k in range(len(it.residual_history))
    ]
    outputs = {
        "profile.csv": csv_text(it.grid.column_names(), prof_rows),
        "residuals.csv": csv_text(
            ["sweep", "residual", "drift", "min_increment",
             "boundary_argmin_fraction"], hist_rows),
    }
    summary = it.to_dict()
    return summary, outputs, bool(it.converged)


def _run_sphere_hj(system: MassSystem, o: SphereHjOptions, seed: int):
    circ = build_circle(system, o.chart)
    v = solve_hjh(system, circ, _sphere_solve_options(o))
    outputs = {"sphere.csv": csv_text(v.column_names(), list(v.to_rows()))}
    solver = v.meta.get("solver", {})
    summary = {
        "chart": o.chart,
        "n_theta": o.n_theta,
        "t_step": v.meta.get("t_step"),
        "max_masked_residual": v.meta.get("max_masked_residual"),
        "residual_tolerance": v.meta.get("residual_tolerance"),
        "bound_check": v.meta.get("bound_check"),
        "viscosity_summary": v.meta.get("viscosity_summary"),
        "iterations": solver.get("iterations"),
        "converged": solver.get("converged"),
    }
    return summary, outputs, bool(solver.get("converged", False))


def _run_flow(system: MassSystem, o: FlowTaskOptions, seed: int):
    v = _sphere_field(system, o.chart, o.v_source, o.n_theta, o.solve)
    fopts = FlowOptions(grad_tol=o.grad_tol, max_span=o.max_span)
    traj = gradient_flow(v, o.start, direction=o.direction, opts=fopts)
    zs = zero_set(v, tol=o.zero_tol)
    outputs = {
        "trajectory.csv": csv_text(traj.column_names(), list(traj.to_rows())),
    }
    summary = {
        "trajectory": traj.to_dict(),
        "zero_set": zs.to_dict(),
    }
    converged = traj.terminal != "step-limit"
    if o.map_samples > 0:
        samples = uniform_angles(o.map_samples) + 0.5 * np.pi / o.map_samples
        report = collision_map(v, [float(s) for s in samples], opts=fopts)
        summary["collision_map"] = report.to_dict()
        outputs["basins.csv"] = csv_text(
            ["sample", "label"],
            [[s, l] for s, l in zip(report.samples, report.labels)],
        )
    return summary, outputs, converged


def _run_calibrate(system: MassSystem, o: CalibrateOptions, seed: int):
    v = _sphere_field(system, o.chart, o.v_source, o.n_theta, o.solve)
    rec = reconstruct_calibrating(
        system, v, o.start, o.rho0, (o.t0, o.t1),
        ReconstructOptions(n_steps=o.n_steps),
    )
    outputs = {
        "reconstruction.csv": csv_text(rec.column_names(), list(rec.to_rows())),
    }
    summary = rec.to_dict()
    ok = (rec.times.size > 1
          and np.isfinite(rec.newton_residual)
          and np.isfinite(rec.energy_residual))
    return summary, outputs, bool(ok)


def _run_busemann(system: MassSystem, o: BusemannOptions, seed: int):
    cands = central_mod.catalog(system)
    s_min = min(cands, key=lambda c: c.potential_value).s
    if o.x is not None:
        x = np.asarray(o.x, dtype=float)
    elif o.mu is not None:
        x = o.mu * s_min
    else:
        raise ValueError("busemann needs either mu or an explicit x")
    aopts = ActionOptions(n_nodes=o.n_nodes)
    value, hist = busemann(system, s_min, x, o.t_list, tol=o.tol,
                           action_opts=aopts)
    rows = [[t, g, d] for t, g, d in zip(
        hist["t_list"], hist["values"], [float("nan")] + list(hist["diffs"]))]
    outputs = {"busemann.csv": csv_text(["t", "g", "diff"], rows)}
    summary = {
        "value": value,
        "converged": hist["converged"],
        "psi": hist["psi"],
        "spans_two_decades": hist["spans_two_decades"],
        "n_points": len(hist["values"]),
    }
    return summary, outputs, bool(hist["converged"])


def _run_ejection(system: MassSystem, o: EjectionTaskOptions, seed: int):
    if o.configuration == "custom":
        if o.shape is None:
            raise ValueError("custom configuration needs an explicit shape")
        shape = np.asarray(o.shape, dtype=float)
    else:
        _, shape = _embed_planar(system, o.configuration)
    ej = make_ejection(system, shape)
    psi_quad = psi_quadrature(system, shape, n_nodes=o.quadrature_nodes)
    rows = []
    coord_names = [f"q_{i}_{d}" for i in range(system.n_bodies)
                   for d in range(system.dim)]
    for t in o.times:
        cfg = ej.position(t)
        lam = ej.alpha * t**ej.exponent
        rows.append([t, lam] + [v for row in cfg for v in row])
    outputs = {"ejection.csv": csv_text(["t", "radius"] + coord_names, rows)}
    summary = {
        "configuration": o.configuration,
        "exponent": ej.exponent,
        "alpha": ej.alpha,
        "t_unit": ej.t_unit,
        "psi": ej.psi,
        "psi_quadrature": psi_quad,
        "potential_value": ej.potential_value,
    }
    return summary, outputs, True


RUNNERS = {
    "central-find": _run_central_find,
    "minimizing-test": _run_minimizing_test,
    "phi": _run_phi,
    "weak-kam": _run_weak_kam,
    "sphere-hj": _run_sphere_hj,
    "flow": _run_flow,
    "calibrate": _run_calibrate,
    "busemann": _run_busemann,
    "ejection": _run_ejection,
}


def run_scenario(scenario: Scenario) -> TaskResult:
    """Validate options, dispatch, and assemble outputs plus manifest."""
    typed = scenario.typed_options()
    system = scenario.system.build()
    t0 = time.monotonic()
    summary, outputs, converged = RUNNERS[scenario.task](
        system, typed, scenario.seed)
    wall = time.monotonic() - t0
    scen_dict = scenario.model_dump()
    outputs = dict(outputs)
    outputs["summary.json"] = canonical_json(
        {"task": scenario.task, "converged": converged, "summary": summary})
    manifest = build_manifest(scen_dict, outputs, wall)
    return TaskResult(
        ok=True,
        converged=bool(converged),
        task=scenario.task,
        summary=summary,
        outputs=outputs,
        manifest=manifest,
    )
