import json

import numpy as np
import pytest
from pydantic import ValidationError

from nbodykam.scenarios import (
    OPTION_MODELS,
    Scenario,
    named_shape,
    run_scenario,
)
from nbodykam.space import MassSystem, moment_of_inertia


def scenario(task, options=None, masses=(1.0, 1.0), dim=2, kappa=0.5, seed=0):
    return Scenario(
        system={"masses": list(masses), "dim": dim, "kappa": kappa},
        task=task,
        options=options or {},
        seed=seed,
    )


def test_system_model_validation():
    with pytest.raises(ValidationError):
        scenario("phi", masses=(1.0,))
    with pytest.raises(ValidationError):
        scenario("phi", masses=(1.0, -1.0))
    with pytest.raises(ValidationError):
        scenario("phi", kappa=1.0)
    with pytest.raises(ValidationError):
        Scenario(system={"masses": [1, 1]}, task="not-a-task")


def test_option_models_forbid_unknown_fields():
    for task, model in OPTION_MODELS.items():
        with pytest.raises(ValidationError):
            model(definitely_not_a_field=1)


def test_named_shapes(kepler2, three2d):
    s = named_shape(kepler2, "kepler")
    assert abs(moment_of_inertia(kepler2, s) - 1.0) < 1e-12
    for name in ("lagrange", "euler"):
        s = named_shape(three2d, name)
        assert abs(moment_of_inertia(three2d, s) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        named_shape(kepler2, "lagrange")


def test_ejection_task_summary_and_csv():
    r = run_scenario(scenario("ejection", {"configuration": "kepler",
                                           "times": [0.5, 1.0]}))
    assert r.ok and r.converged
    for key in ("exponent", "alpha", "t_unit", "psi", "psi_quadrature"):
        assert key in r.summary
    assert r.summary["exponent"] == pytest.approx(1.0 / 1.5)
    assert abs(r.summary["psi"] - r.summary["psi_quadrature"]) < 1e-5
    lines = r.outputs["ejection.csv"].splitlines()
    assert lines[0].startswith("t,radius,q_0_0")
    assert len(lines) == 3


def test_ejection_custom_requires_shape():
    with pytest.raises(ValueError):
        run_scenario(scenario("ejection", {"configuration": "custom"}))


def test_phi_task_fixed_and_free():
    x = [[1.0, 0.0], [-1.0, 0.0]]
    y = [[2.0, 0.0], [-2.0, 0.0]]
    fixed = run_scenario(scenario("phi", {"x": x, "y": y, "t": 1.0,
                                          "n_nodes": 32}))
    free = run_scenario(scenario("phi", {"x": x, "y": y, "n_nodes": 32}))
    assert fixed.summary["fixed_time"] == 1.0
    assert free.summary["fixed_time"] is None
    assert free.summary["value"] <= fixed.summary["value"] + 1e-9
    assert "path.csv" in fixed.outputs
    header = fixed.outputs["path.csv"].splitlines()[0]
    assert header == "t,q_0_0,q_0_1,q_1_0,q_1_1"


def test_central_find_task(three2d):
    r = run_scenario(scenario("central-find", {"attempts": 2},
                              masses=(1.0, 1.0, 1.0)))
    assert r.converged
    assert r.summary["minimal_label"] == "equilateral"
    assert r.summary["n_found"] >= 2
    lines = r.outputs["central.csv"].splitlines()
    assert len(lines) == r.summary["n_found"] + 1


def test_minimizing_test_task_shape():
    r = run_scenario(scenario(
        "minimizing-test",
        {"configurations": ["lagrange"], "n_nodes": 48,
         "transverse_starts": 1},
        masses=(1.0, 1.0, 1.0)))
    v = r.summary["verdicts"]["lagrange"]
    for key in ("psi", "phi_value", "gap", "verdict", "is_minimizing"):
        assert key in v
    assert "verdicts.csv" in r.outputs


def test_weak_kam_task_outputs():
    r = run_scenario(scenario("weak-kam", {
        "chart": "kepler-ray", "per_octave": 3, "t": 0.2,
        "inner_nodes": 8, "max_sweeps": 60}))
    assert r.converged
    assert set(r.outputs) == {"profile.csv", "residuals.csv", "summary.json"}
    res_lines = r.outputs["residuals.csv"].splitlines()
    assert res_lines[0] == ("sweep,residual,drift,min_increment,"
                            "boundary_argmin_fraction")
    assert len(res_lines) == r.summary["iterations"] + 1


def test_sphere_hj_task_summary():
    r = run_scenario(scenario("sphere-hj", {"chart": "kepler-circle",
                                            "n_theta": 16}))
    assert r.converged
    assert r.summary["bound_check"]["n_violations"] == 0
    assert "sphere.csv" in r.outputs


def test_flow_task_with_map(three1d):
    r = run_scenario(scenario(
        "flow",
        {"chart": "collinear-circle", "v_source": "constant",
         "n_theta": 96, "start": 0.9, "map_samples": 8},
        masses=(1.0, 1.0, 1.0), dim=1))
    assert "trajectory.csv" in r.outputs
    assert "basins.csv" in r.outputs
    assert "collision_map" in r.summary


def test_calibrate_task():
    r = run_scenario(scenario("calibrate", {
        "v_source": "constant", "n_theta": 32, "t0": 0.5, "t1": 1.5,
        "n_steps": 200}))
    assert r.converged
    assert r.summary["energy_residual"] <= 1e-10
    lines = r.outputs["reconstruction.csv"].splitlines()
    assert lines[0] == "t,rho,theta,tau,v,energy_residual"
    assert len(lines) == 202


def test_busemann_task_requires_target():
    with pytest.raises(ValueError):
        run_scenario(scenario("busemann", {"t_list": [2.0, 4.0]}))


def test_run_scenario_outputs_are_deterministic():
    sc = scenario("weak-kam", {"chart": "kepler-ray", "per_octave": 3,
                               "t": 0.2, "inner_nodes": 8, "max_sweeps": 60})
    a = run_scenario(sc)
    b = run_scenario(sc)
    assert a.outputs == b.outputs
    assert a.manifest["inputs_sha256"] == b.manifest["inputs_sha256"]
    for name in a.outputs:
        assert (a.manifest["outputs"][name]["sha256"]
                == b.manifest["outputs"][name]["sha256"])
    # wall time is the one intentionally non-reproducible field
    assert set(a.manifest) == set(b.manifest)


def test_summary_json_is_canonical():
    r = run_scenario(scenario("ejection", {}))
    text = r.outputs["summary.json"]
    doc = json.loads(text)
    assert doc["task"] == "ejection"
    assert json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n" == text
