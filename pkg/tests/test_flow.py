import math

import numpy as np
import pytest

from nbodykam.charts import (
    collinear_three_circle,
    kepler_circle,
    uniform_angles,
)
from nbodykam.errors import ChartRangeError
from nbodykam.flow import (
    FlowOptions,
    ReconstructOptions,
    collision_map,
    gradient_flow,
    reconstruct_calibrating,
    zero_set,
)
from nbodykam.space import MassSystem, potential
from nbodykam.spherehj import SphereFunction

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="module")
def kepler():
    return MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)


@pytest.fixture(scope="module")
def collinear():
    return MassSystem(masses=[1.0, 1.0, 1.0], dim=1, kappa=0.5)


def _cosine_field(kepler, n=64):
    chart = kepler_circle(kepler)
    ang = uniform_angles(n)
    return SphereFunction(chart, np.cos(ang))


def _collinear_psi_field(collinear, n=96, sign=1.0):
    chart = collinear_three_circle(collinear)
    ang = uniform_angles(n)
    vals = np.where(chart.node_valid(ang), sign * chart.psi_values(ang), np.nan)
    return SphereFunction(chart, vals)


# -- zero set ----------------------------------------------------------------


def test_zero_set_of_cosine(kepler):
    v = _cosine_field(kepler)
    zs = zero_set(v, tol=1e-3)
    assert not zs.degenerate
    assert len(zs) == 2
    pts = sorted(zs.points)
    assert pts[0] == pytest.approx(0.0, abs=1e-2)
    assert pts[1] == pytest.approx(math.pi, abs=1e-2)
    # |v| = 1 at the critical points but psi = sqrt(2U) is not 1 here:
    # the discrepancies report that honestly
    assert all(abs(d) > 0.1 for d in zs.discrepancies)


def test_zero_set_parabolic_refinement_beats_grid(kepler):
    chart = kepler_circle(kepler)
    n = 64
    ang = uniform_angles(n)
    shift = 0.37 * (TWO_PI / n)  # put the true maximum off-node
    v = SphereFunction(chart, np.cos(ang - shift))
    # node gradients near an off-node critical point are O(h/2), so the
    # qualification tolerance must sit above that scale
    zs = zero_set(v, tol=0.06)
    best = min(abs((p - shift + math.pi) % TWO_PI - math.pi)
               for p in zs.points)
    assert best < 0.1 * (TWO_PI / n)


def test_zero_set_degenerate_for_constant(kepler):
    chart = kepler_circle(kepler)
    v = SphereFunction(chart, np.full(32, 1.25))
    zs = zero_set(v)
    assert zs.degenerate
    assert len(zs.points) > 16


# -- gradient flow -----------------------------------------------------------


def test_flow_ascent_and_descent_of_cosine(kepler):
    v = _cosine_field(kepler)
    up = gradient_flow(v, math.pi / 4.0, direction=1)
    assert up.terminal == "converged-to-critical"
    assert up.terminal_datum == pytest.approx(0.0, abs=1e-2)
    down = gradient_flow(v, math.pi / 4.0, direction=-1)
    assert down.terminal == "converged-to-critical"
    assert down.terminal_datum == pytest.approx(math.pi, abs=1e-2)
    # v is monotone along both runs
    assert up.monotone_defect <= 1e-10
    assert down.monotone_defect <= 1e-10
    assert up.v_values[-1] > up.v_values[0]
    assert down.v_values[-1] < down.v_values[0]


def test_flow_stationary_start(kepler):
    v = _cosine_field(kepler)
    traj = gradient_flow(v, 0.0, direction=1)
    assert traj.taus.size == 1
    assert traj.terminal == "converged-to-critical"
    assert traj.meta.get("stationary_start")


def test_flow_rows_match_columns(kepler):
    v = _cosine_field(kepler)
    traj = gradient_flow(v, 1.0, direction=1)
    rows = list(traj.to_rows())
    assert len(rows) == traj.taus.size
    assert len(rows[0]) == len(traj.column_names())
    d = traj.to_dict()
    assert d["terminal"] == traj.terminal


def test_flow_leaves_masked_chart(collinear):
    """With the default margins the lattice mask ends before the
    collision floor, so ascent toward a singularity exits the arc."""
    v = _collinear_psi_field(collinear)
    traj = gradient_flow(v, 0.9, direction=1, opts=FlowOptions(max_span=50.0))
    assert traj.terminal == "left-chart"
    assert traj.monotone_defect <= 1e-10


def test_flow_reaches_collision_margin(collinear):
    """A floor above the arc-end distance flips the terminal to the
    collision event, with the component index as datum."""
    v = _collinear_psi_field(collinear)
    traj = gradient_flow(v, 0.9, direction=1,
                         opts=FlowOptions(max_span=50.0,
                                          collision_fraction=0.3))
    assert traj.terminal == "reached-collision-margin"
    assert traj.terminal_datum == 0
    assert traj.monotone_defect <= 1e-10


def test_flow_rejects_bad_inputs(kepler, collinear):
    v = _cosine_field(kepler)
    with pytest.raises(ValueError):
        gradient_flow(v, 1.0, direction=2)
    masked = _collinear_psi_field(collinear)
    gap = collinear_three_circle(collinear).collision_angles[0]
    with pytest.raises(ChartRangeError):
        gradient_flow(masked, gap, direction=1)


# -- collision map -----------------------------------------------------------


def test_collision_map_partitions_collinear_circle(collinear):
    v = _collinear_psi_field(collinear)
    samples = [float(a) for a in np.linspace(0.05, TWO_PI - 0.05, 24)]
    rep = collision_map(v, samples, opts=FlowOptions(max_span=50.0))
    assert rep.all_components_hit
    assert rep.components_hit == [0, 1, 2, 3, 4, 5]
    assert all(isinstance(l, int) for l in rep.labels)
    # basins are arcs: cyclically, each label forms one contiguous run, so
    # the number of cyclic transitions equals the number of distinct labels
    cyc = rep.labels + rep.labels[:1]
    runs = sum(1 for a, b in zip(cyc, cyc[1:]) if a != b)
    assert runs == len(set(rep.labels))
    assert any(reason == "outside valid arcs" for _, reason in rep.excluded)
    for b in rep.boundaries:
        assert b["gap"] <= (samples[1] - samples[0]) / 2**7
        assert b["lower_label"] != b["upper_label"]


def test_collision_map_descent_finds_no_collisions(collinear):
    v = _collinear_psi_field(collinear, sign=-1.0)
    samples = [0.9, 2.0, 3.0, 4.1]
    rep = collision_map(v, samples, opts=FlowOptions(max_span=50.0))
    assert rep.components_hit == []
    assert not rep.all_components_hit
    assert all(l == "critical" for l in rep.labels)


# -- calibrating reconstruction ------------------------------------------------


def test_reconstruction_matches_closed_form(kepler):
    """With constant v = psi the radial equation integrates exactly:
    rho^(1+k) grows linearly with rate (1+k) sqrt(2U)."""
    chart = kepler_circle(kepler)
    ang = uniform_angles(32)
    psi = chart.psi_values(ang)
    v = SphereFunction(chart, psi.copy())
    rec = reconstruct_calibrating(kepler, v, 0.7, 1.0, (0.5, 2.0),
                                  ReconstructOptions(n_steps=1500))
    assert not rec.truncated
    kap = kepler.kappa
    two_u = 2.0 * float(chart.potential_values(np.array([0.7]))[0])
    expect = (1.0 + (1.0 + kap) * math.sqrt(two_u)
              * (rec.times - 0.5)) ** (1.0 / (1.0 + kap))
    assert np.max(np.abs(rec.rho - expect)) <= 1e-10
    assert rec.newton_residual <= 1e-6
    assert rec.energy_residual <= 1e-12
    assert rec.angular_speed_max <= 1e-14  # homothetic: the shape freezes
    assert rec.v_monotone_defect == 0.0


def test_reconstruction_nonconstant_solution(kepler):
    chart = kepler_circle(kepler)
    n = 128
    ang = uniform_angles(n)
    psi = float(chart.psi_values(ang)[0])
    v = SphereFunction(chart, psi * np.sin(0.5 * ang))
    rec = reconstruct_calibrating(kepler, v, 2.0, 1.0, (0.5, 1.5),
                                  ReconstructOptions(n_steps=3000))
    assert not rec.truncated
    assert rec.energy_residual <= 1e-6
    assert rec.v_monotone_defect <= 1e-10
    assert rec.angular_speed_max > 1e-3  # genuinely non-homothetic
    rows = list(rec.to_rows())
    assert len(rows) == rec.times.size
    assert len(rows[0]) == len(rec.column_names())


def test_reconstruction_collapses_to_total_collision(kepler):
    """Constant v = -psi drives rho to zero in finite time."""
    chart = kepler_circle(kepler)
    ang = uniform_angles(32)
    v = SphereFunction(chart, -chart.psi_values(ang))
    rec = reconstruct_calibrating(kepler, v, 0.3, 0.5, (0.0, 10.0),
                                  ReconstructOptions(n_steps=4000))
    assert rec.truncated
    assert rec.event == "total-collision"
    # collapse time for rho0 = 0.5: rho^(3/2) hits zero at t = rho0^(3/2)/(1.5 sqrt(2U))
    two_u = 2.0 * float(chart.potential_values(np.array([0.3]))[0])
    t_star = 0.5**1.5 / (1.5 * math.sqrt(two_u))
    assert rec.times[-1] == pytest.approx(t_star, rel=1e-2)


def test_reconstruction_energy_uses_true_potential(kepler):
    chart = kepler_circle(kepler)
    ang = uniform_angles(32)
    v = SphereFunction(chart, chart.psi_values(ang))
    rec = reconstruct_calibrating(kepler, v, 0.0, 1.0, (0.5, 1.0),
                                  ReconstructOptions(n_steps=500))
    u_at_end = potential(kepler, rec.gamma[-1])
    expect = float(chart.potential_values(np.array([0.0]))[0]) / rec.rho[-1]
    assert u_at_end == pytest.approx(expect, rel=1e-12)


def test_reconstruction_rejects_bad_span(kepler):
    v = _cosine_field(kepler)
    with pytest.raises(ValueError):
        reconstruct_calibrating(kepler, v, 0.7, 1.0, (1.0, 0.5))
    with pytest.raises(ValueError):
        reconstruct_calibrating(kepler, v, 0.7, -1.0, (0.5, 1.0))
