import math

import numpy as np
import pytest

from nbodykam.action import ActionOptions
from nbodykam.central import catalog
from nbodykam.charts import (
    cone_over,
    grid_on,
    kepler_circle,
    kepler_ray,
    uniform_angles,
)
from nbodykam.errors import ChartRangeError
from nbodykam.weakkam import (
    WeakKamOptions,
    busemann,
    conjugation_check,
    group_law_defect,
    homogenize,
    iterate_homogeneous,
    iterate_weak_kam,
    lax_oleinik_step,
    normalize_h0,
    scaling_action,
    scaling_invariance_defect,
    search_radius,
    subsolution_check,
)

FAST = WeakKamOptions(inner_nodes=10, radius_factor=3.0)


@pytest.fixture(scope="module")
def kepler():
    from nbodykam.space import MassSystem

    return MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)


@pytest.fixture(scope="module")
def ray_iterate(kepler):
    """Converged iterate on a short radial lattice, reused across tests."""
    u0 = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    return iterate_weak_kam(kepler, u0, t=0.2, tol=1e-10, max_sweeps=100,
                            opts=FAST)


def test_search_radius_grows_with_time(kepler):
    r1 = search_radius(kepler, 0.1, 4.0)
    r2 = search_radius(kepler, 0.4, 4.0)
    assert 0.0 < r1 < r2


def test_step_monotone(kepler):
    u = grid_on(kepler_ray(kepler, 0.5, 2.0), per_octave=3)
    lam = u.axes[0]
    w = u.with_values(np.sin(3.0 * lam) * 0.1)
    u = u.with_values(w.values - 0.2)  # u <= w everywhere
    tu = lax_oleinik_step(kepler, u, 0.2, FAST)
    tw = lax_oleinik_step(kepler, w, 0.2, FAST)
    sel = np.isfinite(tu.values) & np.isfinite(tw.values)
    assert sel.any()
    assert np.all(tu.values[sel] <= tw.values[sel])


def test_step_commutes_with_shift(kepler):
    u = grid_on(kepler_ray(kepler, 0.5, 2.0), per_octave=3)
    u = u.with_values(0.3 * u.axes[0])
    tu = lax_oleinik_step(kepler, u, 0.2, FAST)
    tshift = lax_oleinik_step(kepler, u.with_values(u.values + 5.0), 0.2, FAST)
    sel = np.isfinite(tu.values) & np.isfinite(tshift.values)
    assert np.max(np.abs(tshift.values[sel] - tu.values[sel] - 5.0)) <= 1e-12


def test_step_from_zero_is_nonnegative(kepler):
    u0 = grid_on(kepler_ray(kepler, 0.5, 2.0), per_octave=3)
    tu = lax_oleinik_step(kepler, u0, 0.2, FAST)
    sel = np.isfinite(tu.values)
    assert np.all(tu.values[sel] >= 0.0)


def test_iterate_converges_and_reports(ray_iterate):
    it = ray_iterate
    assert it.converged
    assert it.residual <= 1e-10
    assert len(it.residual_history) == it.iterations
    # from the zero seed every sweep moves the profile one way
    assert min(it.min_increment_history) >= -1e-12
    d = it.to_dict()
    for key in ("residual", "iterations", "converged", "t_step"):
        assert key in d
    # the pin gauge holds: the profile vanishes at the pin node
    assert it.grid.values[it.pin_index] == 0.0


def test_iterate_profile_exponent(kepler):
    """Octave increments of the converged profile scale like lam^(1-kappa)."""
    chart = kepler_ray(kepler, 0.1, 4.0)
    q = 6
    it = iterate_weak_kam(kepler, grid_on(chart, per_octave=q), t=0.1,
                          tol=1e-10, max_sweeps=250,
                          opts=WeakKamOptions(inner_nodes=12))
    assert it.converged
    lam = it.grid.axes[0]
    v = it.grid.values
    dv = v[q:] - v[:-q]  # gauge drops out of differences
    base = lam[:-q]
    keep = (base >= lam[0] * 2.0) & (base * 2.0 <= lam[-1] / 2.0)
    slope = np.polyfit(np.log(base[keep]), np.log(np.abs(dv[keep])), 1)[0]
    assert slope == pytest.approx(0.5, abs=0.02)


def test_iterate_fixed_point_defect_is_quantization_limited(kepler, ray_iterate):
    """Re-stepping the converged profile moves it by at most the lattice
    quantization budget, far below the profile scale (the inner solver
    error alone is orders smaller and is not the binding term)."""
    it = ray_iterate
    stepped = lax_oleinik_step(kepler, it.raw_grid, it.t_step, FAST)
    sel = np.isfinite(stepped.values) & np.isfinite(it.raw_grid.values)
    defect = np.max(np.abs(stepped.values - it.raw_grid.values)[sel])
    scale = np.max(np.abs(it.grid.values))
    lam = it.grid.axes[0]
    dlam = np.max(np.diff(lam))
    quantization = dlam**2 / (2.0 * it.t_step)
    assert defect <= 2.0 * quantization
    assert defect <= 0.05 * scale


def test_scaling_action_invariance(kepler):
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    lam = u.axes[0]
    u = u.with_values(lam**0.5)
    for eta in (0.5, 2.0):
        assert scaling_invariance_defect(u, eta) <= 1e-12


def test_scaling_action_rejects_circles(kepler):
    g = grid_on(kepler_circle(kepler), n_theta=16)
    with pytest.raises(ChartRangeError):
        scaling_action(g, 2.0)


def test_group_law(kepler):
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    u = u.with_values(np.log1p(u.axes[0]))
    assert group_law_defect(u, 2.0, 2.0) <= 1e-12
    assert group_law_defect(u, 0.5, 2.0) <= 1e-12


def test_normalize_h0_exact_for_power_law(kepler):
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    lam = u.axes[0]
    u = u.with_values(3.0 + 2.0 * lam**0.5)
    out, gauge = normalize_h0(u)
    assert gauge == pytest.approx(3.0, abs=1e-12)
    assert np.max(np.abs(out.values - 2.0 * lam**0.5)) <= 1e-12


def test_homogenize_projects_onto_scaling_invariants(kepler):
    u = grid_on(kepler_ray(kepler, 0.125, 8.0), per_octave=4)
    lam = u.axes[0]
    bump = np.where(lam > 4.0, 5.0 * (lam - 4.0) ** 2, 0.0)
    u = u.with_values(-1.7 * lam**0.5 + bump)
    h = homogenize(u)
    for eta in (0.5, 2.0):
        assert scaling_invariance_defect(h, eta, trim_octaves=1.0) <= 1e-12
    # the bump is gone: the orbit minimum is the homogeneous part
    inner = (lam >= 0.25) & (lam <= 4.0)
    assert np.max(np.abs(h.values[inner] + 1.7 * lam[inner] ** 0.5)) <= 1e-9


def test_subsolution_check_accepts_exact_solution(kepler):
    """The homothetic value function -psi lam^(1-kappa) is calibrated, so
    the inequality is tight on ray pairs and must never be exceeded."""
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    lam = u.axes[0]
    psi = float(kepler_circle(kepler).psi_values(np.array([0.0]))[0])
    u = u.with_values(-psi * lam**0.5)
    pairs = [([0.25], [4.0]), ([0.5], [2.0]), ([1.0], [3.0]), ([2.0], [0.5])]
    rep = subsolution_check(kepler, u, pairs)
    assert rep["n_pairs"] == 4
    assert rep["n_violations"] == 0


def test_subsolution_check_accepts_zero(kepler):
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    rep = subsolution_check(kepler, u, [([0.5], [2.0]), ([2.0], [0.5])])
    assert rep["n_violations"] == 0
    assert rep["worst_excess"] < 0.0


def test_subsolution_check_interior_of_iterate(kepler, ray_iterate):
    """Away from the lattice edges the converged iterate is a numerical
    subsolution; pairs touching the edge octaves pick up the truncation
    distortion and are excluded on purpose."""
    pairs = [([0.5], [1.0]), ([1.0], [2.0]), ([2.0], [0.5])]
    rep = subsolution_check(kepler, ray_iterate.grid, pairs)
    assert rep["n_pairs"] == 3
    assert rep["n_violations"] == 0


def test_subsolution_check_flags_steep_profiles(kepler):
    u = grid_on(kepler_ray(kepler, 0.25, 4.0), per_octave=4)
    u = u.with_values(100.0 * u.axes[0])
    rep = subsolution_check(kepler, u, [([0.25], [4.0]), ([4.0], [0.25])])
    assert rep["n_violations"] >= 1
    assert rep["worst_excess"] > 0.0


def test_conjugation_check(kepler, ray_iterate):
    disc, details = conjugation_check(kepler, ray_iterate.grid, t=0.2, lam=2.0,
                                      opts=FAST, return_details=True)
    budget = 5.0 * (details["left_inner_error"] + details["right_inner_error"])
    assert disc <= budget
    assert details["n_overlap"] > 0


def test_busemann_matches_ray_value(kepler):
    """On the minimizing ray the horizon limit is the calibrated deficit."""
    s_min = catalog(kepler)[0].s
    mu = 2.0
    val, hist = busemann(kepler, s_min, mu * s_min, [4.0, 8.0, 16.0, 32.0],
                         tol=0.05)
    psi = hist["psi"]
    assert hist["converged"]
    assert val == pytest.approx(-(mu**0.5) * psi, abs=0.05)
    assert not hist["spans_two_decades"]


def test_busemann_rejects_bad_ray_times(kepler):
    s_min = catalog(kepler)[0].s
    with pytest.raises(ValueError):
        busemann(kepler, s_min, s_min, [4.0])
    with pytest.raises(ValueError):
        busemann(kepler, s_min, s_min, [4.0, 2.0])


def test_homogeneous_solver_on_kepler_circle(kepler):
    circ = kepler_circle(kepler)
    psi = float(circ.psi_values(np.array([0.0]))[0])
    it = iterate_homogeneous(kepler, circ, t=0.3, n_theta=16, n_lambda=32,
                             opts=WeakKamOptions(inner_nodes=10,
                                                 radius_factor=3.0,
                                                 richardson=False))
    assert it.converged
    v = it.values
    # rotation invariance is inherited exactly, not just approximately
    assert float(np.max(v) - np.min(v)) == 0.0
    assert float(np.mean(v)) == pytest.approx(psi, rel=1e-3)
    assert it.edge_fraction == 0.0
    assert min(it.min_increment_history) >= -1e-12
    d = it.to_dict()
    for key in ("residual", "iterations", "converged", "t_step",
                "edge_fraction"):
        assert key in d


def test_homogeneous_solver_seeded_with_truth(kepler):
    """Seeding the exact solution: one sweep moves it only by the
    lambda-grid quantization, which shrinks as the grid refines."""
    circ = kepler_circle(kepler)
    psi = float(circ.psi_values(np.array([0.0]))[0])
    opts = WeakKamOptions(inner_nodes=10, radius_factor=3.0, richardson=False)
    residuals = []
    for n_lambda in (32, 64):
        it = iterate_homogeneous(kepler, circ, t=0.3, n_theta=16,
                                 n_lambda=n_lambda, opts=opts,
                                 seed_values=np.full(16, psi), max_sweeps=1)
        residuals.append(it.residual)
    assert residuals[0] <= 1e-4 * max(1.0, psi)
    assert residuals[1] < residuals[0]


def test_homogeneous_solver_rejects_lattices(kepler):
    cone = cone_over(kepler_circle(kepler), 0.5, 2.0)
    with pytest.raises((TypeError, AttributeError, ChartRangeError, ValueError)):
        iterate_homogeneous(kepler, cone, t=0.3, n_theta=16)


def test_iterate_weak_kam_on_cone(kepler):
    chart = cone_over(kepler_circle(kepler), 0.5, 2.0)
    u0 = grid_on(chart, per_octave=3, n_theta=8)
    it = iterate_weak_kam(kepler, u0, t=0.2, tol=1e-9, max_sweeps=80,
                          opts=FAST)
    assert it.converged
    # rotation invariance: every angular slice carries the same profile
    v = it.grid.values
    assert np.max(np.abs(v - v[:, :1])) <= 1e-9
