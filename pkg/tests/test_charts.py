import math

import numpy as np
import pytest

from nbodykam.charts import (
    NODE_COLLISION_MARGIN,
    TWO_PI,
    GridFunction,
    collinear_three_circle,
    cone_over,
    geometric_nodes,
    grid_on,
    kepler_circle,
    kepler_ray,
    mass_orthonormal_frame,
    uniform_angles,
)
from nbodykam.errors import ChartRangeError
from nbodykam.space import (
    mass_inner,
    moment_of_inertia,
    potential,
    project_cm,
)


def test_geometric_nodes_hit_one_exactly():
    nodes = geometric_nodes(0.3, 3.0, 4)
    assert np.any(nodes == 1.0)
    ratios = nodes[1:] / nodes[:-1]
    assert np.allclose(ratios, 2.0 ** (1.0 / 4.0), rtol=1e-14)
    assert nodes[0] >= 0.3 - 1e-12 and nodes[-1] <= 3.0 + 1e-12


def test_geometric_nodes_narrow_range_raises():
    with pytest.raises(ValueError):
        geometric_nodes(1.01, 1.02, 1)


def test_uniform_angles():
    th = uniform_angles(8)
    assert th[0] == 0.0
    assert np.allclose(np.diff(th), TWO_PI / 8)
    with pytest.raises(ValueError):
        uniform_angles(3)


def test_mass_orthonormal_frame(three2d, rng):
    raw = [project_cm(three2d, rng.normal(size=(3, 2))) for _ in range(2)]
    frame = mass_orthonormal_frame(three2d, raw)
    for i in range(len(frame)):
        assert abs(moment_of_inertia(three2d, frame[i]) - 1.0) < 1e-12
        assert np.max(np.abs(project_cm(three2d, frame[i]) - frame[i])) < 1e-12
        for j in range(i):
            assert abs(mass_inner(three2d, frame[i], frame[j])) < 1e-12


def test_kepler_circle_points(kepler2):
    chart = kepler_circle(kepler2)
    assert chart.rotation_invariant
    assert chart.collision_angles == ()
    th = uniform_angles(16)
    for t in th:
        x = chart.point(t)
        assert abs(moment_of_inertia(kepler2, x) - 1.0) < 1e-12
    # rotation invariance makes the potential constant on the circle
    u = chart.potential_values(th)
    assert np.max(np.abs(u - u[0])) < 1e-12
    assert abs(u[0] - potential(kepler2, chart.point(0.0))) < 1e-14


def test_kepler_circle_tangent_is_unit(kepler2):
    chart = kepler_circle(kepler2)
    for t in uniform_angles(8):
        v = chart.tangent(t)
        assert abs(mass_inner(kepler2, v, v) - 1.0) < 1e-10
        assert abs(mass_inner(kepler2, v, chart.point(t))) < 1e-10


def test_collinear_circle_collisions(three1d):
    chart = collinear_three_circle(three1d)
    assert not chart.rotation_invariant
    assert len(chart.collision_angles) == 6
    th = uniform_angles(64)
    ok = chart.node_valid(th)
    assert ok.sum() < 64
    # invalid zones hug the collision angles
    dist = chart.angular_distance_to_collisions(th)
    assert np.all(dist[~ok] <= NODE_COLLISION_MARGIN + 1e-12)
    for t in th[ok]:
        x = chart.point(t)
        assert abs(moment_of_inertia(three1d, x) - 1.0) < 1e-12


def test_collinear_circle_potential_blows_up(three1d):
    chart = collinear_three_circle(three1d)
    ca = chart.collision_angles[0]
    u_near = chart.potential_values(np.array([ca + 1e-4]))[0]
    u_far = chart.potential_values(np.array([ca + 0.5]))[0]
    assert u_near > 100.0 * u_far


def test_ray_chart_points(kepler2):
    chart = kepler_ray(kepler2, 0.5, 2.0)
    x1 = chart.point(1.0)
    x2 = chart.point(2.0)
    assert abs(moment_of_inertia(kepler2, x1) - 1.0) < 1e-12
    assert abs(moment_of_inertia(kepler2, x2) - 4.0) < 1e-12
    with pytest.raises(ValueError):
        kepler_ray(kepler2, 2.0, 0.5)


def test_cone_chart_points(kepler2):
    circ = kepler_circle(kepler2)
    cone = cone_over(circ, 0.5, 2.0)
    assert cone.system is kepler2
    x = cone.point(1.5, 0.3)
    assert abs(moment_of_inertia(kepler2, x) - 1.5**2) < 1e-12
    assert np.max(np.abs(x - 1.5 * circ.point(0.3))) < 1e-14


def test_grid_on_shapes(kepler2, three1d):
    ray = grid_on(kepler_ray(kepler2, 0.5, 2.0), per_octave=4)
    assert ray.values.ndim == 1
    assert ray.valid_mask().all()

    circ = grid_on(collinear_three_circle(three1d), n_theta=32, fill=1.5)
    assert circ.values.ndim == 1
    assert not circ.valid_mask().all()
    assert np.isnan(circ.values[~circ.valid_mask()]).all()
    assert np.all(circ.values[circ.valid_mask()] == 1.5)

    cone = grid_on(cone_over(collinear_three_circle(three1d), 0.5, 2.0),
                   per_octave=2, n_theta=32)
    assert cone.values.ndim == 2
    # the invalid set is a union of radial lines
    v = cone.valid_mask()
    assert (v.all(axis=0) | (~v).all(axis=0)).all()


def test_grid_evaluate_interpolates(kepler2):
    chart = kepler_ray(kepler2, 0.5, 2.0)
    g = grid_on(chart, per_octave=8)
    lam = g.axes[0]
    g = g.with_values(lam**2)
    mid = math.sqrt(lam[3] * lam[4])
    exact = g.evaluate(np.array([lam[3], mid, lam[4]]))
    assert exact[0] == lam[3] ** 2
    assert exact[2] == lam[4] ** 2
    lo, hi = lam[3] ** 2, lam[4] ** 2
    assert lo < exact[1] < hi
    assert np.isnan(g.evaluate(np.array([lam[-1] * 1.01]))[0])


def test_grid_evaluate_periodic_wrap(kepler2):
    chart = kepler_circle(kepler2)
    g = grid_on(chart, n_theta=16)
    th = g.axes[0]
    g = g.with_values(np.cos(th))
    # querying just past the last node wraps to the first
    probe = float(th[-1] + 0.5 * (TWO_PI / 16))
    got = g.evaluate(np.array([probe]))[0]
    expect = 0.5 * (math.cos(th[-1]) + math.cos(th[0]))
    assert abs(got - expect) < 1e-12


def test_pin_index(kepler2, three1d):
    ray = grid_on(kepler_ray(kepler2, 0.5, 2.0), per_octave=4)
    assert ray.pin_index() == (0,)
    cone = grid_on(cone_over(collinear_three_circle(three1d), 0.5, 2.0),
                   per_octave=2, n_theta=32)
    pin = cone.pin_index()
    assert pin[0] == 0
    assert cone.valid_mask()[pin]
    circ = grid_on(collinear_three_circle(three1d), n_theta=32)
    with pytest.raises(ChartRangeError):
        circ.pin_index()


def test_rows_and_columns_match(kepler2):
    g = grid_on(cone_over(kepler_circle(kepler2), 0.5, 2.0),
                per_octave=2, n_theta=8)
    rows = list(g.to_rows())
    assert len(rows) == g.values.size
    assert len(rows[0]) == len(g.column_names())


def test_grid_function_validation(kepler2):
    chart = kepler_ray(kepler2, 0.5, 2.0)
    lam = geometric_nodes(0.5, 2.0, 4)
    with pytest.raises(ValueError):
        GridFunction(chart=chart, axes=(lam,), values=np.zeros(lam.size + 1))
