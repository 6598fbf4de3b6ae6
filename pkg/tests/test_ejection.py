import numpy as np
import pytest

from nbodykam.action import ActionOptions
from nbodykam.central import catalog, equilateral_central, two_body_central
from nbodykam.ejection import (
    is_minimizing,
    make_ejection,
    psi_closed_form,
    psi_newtonian,
    psi_quadrature,
)
from nbodykam.space import MassSystem, mass_inner, potential


def test_equilateral_ejection_constants(three2d):
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    assert ej.exponent == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert ej.alpha == pytest.approx(13.5 ** (1.0 / 3.0), rel=1e-13)
    assert ej.t_unit == pytest.approx(13.5**-0.5, rel=1e-13)
    assert ej.psi == pytest.approx(2.0 * np.sqrt(6.0), rel=1e-13)
    assert ej.potential_value == pytest.approx(3.0, rel=1e-13)


def test_kepler_psi_value(kepler2):
    s = two_body_central(kepler2).s
    assert psi_closed_form(kepler2, s) == pytest.approx(2.0 * 2.0**0.25, rel=1e-13)
    assert psi_newtonian(kepler2, s) == pytest.approx(
        psi_closed_form(kepler2, s), rel=1e-15
    )
    with pytest.raises(ValueError):
        psi_newtonian(MassSystem(masses=[1, 1], dim=2, kappa=0.25), s)


def test_ejection_passes_through_shape_at_unit_time(three2d):
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    np.testing.assert_allclose(ej.position(ej.t_unit), ej.s, atol=1e-14)
    np.testing.assert_allclose(ej.position(0.0), 0.0, atol=0.0)


def test_ejection_domain_errors(three2d):
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    with pytest.raises(ValueError):
        ej.position(-1.0)
    with pytest.raises(ValueError):
        ej.velocity(0.0)


def test_energy_equality_along_ejection(three2d):
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    for t in np.geomspace(1e-3, 1e3, 13):
        kin, pot = ej.energy(t)
        assert abs(kin - pot) / pot <= 1e-12


def test_energy_value_at_unit_time(three2d):
    # U(s) = 3, kappa = 1/2: both energies at t = 1 equal 2^(1/3)
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    kin, pot = ej.energy(1.0)
    assert kin == pytest.approx(2.0 ** (1.0 / 3.0), rel=1e-12)
    assert pot == pytest.approx(2.0 ** (1.0 / 3.0), rel=1e-12)


def test_self_similarity_of_positions(three2d):
    ej = make_ejection(three2d, equilateral_central(three2d).s)
    lam = 2.0
    for t in (0.1, 1.0, 7.0):
        np.testing.assert_allclose(
            ej.position(lam ** (1.0 + three2d.kappa) * t),
            lam * ej.position(t),
            rtol=1e-12,
        )


def test_make_ejection_validates_input(three2d, rng):
    s = equilateral_central(three2d).s
    with pytest.raises(ValueError):
        make_ejection(three2d, s + 1e-3 * rng.standard_normal((3, 2)))
    with pytest.raises(ValueError):
        make_ejection(three2d, 1.5 * s)


@pytest.mark.parametrize("kappa", [0.25, 0.5, 0.75])
def test_psi_quadrature_matches_closed_form(kappa):
    system = MassSystem(masses=[1.0, 1.0, 1.0], dim=2, kappa=kappa)
    s = equilateral_central(system).s
    exact = psi_closed_form(system, s)
    q = psi_quadrature(system, s, n_nodes=2000)
    assert abs(q - exact) / exact <= 1e-6


def test_psi_quadrature_second_order(three2d):
    s = equilateral_central(three2d).s
    exact = psi_closed_form(three2d, s)
    e500 = abs(psi_quadrature(three2d, s, 500) - exact)
    e2000 = abs(psi_quadrature(three2d, s, 2000) - exact)
    assert 10.0 <= e500 / e2000 <= 25.0


def test_is_minimizing_kepler_quick(kepler2):
    s = two_body_central(kepler2).s
    v = is_minimizing(
        kepler2, s,
        ActionOptions(n_nodes=64, transverse_starts=1, scan_nodes=16),
    )
    assert v.verdict == "consistent-minimizing"
    assert v.is_minimizing is True
    assert abs(v.gap) <= v.error_estimate
    assert v.optimal_time == pytest.approx(
        make_ejection(kepler2, s).t_unit, rel=2e-2
    )


def test_verdict_serialization(kepler2):
    s = two_body_central(kepler2).s
    v = is_minimizing(
        kepler2, s,
        ActionOptions(n_nodes=32, transverse_starts=1, scan_nodes=12),
    )
    d = v.to_dict()
    assert set(d) >= {"psi", "phi_value", "gap", "error_estimate", "verdict"}
