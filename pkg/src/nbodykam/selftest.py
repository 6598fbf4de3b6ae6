"""Built-in confidence checks for an installed copy.

Each check is cheap, deterministic, and prints one line; the whole run
takes a few seconds.  The report contains no timings or host facts, so
two runs of the same build emit identical bytes regardless of the
ambient worker count (the determinism check forces both counts
explicitly and compares the formatted numbers).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .action import ActionOptions, lower_bound, minimize_fixed_time
from .central import catalog
from .charts import grid_on, kepler_ray
from .ejection import make_ejection, psi_closed_form, psi_newtonian, psi_quadrature
from .reporting import fmt
from .space import (
    MassSystem,
    as_config,
    mass_inner,
    potential,
    potential_gradient,
    random_reduced,
)
from .weakkam import WeakKamOptions, group_law_defect, iterate_weak_kam

GradFn = Callable[[MassSystem, np.ndarray], np.ndarray]


def _check_euler_identity(grad_fn: GradFn) -> tuple[bool, str]:
    """Degree -2k homogeneity forces <grad U(x), x> = -2k U(x)."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for kappa in (0.25, 0.5, 0.75):
        for n, dim in ((2, 2), (3, 2), (3, 3)):
            system = MassSystem(masses=[1.0] * n, dim=dim, kappa=kappa)
            for _ in range(4):
                x = random_reduced(system, rng)
                u = potential(system, x)
                pairing = mass_inner(system, grad_fn(system, x), x)
                worst = max(worst, abs(pairing + 2.0 * kappa * u) / abs(u))
    return worst <= 1e-10, f"worst relative defect {fmt(worst)}"


def _check_central_residuals() -> tuple[bool, str]:
    worst = 0.0
    for masses in ([1.0, 1.0], [1.0, 2.0, 3.0]):
        system = MassSystem(masses=masses, dim=2, kappa=0.5)
        for c in catalog(system):
            worst = max(worst, c.residual)
    return worst <= 1e-9, f"worst residual {fmt(worst)}"


def _check_ejection_newton() -> tuple[bool, str]:
    """gamma'' = grad U(gamma) and T = U along the parabolic arc."""
    worst = 0.0
    for kappa in (0.25, 0.5, 0.75):
        system = MassSystem(masses=[1.0, 2.0], dim=2, kappa=kappa)
        ej = make_ejection(system, catalog(system)[0].s)
        c = ej.exponent
        for t in (0.3, 1.0, 9.0):
            accel = ej.alpha * c * (c - 1.0) * t ** (c - 2.0) * ej.s
            grad = potential_gradient(system, ej.position(t))
            diff = accel - grad
            rel = math.sqrt(mass_inner(system, diff, diff)) / math.sqrt(
                mass_inner(system, grad, grad))
            worst = max(worst, rel)
            kin, pot = ej.energy(t)
            worst = max(worst, abs(kin - pot) / pot)
    return worst <= 1e-10, f"worst relative defect {fmt(worst)}"


def _check_psi_quadrature() -> tuple[bool, str]:
    system = MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)
    s = catalog(system)[0].s
    closed = psi_closed_form(system, s)
    quad = psi_quadrature(system, s, n_nodes=2000)
    rel = abs(quad - closed) / closed
    newton = MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)
    special = abs(psi_newtonian(newton, s) - 2.0 * math.sqrt(
        2.0 * potential(newton, as_config(newton, s))))
    ok = rel <= 1e-6 and special <= 1e-14
    return ok, f"quadrature relative error {fmt(rel)}"


def _check_action_lower_bound() -> tuple[bool, str]:
    system = MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    y = np.array([[0.0, 2.0], [0.0, -2.0]])
    r = minimize_fixed_time(system, x, y, 1.0, ActionOptions(n_nodes=32))
    gap = r.value - lower_bound(system, x, y, 1.0)
    return bool(r.converged and gap >= -1e-12), f"value exceeds floor by {fmt(gap)}"


def _iterate_small(threads: int | None):
    system = MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)
    chart = kepler_ray(system, 0.5, 2.0)
    u0 = grid_on(chart, per_octave=3)
    opts = WeakKamOptions(inner_nodes=6, radius_factor=3.0, threads=threads)
    return iterate_weak_kam(system, u0, t=0.2, tol=1e-10, max_sweeps=40,
                            opts=opts)


def _check_lax_oleinik() -> tuple[bool, str]:
    it = _iterate_small(None)
    inc = min(it.min_increment_history)
    ok = it.converged and inc >= -1e-12
    return ok, f"converged in {it.iterations} sweeps, min increment {fmt(inc)}"


def _check_scaling_group() -> tuple[bool, str]:
    system = MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)
    chart = kepler_ray(system, 0.25, 4.0)
    u = grid_on(chart, per_octave=4)
    lam = u.axes[0]
    u = u.with_values(lam ** (1.0 - system.kappa))
    defect = group_law_defect(u, 2.0, 2.0)
    return defect <= 1e-12, f"composition defect {fmt(defect)}"


def _check_thread_determinism() -> tuple[bool, str]:
    """Identical bytes from one worker and four."""
    texts = []
    for threads in (1, 4):
        it = _iterate_small(threads)
        texts.append(",".join(fmt(v) for v in it.grid.values)
                     + "|" + fmt(it.residual))
    ok = texts[0] == texts[1]
    return ok, "profiles match" if ok else "profiles differ between worker counts"


def run_selftest(grad_fn: GradFn | None = None) -> tuple[bool, str]:
    """Run every check; returns overall verdict and the printable report."""
    checks = [
        ("euler-identity", lambda: _check_euler_identity(
            grad_fn or potential_gradient)),
        ("central-residuals", _check_central_residuals),
        ("ejection-newton", _check_ejection_newton),
        ("psi-quadrature", _check_psi_quadrature),
        ("action-lower-bound", _check_action_lower_bound),
        ("lax-oleinik", _check_lax_oleinik),
        ("scaling-group-law", _check_scaling_group),
        ("thread-determinism", _check_thread_determinism),
    ]
    lines = []
    n_fail = 0
    for name, run in checks:
        try:
            ok, detail = run()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        if not ok:
            n_fail += 1
        lines.append(f"{'ok' if ok else 'FAIL'} {name}: {detail}")
    lines.append(f"selftest: {len(checks)} checks, {n_fail} failures")
    return n_fail == 0, "\n".join(lines) + "\n"
