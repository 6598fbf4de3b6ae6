"""Central configurations of the homogeneous N-body potential.

A unit configuration s (I(s) = 1, center of mass at the origin) is
central when grad U(s) is parallel to s, i.e. s is a critical point of U
restricted to the unit sphere.  Euler's identity fixes the multiplier:

    grad U(s) = lambda s,    lambda = <grad U(s), s> = -2 kappa U(s).

Central configurations are exactly the shapes admitting homothetic
motions, and the minimizing ones govern the cost of reaching total
collision; the catalog below ships the classical N <= 3 families
(two-body, equilateral, collinear) used throughout the test problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import ConvergenceError
from .space import (
    MassSystem,
    as_config,
    is_collision_free,
    mass_inner,
    moment_of_inertia,
    polar_decompose,
    potential,
    potential_gradient,
    project_cm,
)


@dataclass
class CentralConfiguration:
    """A normalized central configuration and its stationarity data."""

    system: MassSystem
    s: np.ndarray
    multiplier: float
    residual: float
    potential_value: float
    label: str = ""
    is_minimal: bool | None = None

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "s": [[float(v) for v in row] for row in self.s],
            "multiplier": self.multiplier,
            "residual": self.residual,
            "potential_value": self.potential_value,
            "label": self.label,
            "is_minimal": self.is_minimal,
        }


def _normalize(system: MassSystem, x) -> np.ndarray:
    y = project_cm(system, x)
    _, s = polar_decompose(system, y)
    return s


def central_residual(system: MassSystem, s) -> float:
    """Mass norm of grad U(s) + 2 kappa U(s) s, zero exactly at central configs.

    The input is normalized (reduced, I = 1) before evaluating, so this
    measures stationarity of U on the sphere rather than distance from it.
    """
    s = _normalize(system, as_config(system, s))
    g = potential_gradient(system, s)
    r = g + 2.0 * system.kappa * potential(system, s) * s
    return float(np.sqrt(max(mass_inner(system, r, r), 0.0)))


def _stationarity_system(system: MassSystem, weight: float):
    """Residual vector for the least-squares polish.

    Stacks sqrt(m_i)-weighted components of grad U + 2 kappa U s (so its
    Euclidean norm is the mass norm of the stationarity defect) with
    weighted I - 1 and center-of-mass terms pinning the normalization.
    """
    sqm = np.sqrt(system.masses)[:, None]

    def fun(z):
        s = z.reshape(system.n_bodies, system.dim)
        if not is_collision_free(system, s, rtol=1e-12):
            # steer the solver away from collisions instead of raising
            return np.full(s.size + 1 + system.dim, 1e6)
        u = potential(system, s)
        g = potential_gradient(system, s)
        r = (g + 2.0 * system.kappa * u * s) * sqm
        extra = [weight * (moment_of_inertia(system, s) - 1.0)]
        extra.extend(weight * (system.masses @ s) / system.total_mass)
        return np.concatenate([r.ravel(), np.asarray(extra)])

    return fun


def find_central(system: MassSystem, seed, tol: float = 1e-12,
                 max_iter: int = 500) -> CentralConfiguration:
    """Locate a central configuration near ``seed``.

    Projected gradient descent on U restricted to the unit sphere (Armijo
    backtracking from step 1.0, halving) takes the seed into a basin, and
    a Gauss-Newton polish on the stationarity system finishes to ``tol``.
    Descent preserves any symmetry subspace of the seed (e.g. collinear
    seeds stay collinear), which is how saddle families are reached.
    """
    s = _normalize(system, as_config(system, seed))
    if not is_collision_free(system, s, rtol=1e-8):
        raise ValueError("seed normalizes to a near-collision configuration")

    u = potential(system, s)
    for _ in range(max_iter):
        g = potential_gradient(system, s)
        lam = mass_inner(system, g, s)
        g_tan = g - lam * s
        res = np.sqrt(max(mass_inner(system, g_tan, g_tan), 0.0))
        if res <= max(1e-6, 1e-9 * abs(u)):
            break
        step = 1.0
        moved = False
        for _ in range(60):
            trial = _normalize(system, s - step * g_tan)
            u_trial = potential(system, trial)
            if u_trial <= u - 1e-4 * step * res * res:
                s, u, moved = trial, u_trial, True
                break
            step *= 0.5
        if not moved:
            break

    sol = least_squares(
        _stationarity_system(system, weight=max(1.0, abs(u))),
        s.ravel(),
        method="lm",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=200 * s.size,
    )
    s = _normalize(system, sol.x.reshape(system.n_bodies, system.dim))
    res = central_residual(system, s)
    if res > tol * max(1.0, abs(potential(system, s))):
        raise ConvergenceError(
            f"central configuration solve stalled at residual {res:.3e}",
            best=CentralConfiguration(
                system=system, s=s,
                multiplier=-2.0 * system.kappa * potential(system, s),
                residual=res, potential_value=potential(system, s),
            ),
        )
    u = potential(system, s)
    return CentralConfiguration(
        system=system,
        s=s,
        multiplier=-2.0 * system.kappa * u,
        residual=res,
        potential_value=u,
        label="found",
    )


def _central_from_exact(system: MassSystem, s, label: str) -> CentralConfiguration:
    s = _normalize(system, s)
    u = potential(system, s)
    return CentralConfiguration(
        system=system,
        s=s,
        multiplier=-2.0 * system.kappa * u,
        residual=central_residual(system, s),
        potential_value=u,
        label=label,
    )


def two_body_central(system: MassSystem, direction=None) -> CentralConfiguration:
    """The (unique up to rotation) two-body unit shape."""
    if system.n_bodies != 2:
        raise ValueError("two_body_central needs exactly two bodies")
    e = np.zeros(system.dim)
    e[0] = 1.0
    if direction is not None:
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
    m1, m2 = system.masses
    mu = m1 * m2 / (m1 + m2)
    q = e / np.sqrt(mu)
    s = np.vstack([m2 / (m1 + m2) * q, -m1 / (m1 + m2) * q])
    return _central_from_exact(system, s, "two-body")


def equilateral_central(system: MassSystem) -> CentralConfiguration:
    """The equilateral three-body shape; central for arbitrary masses."""
    if system.n_bodies != 3 or system.dim < 2:
        raise ValueError("equilateral_central needs three bodies in dim >= 2")
    raw = np.zeros((3, system.dim))
    raw[0, :2] = (0.0, 0.0)
    raw[1, :2] = (1.0, 0.0)
    raw[2, :2] = (0.5, np.sqrt(3.0) / 2.0)
    return _central_from_exact(system, raw, "equilateral")


def collinear_central(system: MassSystem, order=(0, 1, 2)) -> CentralConfiguration:
    """The collinear three-body shape with the given left-to-right order.

    Solved in one dimension (where it minimizes U on its ordering chamber)
    and embedded along the first axis of the ambient space.
    """
    if system.n_bodies != 3:
        raise ValueError("collinear_central needs exactly three bodies")
    order = tuple(int(i) for i in order)
    if sorted(order) != [0, 1, 2]:
        raise ValueError("order must be a permutation of (0, 1, 2)")
    line = MassSystem(masses=system.masses, dim=1, kappa=system.kappa)
    seed = np.zeros((3, 1))
    for pos, body in enumerate(order):
        seed[body, 0] = float(pos) - 1.0
    found = find_central(line, seed, tol=1e-11)
    s = np.zeros((3, system.dim))
    s[:, 0] = found.s[:, 0]
    return _central_from_exact(system, s, f"collinear-mid-{order[1]}")


def catalog(system: MassSystem) -> list[CentralConfiguration]:
    """The classical central configurations for N <= 3."""
    if system.n_bodies == 2:
        return [two_body_central(system)]
    if system.n_bodies == 3:
        out = []
        if system.dim >= 2:
            out.append(equilateral_central(system))
        seen = set()
        for order in ((0, 1, 2), (1, 0, 2), (0, 2, 1)):
            if order[1] in seen:
                continue
            seen.add(order[1])
            out.append(collinear_central(system, order))
        return out
    raise ValueError("catalog covers N <= 3 only")


def classify_minimal(system: MassSystem, config: CentralConfiguration,
                     candidates=None, rtol: float = 1e-8) -> bool:
    """Mark whether ``config`` attains the minimal sphere potential.

    Compared against ``candidates`` (default: the N <= 3 catalog).  The
    verdict is recorded on the input and returned.
    """
    if candidates is None:
        candidates = catalog(system)
    if not candidates:
        raise ValueError("cannot classify against an empty candidate list")
    best = min(c.potential_value for c in candidates)
    config.is_minimal = bool(
        config.potential_value <= best * (1.0 + rtol) + rtol
    )
    return config.is_minimal
