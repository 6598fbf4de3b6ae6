"""Mass geometry of N-body configuration space.

A system of N point masses in R^d is described by a configuration
x = (r_1, ..., r_N).  All geometry here uses the mass inner product

    <x, y> = sum_i m_i <r_i, q_i>,

under which the kinetic energy is |v|^2 / 2 and the moment of inertia
about the origin is I(x) = <x, x>.  Configurations are reduced to the
subspace of vanishing linear momentum / center of mass, and the unit
sphere {I = 1} carries the shape of the configuration while the radial
coordinate lambda = I^(1/2) carries its size.

The interaction is the homogeneous attracting potential

    U(x) = sum_{i<j} m_i m_j / |r_i - r_j|^(2 kappa),    0 < kappa < 1,

so U is homogeneous of degree -2 kappa (kappa = 1/2 is the Newtonian
case).  Its gradient is taken with respect to the mass metric, making
the equations of motion read x'' = grad U(x) with no mass factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollisionError

# Relative distance below which two bodies count as collided.
COLLISION_RTOL = 1e-10
# Relative tolerance on the center of mass for a configuration to count
# as reduced.
REDUCED_RTOL = 1e-9


@dataclass(frozen=True)
class MassSystem:
    """Masses, ambient dimension, and homogeneity parameter of a problem.

    ``kappa`` is the homogeneity parameter of the potential: U scales like
    r^(-2 kappa) and must satisfy 0 < kappa < 1.
    """

    masses: np.ndarray
    dim: int
    kappa: float

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float).reshape(-1).copy()
        if m.size < 2:
            raise ValueError("need at least two bodies")
        if not np.all(np.isfinite(m)) or np.any(m <= 0.0):
            raise ValueError("masses must be finite and positive")
        if int(self.dim) < 1:
            raise ValueError("ambient dimension must be >= 1")
        if not (0.0 < float(self.kappa) < 1.0):
            raise ValueError("kappa must lie in (0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def n_bodies(self) -> int:
        return self.masses.size

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def to_dict(self) -> dict:
        return {
            "masses": [float(v) for v in self.masses],
            "dim": self.dim,
            "kappa": self.kappa,
        }

    @staticmethod
    def from_dict(data: dict) -> "MassSystem":
        return MassSystem(
            masses=np.asarray(data["masses"], dtype=float),
            dim=int(data["dim"]),
            kappa=float(data["kappa"]),
        )


def as_config(system: MassSystem, x) -> np.ndarray:
    """Validate and return a configuration as an (N, dim) float array."""
    a = np.asarray(x, dtype=float)
    if a.shape != (system.n_bodies, system.dim):
        raise ValueError(
            f"configuration shape {a.shape} does not match "
            f"({system.n_bodies}, {system.dim})"
        )
    if not np.all(np.isfinite(a)):
        raise ValueError("configuration has non-finite entries")
    return a


def mass_inner(system: MassSystem, x, y) -> float:
    """Mass inner product <x, y> = sum_i m_i <r_i, q_i>."""
    a = as_config(system, x)
    b = as_config(system, y)
    return float(np.einsum("i,id,id->", system.masses, a, b))


def mass_norm(system: MassSystem, x) -> float:
    return float(np.sqrt(max(mass_inner(system, x, x), 0.0)))


def moment_of_inertia(system: MassSystem, x) -> float:
    """I(x) = <x, x>, the moment of inertia about the origin."""
    return mass_inner(system, x, x)


def center_of_mass(system: MassSystem, x) -> np.ndarray:
    a = as_config(system, x)
    return system.masses @ a / system.total_mass


def project_cm(system: MassSystem, x) -> np.ndarray:
    """Translate the configuration so its center of mass sits at the origin."""
    a = as_config(system, x)
    return a - center_of_mass(system, a)


def is_reduced(system: MassSystem, x, rtol: float = REDUCED_RTOL) -> bool:
    a = as_config(system, x)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    return bool(np.max(np.abs(center_of_mass(system, a))) <= rtol * scale)


def polar_decompose(system: MassSystem, x) -> tuple[float, np.ndarray]:
    """Split a nonzero reduced configuration into size and shape, x = lambda s.

    Returns (lambda, s) with lambda = I(x)^(1/2) and I(s) = 1.  The total
    collision x = 0 has no shape and raises ValueError.
    """
    a = as_config(system, x)
    lam = mass_norm(system, a)
    scale = float(np.max(np.abs(a)))
    if lam <= 1e-14 * max(scale, 1.0) or scale == 0.0:
        raise ValueError("total collision has no polar decomposition")
    return lam, a / lam


def pair_distances(system: MassSystem, x) -> np.ndarray:
    """Condensed vector of mutual distances |r_i - r_j|, i < j."""
    a = as_config(system, x)
    iu, ju = np.triu_indices(system.n_bodies, k=1)
    return np.linalg.norm(a[iu] - a[ju], axis=-1)


def min_mutual_distance(system: MassSystem, x) -> float:
    return float(np.min(pair_distances(system, x)))


def is_collision_free(system: MassSystem, x, rtol: float = COLLISION_RTOL) -> bool:
    a = as_config(system, x)
    scale = max(float(np.max(np.abs(a))), 1e-300)
    return min_mutual_distance(system, a) > rtol * scale


def _pair_mass_products(system: MassSystem) -> np.ndarray:
    iu, ju = np.triu_indices(system.n_bodies, k=1)
    return system.masses[iu] * system.masses[ju]


def potential(system: MassSystem, x) -> float:
    """U(x) = sum_{i<j} m_i m_j / r_ij^(2 kappa); +inf at any collision."""
    d = pair_distances(system, x)
    if np.any(d <= 0.0):
        return float("inf")
    return float(np.sum(_pair_mass_products(system) * d ** (-2.0 * system.kappa)))


def potential_gradient(system: MassSystem, x) -> np.ndarray:
    """Gradient of U in the mass metric: (grad U)_i = (1/m_i) dU/dr_i.

    With this convention the equations of motion are x'' = grad U(x) and
    Euler's identity reads <grad U(x), x> = -2 kappa U(x).
    """
    a = as_config(system, x)
    if not is_collision_free(system, a):
        raise CollisionError("potential gradient undefined at a collision")
    kap = system.kappa
    diff = a[:, None, :] - a[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, 1.0)
    w = system.masses[None, :] * dist ** (-2.0 * kap - 2.0)
    np.fill_diagonal(w, 0.0)
    return -2.0 * kap * np.einsum("ij,ijd->id", w, diff)


def potential_clamped(system: MassSystem, x, u_cap: float = 1e12):
    """Potential and Euclidean coordinate gradient with a collision barrier cap.

    Pair separations are floored so that no single pair contributes more
    than ``u_cap`` to U; the floored pairs contribute zero gradient.  This
    keeps line searches finite near collisions without changing values on
    the collision-free region optimizers actually converge in.

    Returns (value, dU/dr) where dU/dr has shape (N, dim) and is the plain
    coordinate gradient (mass factors included), as used by the action
    minimizers.
    """
    a = np.asarray(x, dtype=float)
    kap = system.kappa
    diff = a[:, None, :] - a[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, 1.0)
    mprod = system.masses[:, None] * system.masses[None, :]
    r_floor = (u_cap / np.maximum(mprod, 1e-300)) ** (-0.5 / kap)
    clamped = dist < r_floor
    dist_c = np.where(clamped, r_floor, dist)
    terms = mprod * dist_c ** (-2.0 * kap)
    np.fill_diagonal(terms, 0.0)
    value = 0.5 * float(terms.sum())
    w = mprod * dist_c ** (-2.0 * kap - 2.0)
    w[clamped] = 0.0
    np.fill_diagonal(w, 0.0)
    grad = -2.0 * kap * np.einsum("ij,ijd->id", w, diff)
    return value, grad


def random_reduced(system: MassSystem, rng: np.random.Generator,
                   on_sphere: bool = False) -> np.ndarray:
    """Draw a reduced, collision-free configuration (optionally with I = 1)."""
    for _ in range(100):
        a = project_cm(system, rng.standard_normal((system.n_bodies, system.dim)))
        if not is_collision_free(system, a, rtol=1e-3):
            continue
        if on_sphere:
            lam, s = polar_decompose(system, a)
            return s
        return a
    raise RuntimeError("failed to sample a collision-free configuration")


def config_to_dict(system: MassSystem, x) -> dict:
    """JSON-ready description of a configuration together with its system."""
    a = as_config(system, x)
    d = system.to_dict()
    d["positions"] = [[float(v) for v in row] for row in a]
    return d


def config_from_dict(data: dict) -> tuple[MassSystem, np.ndarray]:
    system = MassSystem.from_dict(data)
    x = as_config(system, np.asarray(data["positions"], dtype=float))
    return system, x
