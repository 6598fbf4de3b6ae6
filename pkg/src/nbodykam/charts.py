"""Low-dimensional charts of the reduced space and lattice data on them.

Grid methods cannot touch the full configuration space, so computation
runs on small embedded charts: a ray through a fixed unit shape, a
unit-speed circle on the inertia sphere, and the cone over such a
circle.  Circle charts are spanned by a mass-orthonormal frame, which
makes the induced metric exactly dtheta^2 on the circle and
dlam^2 + lam^2 dtheta^2 on the cone; no metric coefficients ever need
to be approximated.

Radial lattices are geometric with an exact node at lam = 1, so scaling
by a power of two is an index shift rather than an interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .central import two_body_central
from .errors import ChartRangeError
from .space import (
    MassSystem,
    as_config,
    mass_inner,
    mass_norm,
    min_mutual_distance,
)

TWO_PI = 2.0 * math.pi

# circle nodes closer than this (min mutual distance of the unit shape)
# to a collision are dropped from lattices
NODE_COLLISION_MARGIN = 0.05


def _batch_min_distance(configs: np.ndarray) -> np.ndarray:
    diff = configs[..., :, None, :] - configs[..., None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    n = configs.shape[-2]
    iu, ju = np.triu_indices(n, k=1)
    return dist[..., iu, ju].min(axis=-1)


def _batch_potential_u(system: MassSystem, configs: np.ndarray) -> np.ndarray:
    diff = configs[..., :, None, :] - configs[..., None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    iu, ju = np.triu_indices(system.n_bodies, k=1)
    d = dist[..., iu, ju]
    mprod = system.masses[iu] * system.masses[ju]
    with np.errstate(divide="ignore"):
        vals = np.where(d > 0.0, d ** (-2.0 * system.kappa), np.inf)
    return vals @ mprod


def mass_orthonormal_frame(system: MassSystem, raw: Sequence[np.ndarray]) -> np.ndarray:
    """Gram-Schmidt in the mass metric.  Input vectors must be reduced."""
    out = []
    for vec in raw:
        v = as_config(system, np.asarray(vec, dtype=float))
        for e in out:
            v = v - mass_inner(system, e, v) * e
        nrm = mass_norm(system, v)
        if nrm < 1e-12:
            raise ValueError("frame vectors are linearly dependent")
        out.append(v / nrm)
    return np.stack(out)


@dataclass(frozen=True)
class CircleChart:
    """Unit-speed circle theta -> cos(theta) e1 + sin(theta) e2 on {I=1}.

    The frame is mass-orthonormal, so images have unit moment of inertia
    exactly and the tangent has unit mass norm: arc length equals the
    angle.  collision_angles lists the partial-collision locus on the
    circle; rotation_invariant marks charts whose points are rigid
    rotations of one shape, for which transfer costs depend only on
    angle differences.
    """

    system: MassSystem
    label: str
    frame: np.ndarray
    collision_angles: tuple[float, ...] = ()
    rotation_invariant: bool = False

    kind = "circle"

    def __post_init__(self) -> None:
        f = np.asarray(self.frame, dtype=float)
        if f.shape != (2, self.system.n_bodies, self.system.dim):
            raise ValueError("frame must hold two configurations")
        g01 = mass_inner(self.system, f[0], f[1])
        n0 = mass_norm(self.system, f[0])
        n1 = mass_norm(self.system, f[1])
        if abs(n0 - 1.0) > 1e-10 or abs(n1 - 1.0) > 1e-10 or abs(g01) > 1e-10:
            raise ValueError("frame must be mass-orthonormal")
        object.__setattr__(self, "frame", f)

    def point(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        return (
            np.cos(th)[..., None, None] * self.frame[0]
            + np.sin(th)[..., None, None] * self.frame[1]
        )

    def tangent(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        return (
            -np.sin(th)[..., None, None] * self.frame[0]
            + np.cos(th)[..., None, None] * self.frame[1]
        )

    def potential_values(self, theta) -> np.ndarray:
        return _batch_potential_u(self.system, self.point(theta))

    def psi_values(self, theta) -> np.ndarray:
        """Ejection cost sqrt(2 U)/(1 - kappa) at each circle point."""
        return np.sqrt(2.0 * self.potential_values(theta)) / (1.0 - self.system.kappa)

    def min_pair_distance(self, theta) -> np.ndarray:
        return _batch_min_distance(self.point(theta))

    def angular_distance_to_collisions(self, theta) -> np.ndarray:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.collision_angles:
            return np.full(th.shape, np.inf)
        ca = np.asarray(self.collision_angles)
        d = np.abs((th[..., None] - ca[None, :] + math.pi) % TWO_PI - math.pi)
        return d.min(axis=-1)

    def node_valid(self, theta) -> np.ndarray:
        return _batch_min_distance(self.point(theta)) > NODE_COLLISION_MARGIN

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "system": self.system.to_dict(),
            "collision_angles": list(self.collision_angles),
            "rotation_invariant": self.rotation_invariant,
        }


@dataclass(frozen=True)
class RayChart:
    """Radial ray lam -> lam * shape through one unit-inertia shape."""

    system: MassSystem
    label: str
    shape: np.ndarray
    lam_min: float
    lam_max: float

    kind = "ray"

    def __post_init__(self) -> None:
        s = as_config(self.system, self.shape)
        if abs(mass_norm(self.system, s) - 1.0) > 1e-10:
            raise ValueError("ray shape must have unit moment of inertia")
        if not 0.0 < self.lam_min < self.lam_max:
            raise ValueError("need 0 < lam_min < lam_max")
        object.__setattr__(self, "shape", s)

    def point(self, lam) -> np.ndarray:
        lm = np.asarray(lam, dtype=float)
        return lm[..., None, None] * self.shape

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "system": self.system.to_dict(),
            "lam_min": self.lam_min,
            "lam_max": self.lam_max,
        }


@dataclass(frozen=True)
class ConeChart:
    """Cone (lam, theta) -> lam * circle(theta) over a circle chart."""

    circle: CircleChart
    lam_min: float
    lam_max: float
    label: str

    kind = "cone"

    def __post_init__(self) -> None:
        if not 0.0 < self.lam_min < self.lam_max:
            raise ValueError("need 0 < lam_min < lam_max")

    @property
    def system(self) -> MassSystem:
        return self.circle.system

    def point(self, lam, theta) -> np.ndarray:
        lm = np.asarray(lam, dtype=float)
        return lm[..., None, None] * self.circle.point(theta)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "circle": self.circle.to_dict(),
            "lam_min": self.lam_min,
            "lam_max": self.lam_max,
        }


Chart = CircleChart | RayChart | ConeChart


def kepler_circle(system: MassSystem) -> CircleChart:
    """The full inertia sphere of a planar two-body system.

    Points are rigid rotations of the central shape, so the potential is
    constant on the circle and there are no collision angles.
    """
    if system.n_bodies != 2 or system.dim != 2:
        raise ValueError("kepler circle needs two bodies in the plane")
    e1 = two_body_central(system).s
    e2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1)
    return CircleChart(
        system=system,
        label="kepler-circle",
        frame=np.stack([e1, e2]),
        collision_angles=(),
        rotation_invariant=True,
    )


def collinear_three_circle(system: MassSystem) -> CircleChart:
    """Inertia circle of three bodies on a line (reduced plane is 2d).

    The six collision angles (three pairs, two antipodes each) are
    analytic: pair (i, j) collides where the frame components satisfy
    (e1_i - e1_j) cos + (e2_i - e2_j) sin = 0.
    """
    if system.n_bodies != 3 or system.dim != 1:
        raise ValueError("collinear circle needs three bodies on a line")
    m = system.masses
    raw1 = np.array([[1.0], [-1.0], [0.0]])
    raw2 = np.array([[0.0], [1.0], [-1.0]])
    raw1 -= (m @ raw1)[None, :] / system.total_mass
    raw2 -= (m @ raw2)[None, :] / system.total_mass
    frame = mass_orthonormal_frame(system, [raw1, raw2])
    angles: list[float] = []
    for i in range(3):
        for j in range(i + 1, 3):
            a = frame[0, i, 0] - frame[0, j, 0]
            b = frame[1, i, 0] - frame[1, j, 0]
            base = math.atan2(-a, b) % TWO_PI
            angles.extend([base, (base + math.pi) % TWO_PI])
    return CircleChart(
        system=system,
        label="collinear-three-circle",
        frame=frame,
        collision_angles=tuple(sorted(angles)),
        rotation_invariant=False,
    )


def kepler_ray(system: MassSystem, lam_min: float, lam_max: float) -> RayChart:
    return RayChart(
        system=system,
        label="kepler-ray",
        shape=two_body_central(system).s,
        lam_min=lam_min,
        lam_max=lam_max,
    )


def cone_over(circle: CircleChart, lam_min: float, lam_max: float) -> ConeChart:
    return ConeChart(
        circle=circle,
        lam_min=lam_min,
        lam_max=lam_max,
        label=f"cone-{circle.label}",
    )


def geometric_nodes(lam_min: float, lam_max: float, per_octave: int) -> np.ndarray:
    """Nodes 2^(k/q) covering [lam_min, lam_max]; hits 1.0 exactly when inside."""
    if per_octave < 1:
        raise ValueError("per_octave must be >= 1")
    q = float(per_octave)
    k_lo = math.ceil(q * math.log2(lam_min) - 1e-9)
    k_hi = math.floor(q * math.log2(lam_max) + 1e-9)
    if k_hi < k_lo:
        raise ValueError("range too narrow for the requested density")
    ks = np.arange(k_lo, k_hi + 1)
    return 2.0 ** (ks / q)


def uniform_angles(n: int) -> np.ndarray:
    if n < 4:
        raise ValueError("need at least 4 angular nodes")
    return np.arange(n) * (TWO_PI / n)


@dataclass
class GridFunction:
    """Node values on a rectangular lattice over a chart.

    axes holds the node coordinates per chart parameter (radial first).
    valid is None for all-valid lattices, else a boolean mask; invalid
    nodes carry NaN and are ignored by every reduction.  Off-node
    evaluation is multilinear, with periodic wrap on angular axes.
    """

    chart: Chart
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    valid: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        shape = tuple(a.size for a in self.axes)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} != lattice {shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != shape:
                raise ValueError("valid mask shape mismatch")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.shape, dtype=bool)
        return self.valid

    def copy(self) -> "GridFunction":
        return GridFunction(
            chart=self.chart,
            axes=self.axes,
            values=self.values.copy(),
            valid=None if self.valid is None else self.valid.copy(),
            meta=dict(self.meta),
        )

    def with_values(self, values: np.ndarray, meta: dict | None = None) -> "GridFunction":
        return GridFunction(
            chart=self.chart,
            axes=self.axes,
            values=np.asarray(values, dtype=float),
            valid=None if self.valid is None else self.valid.copy(),
            meta=dict(self.meta) if meta is None else meta,
        )

    def node_params(self) -> np.ndarray:
        """Cartesian product of the axes, shape lattice + (n_axes,)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def node_configs(self) -> np.ndarray:
        p = self.node_params()
        if self.chart.kind == "ray":
            return self.chart.point(p[..., 0])
        if self.chart.kind == "circle":
            return self.chart.point(p[..., 0])
        return self.chart.point(p[..., 0], p[..., 1])

    def _axis_weights(self, axis: int, coords: np.ndarray):
        nodes = self.axes[axis]
        periodic = self._axis_periodic(axis)
        if periodic:
            span = TWO_PI
            x = np.mod(coords, span)
            idx = np.searchsorted(nodes, x, side="right") - 1
            idx = np.clip(idx, 0, nodes.size - 1)
            upper = (idx + 1) % nodes.size
            gap = np.where(
                idx + 1 < nodes.size, nodes[np.minimum(idx + 1, nodes.size - 1)] - nodes[idx],
                span - nodes[-1] + nodes[0],
            )
            w = (x - nodes[idx]) / gap
            return idx, upper, np.clip(w, 0.0, 1.0), np.zeros(x.shape, dtype=bool)
        x = coords
        out = (x < nodes[0] - 1e-12) | (x > nodes[-1] + 1e-12)
        xc = np.clip(x, nodes[0], nodes[-1])
        idx = np.searchsorted(nodes, xc, side="right") - 1
        idx = np.clip(idx, 0, nodes.size - 2)
        w = (xc - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
        return idx, idx + 1, np.clip(w, 0.0, 1.0), out

    def _axis_periodic(self, axis: int) -> bool:
        if self.chart.kind == "circle":
            return axis == 0
        if self.chart.kind == "cone":
            return axis == 1
        return False

    def evaluate(self, params) -> np.ndarray:
        """Multilinear interpolation; NaN outside the lattice or near invalid nodes."""
        p = np.asarray(params, dtype=float)
        if p.ndim == 1 and len(self.axes) == 1:
            p = p[:, None]
        if p.shape[-1] != len(self.axes):
            raise ValueError("parameter dimension mismatch")
        vals = np.where(self.valid_mask(), self.values, np.nan)
        if len(self.axes) == 1:
            i0, i1, w, out = self._axis_weights(0, p[..., 0])
            res = (1.0 - w) * vals[i0] + w * vals[i1]
            exact0 = w < 1e-12
            exact1 = w > 1.0 - 1e-12
            res = np.where(exact0, vals[i0], res)
            res = np.where(exact1, vals[i1], res)
            return np.where(out, np.nan, res)
        i0, i1, wi, out_i = self._axis_weights(0, p[..., 0])
        j0, j1, wj, out_j = self._axis_weights(1, p[..., 1])
        c00 = vals[i0, j0]
        c10 = vals[i1, j0]
        c01 = vals[i0, j1]
        c11 = vals[i1, j1]
        lo = np.where(wj < 1e-12, c00, (1 - wj) * c00 + wj * c01)
        hi = np.where(wj < 1e-12, c10, (1 - wj) * c10 + wj * c11)
        res = np.where(wi < 1e-12, lo, (1 - wi) * lo + wi * hi)
        return np.where(out_i | out_j, np.nan, res)

    def pin_index(self) -> tuple[int, ...]:
        """First valid node on the innermost radial ring (nearest the origin)."""
        mask = self.valid_mask()
        if self.chart.kind == "circle":
            raise ChartRangeError("circle lattices have no radial pin node")
        if len(self.axes) == 1:
            for i in range(self.axes[0].size):
                if mask[i]:
                    return (i,)
        else:
            for i in range(self.axes[0].size):
                for j in range(self.axes[1].size):
                    if mask[i, j]:
                        return (i, j)
        raise ChartRangeError("no valid node to pin")

    def to_rows(self):
        """CSV rows: parameter coordinates, value, validity."""
        p = self.node_params()
        flatp = p.reshape(-1, p.shape[-1])
        flatv = self.values.reshape(-1)
        flatok = self.valid_mask().reshape(-1)
        for k in range(flatv.size):
            yield (*flatp[k], flatv[k], int(flatok[k]))

    def column_names(self) -> list[str]:
        names = {"ray": ["lam"], "circle": ["theta"], "cone": ["lam", "theta"]}
        return names[self.chart.kind] + ["value", "valid"]

    def to_dict(self) -> dict:
        return {
            "chart": self.chart.to_dict(),
            "axes": [a.tolist() for a in self.axes],
            "values": self.values.tolist(),
            "valid": None if self.valid is None else self.valid.astype(int).tolist(),
        }


def grid_on(
    chart: Chart,
    per_octave: int = 8,
    n_theta: int | None = None,
    fill: float = 0.0,
) -> GridFunction:
    """Zero (or constant) lattice on a chart, with collision nodes masked."""
    if chart.kind == "ray":
        lam = geometric_nodes(chart.lam_min, chart.lam_max, per_octave)
        return GridFunction(chart=chart, axes=(lam,), values=np.full(lam.size, fill))
    if chart.kind == "circle":
        if n_theta is None:
            raise ValueError("circle lattice needs n_theta")
        th = uniform_angles(n_theta)
        ok = chart.node_valid(th)
        vals = np.full(th.size, fill)
        vals[~ok] = np.nan
        return GridFunction(
            chart=chart, axes=(th,), values=vals, valid=None if ok.all() else ok
        )
    if n_theta is None:
        raise ValueError("cone lattice needs n_theta")
    lam = geometric_nodes(chart.lam_min, chart.lam_max, per_octave)
    th = uniform_angles(n_theta)
    ok_th = chart.circle.node_valid(th)
    vals = np.full((lam.size, th.size), fill)
    if ok_th.all():
        valid = None
    else:
        valid = np.broadcast_to(ok_th[None, :], vals.shape).copy()
        vals[~valid] = np.nan
    return GridFunction(chart=chart, axes=(lam, th), values=vals, valid=valid)
