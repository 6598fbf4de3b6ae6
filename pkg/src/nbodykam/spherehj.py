"""The induced Hamilton-Jacobi equation on the inertia sphere.

A function u homogeneous of degree 1 - kappa is determined by its
restriction v to the sphere, and the stationary equation for u becomes

    (1 - kappa)^2 v^2 + |grad_S v|^2 = 2 U(s)

on the sphere, equivalently v^2 + (1 - kappa)^(-2) |grad_S v|^2 = psi^2
after dividing by (1 - kappa)^2.  Circle charts are unit speed in the
mass metric, so the chart derivative dv/dtheta already is the metric
gradient and residuals need no metric correction.

Only one-dimensional charts (circles) are supported; the residual,
restriction and viscosity machinery is dimension-agnostic in principle
but the desk-scale charts shipped here are all circles.

Solver outputs satisfy |v| <= psi up to discretization slack: the
equation forces it for exact solutions, the solver only inherits it
approximately, so the bound is asserted with tolerance and violations
are reported rather than clipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .charts import (
    TWO_PI,
    CircleChart,
    GridFunction,
    cone_over,
    geometric_nodes,
    uniform_angles,
)
from .errors import ChartRangeError, CollisionError
from .weakkam import EXACT_NODE_SNAP, WeakKamOptions, iterate_homogeneous
from .space import MassSystem

# nodes this close to a collision angle are dropped from residual stats
DEFAULT_MASK_NODES = 2


@dataclass
class SphereFunction:
    """Node values of v on a circle chart with a second-order stencil.

    values uses NaN at collision-masked nodes; angles are the uniform
    nodes implied by the value count.  meta carries solver diagnostics
    when the instance came out of solve_hjh.
    """

    chart: CircleChart
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    stencil_order = 2

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 8:
            raise ValueError("values must be a vector over at least 8 angles")
        self.values = vals

    @property
    def n_nodes(self) -> int:
        return self.values.size

    @property
    def angles(self) -> np.ndarray:
        return uniform_angles(self.n_nodes)

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n_nodes

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values) & self.chart.node_valid(self.angles)

    def psi(self) -> np.ndarray:
        return self.chart.psi_values(self.angles)

    def gradient(self) -> np.ndarray:
        """Periodic central differences; NaN wherever a neighbor is masked."""
        v = self.values
        return (np.roll(v, -1) - np.roll(v, 1)) / (2.0 * self.spacing)

    def interior_mask(self, margin_nodes: int = DEFAULT_MASK_NODES) -> np.ndarray:
        """Valid nodes whose stencil stays clear of the collision locus."""
        ok = self.valid_mask()
        near = self.chart.angular_distance_to_collisions(self.angles)
        ok &= near >= margin_nodes * self.spacing
        return ok & np.roll(ok, 1) & np.roll(ok, -1)

    def evaluate(self, theta) -> np.ndarray:
        """Periodic linear interpolation of the node values."""
        th = np.asarray(theta, dtype=float) % TWO_PI
        pos = th / self.spacing
        i0 = np.floor(pos).astype(int) % self.n_nodes
        i1 = (i0 + 1) % self.n_nodes
        w = pos - np.floor(pos)
        return (1.0 - w) * self.values[i0] + w * self.values[i1]

    def derivative(self, theta) -> np.ndarray:
        """Central-difference gradient interpolated periodically."""
        g = self.gradient()
        th = np.asarray(theta, dtype=float) % TWO_PI
        pos = th / self.spacing
        i0 = np.floor(pos).astype(int) % self.n_nodes
        i1 = (i0 + 1) % self.n_nodes
        w = pos - np.floor(pos)
        return (1.0 - w) * g[i0] + w * g[i1]

    def with_values(self, values: np.ndarray) -> "SphereFunction":
        return SphereFunction(chart=self.chart, values=np.asarray(values, float),
                              meta=dict(self.meta))

    def column_names(self) -> list[str]:
        return ["theta", "v", "residual", "psi"]

    def to_rows(self):
        res = residual_profile(self.chart.system, self)
        psi = self.psi()
        for i, th in enumerate(self.angles):
            yield [th, self.values[i], res[i], psi[i]]

    def to_dict(self) -> dict:
        return {
            "chart": self.chart.to_dict(),
            "n_nodes": self.n_nodes,
            "meta": {k: v for k, v in self.meta.items() if k != "solver_values"},
        }


# -- residuals -----------------------------------------------------------


def _node_checked(v: SphereFunction, node: int) -> int:
    node = int(node) % v.n_nodes
    theta = v.angles[node]
    if not v.chart.node_valid(np.array([theta]))[0]:
        raise CollisionError(
            f"node {node} is inside the collision margin; residual undefined"
        )
    return node


def hjh_residual(system: MassSystem, v: SphereFunction, node: int,
                 form: str = "h") -> float:
    """Pointwise defect of the Hamilton-Jacobi equation on the sphere.

    form "h" returns (1-kappa)^2 v^2 + |grad v|^2 - 2U; form "psi"
    returns v^2 + (1-kappa)^(-2) |grad v|^2 - psi^2.  The two are
    computed independently and differ exactly by the factor
    (1-kappa)^2; tests pin the agreement.
    """
    node = _node_checked(v, node)
    kap = system.kappa
    theta = v.angles[node]
    g = float(v.gradient()[node])
    val = float(v.values[node])
    if form == "h":
        two_u = 2.0 * float(v.chart.potential_values(np.array([theta]))[0])
        return (1.0 - kap) ** 2 * val * val + g * g - two_u
    if form == "psi":
        psi = float(v.chart.psi_values(np.array([theta]))[0])
        return val * val + g * g / (1.0 - kap) ** 2 - psi * psi
    raise ValueError("form must be 'h' or 'psi'")


def residual_profile(system: MassSystem, v: SphereFunction,
                     form: str = "psi") -> np.ndarray:
    """Vectorized residual over all nodes; NaN where the stencil is masked."""
    kap = system.kappa
    g = v.gradient()
    vals = v.values
    ok = v.valid_mask()
    ok &= np.roll(ok, 1) & np.roll(ok, -1)
    if form == "h":
        two_u = 2.0 * v.chart.potential_values(v.angles)
        res = (1.0 - kap) ** 2 * vals * vals + g * g - two_u
    elif form == "psi":
        psi = v.chart.psi_values(v.angles)
        res = vals * vals + g * g / (1.0 - kap) ** 2 - psi * psi
    else:
        raise ValueError("form must be 'h' or 'psi'")
    return np.where(ok, res, np.nan)


def bound_violations(v: SphereFunction, slack: float = 1e-8) -> dict:
    """|v| <= psi check over valid nodes; reports the worst excess."""
    ok = v.valid_mask()
    psi = v.psi()
    excess = np.abs(v.values) - psi
    excess = excess[ok]
    n_bad = int((excess > slack).sum())
    return {
        "n_checked": int(ok.sum()),
        "n_violations": n_bad,
        "worst_excess": float(excess.max()) if excess.size else math.nan,
        "slack": slack,
    }


# -- restriction and extension -------------------------------------------


def restrict_homogeneous(u: GridFunction) -> SphereFunction:
    """Slice a cone-lattice function at the exact unit-radius ring."""
    chart = u.chart
    if getattr(chart, "kind", None) != "cone":
        raise ChartRangeError("restriction needs a cone chart with a unit ring")
    lam = u.axes[0]
    hits = np.nonzero(np.abs(lam - 1.0) <= EXACT_NODE_SNAP)[0]
    if hits.size == 0:
        raise ChartRangeError("the lattice has no node at unit radius")
    row = int(hits[0])
    return SphereFunction(
        chart=chart.circle,
        values=u.values[row].copy(),
        meta={"restricted_from": dict(u.meta), "unit_row": row},
    )


def extend_homogeneous(v: SphereFunction, lam_min: float, lam_max: float,
                       per_octave: int = 8) -> GridFunction:
    """Rebuild u(lam * s) = lam^(1-kappa) v(s) on a cone lattice.

    The angular nodes are v's own, so restrict(extend(v)) returns v
    exactly on nodes.
    """
    cone = cone_over(v.chart, lam_min, lam_max)
    lam = geometric_nodes(lam_min, lam_max, per_octave)
    kap = v.chart.system.kappa
    vals = lam[:, None] ** (1.0 - kap) * v.values[None, :]
    valid = np.broadcast_to(v.valid_mask()[None, :], vals.shape).copy()
    return GridFunction(
        chart=cone,
        axes=(lam, v.angles),
        values=vals,
        valid=valid,
        meta={"extended_from_sphere": True},
    )


# -- solver ---------------------------------------------------------------


@dataclass
class SphereSolveOptions:
    """Resolution knobs for the scale-reduced solver.

    n_lambda and inner_nodes default to values tied to n_theta so that
    refining the angular grid also refines the radial probe and the
    inner action mesh; that is what makes residuals actually shrink
    under refinement on charts where v is constant by symmetry.
    t = None picks 0.55 of the shortest unit-sphere ejection time over
    the chart, which balances the contraction rate against the
    amplification of radial quantization.
    """

    n_theta: int = 256
    t: float | None = None
    n_lambda: int | None = None
    inner_nodes: int | None = None
    radius_factor: float = 3.0
    richardson: bool = False
    gtol: float = 1e-9
    tol: float | None = None
    max_sweeps: int = 400
    threads: int | None = None
    mask_nodes: int = DEFAULT_MASK_NODES
    viscosity_nodes: int = 8
    probe_set: tuple = (-4.0, 0.0, 4.0)


def _auto_step_time(chart: CircleChart, angles: np.ndarray) -> float:
    valid = chart.node_valid(angles)
    if not valid.any():
        raise ChartRangeError("no collision-free nodes on the circle")
    sys_ = chart.system
    u_max = float(chart.potential_values(angles[valid]).max())
    # ejection from total collision reaches radius 1 at alpha^-(1+kappa);
    # the largest-potential direction has the shortest clock
    alpha = (2.0 * (1.0 + sys_.kappa) ** 2 * u_max) ** (
        1.0 / (2.0 * (1.0 + sys_.kappa))
    )
    return 0.55 * alpha ** -(1.0 + sys_.kappa)


def solve_hjh(system: MassSystem, chart: CircleChart,
              opts: SphereSolveOptions | None = None) -> SphereFunction:
    """Scale-reduced fixed point of the step operator, restricted to S.

    Returns the sphere values with residual statistics, the |v| <= psi
    check and a viscosity spot-check summary in meta.  Residual
    statistics are taken over interior nodes away from the collision
    locus; the reported tolerance scales with the angular spacing since
    the gradient stencil is second order.
    """
    if getattr(chart, "kind", None) != "circle":
        raise ChartRangeError("only circle charts are supported")
    if chart.system.to_dict() != system.to_dict():
        raise ValueError("chart was built for a different mass system")
    opts = opts or SphereSolveOptions()
    n_theta = opts.n_theta
    angles = uniform_angles(n_theta)
    t = opts.t if opts.t is not None else _auto_step_time(chart, angles)
    n_lambda = opts.n_lambda if opts.n_lambda is not None else max(
        32, 3 * n_theta // 8
    )
    inner = opts.inner_nodes if opts.inner_nodes is not None else 12 + n_theta // 32
    wk = WeakKamOptions(
        inner_nodes=inner,
        gtol=opts.gtol,
        radius_factor=opts.radius_factor,
        richardson=opts.richardson,
        threads=opts.threads,
    )
    it = iterate_homogeneous(
        system, chart, t,
        n_theta=n_theta,
        n_lambda=n_lambda,
        tol=opts.tol,
        max_sweeps=opts.max_sweeps,
        opts=wk,
    )
    v = SphereFunction(chart=chart, values=it.values)
    mask = v.interior_mask(opts.mask_nodes)
    res = residual_profile(system, v, form="psi")
    sel = mask & np.isfinite(res)
    max_res = float(np.abs(res[sel]).max()) if sel.any() else math.nan
    psi_scale = float(np.nanmax(v.psi()[v.valid_mask()]) ** 2)
    h = v.spacing
    # second-order stencil on an O(1) profile: h^2 curvature term plus
    # the value error the radial probe leaves behind
    res_tol = psi_scale * (4.0 * h * h + 40.0 / (n_lambda * n_lambda))

    vis_nodes = [int(i) for i in np.linspace(0, n_theta, opts.viscosity_nodes,
                                             endpoint=False)]
    vis_reports = []
    for node in vis_nodes:
        if mask[node]:
            vis_reports.append(viscosity_test(system, v, node,
                                              probe_set=opts.probe_set))
    sub_worst = max((r.sub_margin for r in vis_reports
                     if r.sub_margin is not None), default=math.nan)
    super_worst = min((r.super_margin for r in vis_reports
                       if r.super_margin is not None), default=math.nan)

    # quantization pushes |v| slightly past psi where they touch; a value
    # error of res_tol in the residual corresponds to res_tol / (2 psi)
    # in v, so the bound check gets that much slack
    bound_slack = res_tol / (2.0 * math.sqrt(psi_scale))

    v.meta.update({
        "t_step": t,
        "n_lambda": n_lambda,
        "inner_nodes": inner,
        "max_masked_residual": max_res,
        "residual_tolerance": res_tol,
        "n_masked_nodes": int(sel.sum()),
        "bound_check": bound_violations(v, slack=bound_slack),
        "viscosity_summary": {
            "n_nodes_tested": len(vis_reports),
            "sub_worst_margin": sub_worst,
            "super_worst_margin": super_worst,
            "n_sub_vacuous": sum(r.sub_vacuous for r in vis_reports),
            "n_super_vacuous": sum(r.super_vacuous for r in vis_reports),
        },
        "solver": it.to_dict(),
    })
    return v


# -- viscosity spot checks -------------------------------------------------


@dataclass
class ViscosityReport:
    """Margins of the pointwise sub/supersolution inequalities.

    sub_margin is the worst (largest) H over probes touching from
    above: a subsolution keeps it <= tol.  super_margin is the worst
    (smallest) H over probes touching from below: a supersolution keeps
    it >= -tol.  A side with an empty differential is vacuous and
    passes by convention; margins are None there.
    """

    node: int
    theta: float
    p_left: float
    p_right: float
    sub_margin: float | None
    super_margin: float | None
    sub_ok: bool
    super_ok: bool
    sub_vacuous: bool
    super_vacuous: bool
    n_probes: int
    n_rejected: int
    tol: float

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "theta": self.theta,
            "p_left": self.p_left,
            "p_right": self.p_right,
            "sub_margin": self.sub_margin,
            "super_margin": self.super_margin,
            "sub_ok": self.sub_ok,
            "super_ok": self.super_ok,
            "sub_vacuous": self.sub_vacuous,
            "super_vacuous": self.super_vacuous,
            "tol": self.tol,
        }


def _touches(v: SphereFunction, node: int, p: float, a: float,
             side: int, reach: int = 2) -> bool:
    """Discrete touching test for the quadratic probe on the stencil.

    side +1 means the probe must dominate v near the node (touch from
    above), -1 that it must stay below.  A slack of 1e-12 absorbs
    rounding; probes failing on any finite neighbor within reach are
    rejected.
    """
    n = v.n_nodes
    h = v.spacing
    v0 = v.values[node]
    for j in range(-reach, reach + 1):
        if j == 0:
            continue
        idx = (node + j) % n
        vj = v.values[idx]
        if not math.isfinite(vj):
            continue
        probe = v0 + p * (j * h) + 0.5 * a * (j * h) ** 2
        if side * (probe - vj) < -1e-12:
            return False
    return True


def viscosity_test(system: MassSystem, v: SphereFunction, node: int,
                   probe_set=( -4.0, 0.0, 4.0), tol: float | None = None,
                   ) -> ViscosityReport:
    """Sub/supersolution margins at one node via quadratic probes.

    One-sided slopes span the discrete super/subdifferential; each
    candidate slope is paired with every curvature in probe_set and
    kept only if the quadratic genuinely touches on the stencil
    neighborhood.  H depends on the probe only through its slope and
    value, so the curvature sweep serves to certify admissibility.
    """
    node = _node_checked(v, node)
    kap = system.kappa
    h = v.spacing
    n = v.n_nodes
    v0 = float(v.values[node])
    vl = float(v.values[(node - 1) % n])
    vr = float(v.values[(node + 1) % n])
    if not (math.isfinite(v0) and math.isfinite(vl) and math.isfinite(vr)):
        raise ChartRangeError("stencil leaves the valid region")
    p_left = (v0 - vl) / h
    p_right = (vr - v0) / h
    theta = float(v.angles[node])
    two_u = 2.0 * float(v.chart.potential_values(np.array([theta]))[0])
    if tol is None:
        # the slopes carry an O(h) bias on curved profiles
        scale = two_u + (1.0 - kap) ** 2 * v0 * v0
        tol = scale * (10.0 * h + 1e-10)

    def hamiltonian(p: float) -> float:
        return (1.0 - kap) ** 2 * v0 * v0 + p * p - two_u

    def side_margins(lo: float, hi: float, side: int):
        if lo > hi + 1e-14:
            return None, 0, 0
        slopes = np.linspace(lo, hi, 5)
        margins = []
        rejected = 0
        for p in slopes:
            admitted = False
            for a in probe_set:
                if _touches(v, node, float(p), float(a), side):
                    admitted = True
                    break
            if admitted:
                margins.append(hamiltonian(float(p)))
            else:
                rejected += 1
        if not margins:
            return None, len(slopes), rejected
        return margins, len(slopes), rejected

    # touching from above requires slopes between the right and left
    # one-sided differences (concave corners); below is the reverse
    sub_m, n_sub, rej_sub = side_margins(min(p_right, p_left),
                                         max(p_right, p_left), +1) \
        if p_right <= p_left else (None, 0, 0)
    super_m, n_super, rej_super = side_margins(min(p_left, p_right),
                                               max(p_left, p_right), -1) \
        if p_left <= p_right else (None, 0, 0)

    sub_vacuous = sub_m is None
    super_vacuous = super_m is None
    sub_margin = max(sub_m) if sub_m else None
    super_margin = min(super_m) if super_m else None
    return ViscosityReport(
        node=node,
        theta=theta,
        p_left=p_left,
        p_right=p_right,
        sub_margin=sub_margin,
        super_margin=super_margin,
        sub_ok=sub_vacuous or sub_margin <= tol,
        super_ok=super_vacuous or super_margin >= -tol,
        sub_vacuous=sub_vacuous,
        super_vacuous=super_vacuous,
        n_probes=(n_sub if sub_m else 0) + (n_super if super_m else 0),
        n_rejected=rej_sub + rej_super,
        tol=tol,
    )
