"""Value iteration for the minimal-action semigroup on chart lattices.

The step operator replaces each node value u(x) by the minimum of
u(y) + phi(y, x, t) over candidate sources y.  The infimum over the
whole space is truncated to a metric ball of radius
radius_factor * t^(1/(1+kappa)), the natural reachable-set radius of
the scaling symmetry; argmins landing on the ball boundary are counted
and reported, never hidden.

Transfer costs are evaluated once per unordered node pair (the action
functional is invariant under path reversal, so orientation is
immaterial) and cached for the lifetime of the sweep loop.  On cones
over rotation-invariant circles the key further collapses to the pair
of radii and the angular offset.  Cache fill order is sorted and each
entry is an independent pure solve, so results do not depend on the
thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .action import ActionOptions, PhiResult, minimize_fixed_time, minimize_free_time
from .charts import TWO_PI, GridFunction, uniform_angles
from .ejection import make_ejection
from .errors import ChartRangeError, ConvergenceError
from .parallel import parallel_map
from .space import MassSystem

EXACT_NODE_SNAP = 1e-9


@dataclass
class WeakKamOptions:
    """Knobs for the step operator and its inner action solves."""

    inner_nodes: int = 16
    gtol: float = 1e-9
    radius_factor: float = 4.0
    richardson: bool = True
    threads: int | None = None
    # residual mask width measured from the radial edges; None = search radius
    interior_margin: float | None = None

    def inner_action_options(self) -> ActionOptions:
        return ActionOptions(
            n_nodes=self.inner_nodes,
            gtol=self.gtol,
            richardson=self.richardson,
        )


@dataclass
class StepStats:
    n_targets: int = 0
    n_pairs_cached: int = 0
    n_failed: int = 0
    boundary_argmin_fraction: float = 0.0
    max_inner_error: float = 0.0


@dataclass
class WeakKamIterate:
    """Outcome of the sweep loop.

    grid holds the gauge-fixed profile (value at the pin node subtracted),
    raw_grid the unnormalized final iterate.  The residual is the sup of
    the pinned profile change over interior nodes; drift is the per-sweep
    growth at the pin node, which the gauge removes.
    """

    grid: GridFunction
    raw_grid: GridFunction
    residual: float
    residual_history: list[float]
    drift_history: list[float]
    min_increment_history: list[float]
    boundary_fraction_history: list[float]
    t_step: float
    iterations: int
    converged: bool
    pin_index: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "t_step": self.t_step,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_history": list(self.residual_history),
            "drift_history": list(self.drift_history),
            "min_increment_history": list(self.min_increment_history),
            "boundary_fraction_history": list(self.boundary_fraction_history),
        }


def search_radius(system: MassSystem, t: float, radius_factor: float) -> float:
    return radius_factor * t ** (1.0 / (1.0 + system.kappa))


def _phi_pair(system, x, y, t, aopts) -> tuple[float, float]:
    """Fixed-time transfer cost and its error estimate; inf on failure."""
    try:
        r = minimize_fixed_time(system, x, y, t, aopts)
    except (ConvergenceError, ValueError):
        return math.inf, math.inf
    if not r.converged or not math.isfinite(r.value):
        return math.inf, math.inf
    return r.value, r.error_estimate


class TransferCosts:
    """Memoized transfer costs phi(y, x, t) between lattice nodes.

    Exposes a vectorized sweep; the plan depends on the chart:
    dense matrix on rays, (radius pair, angular offset) tables on
    rotation-invariant cones, per-target candidate lists otherwise.
    """

    def __init__(self, system: MassSystem, grid: GridFunction, t: float,
                 opts: WeakKamOptions | None = None) -> None:
        if t <= 0.0:
            raise ValueError("step time must be positive")
        self.system = system
        self.grid = grid
        self.t = float(t)
        self.opts = opts or WeakKamOptions()
        self.radius = search_radius(system, self.t, self.opts.radius_factor)
        self.stats = StepStats()
        kind = grid.chart.kind
        if kind == "ray":
            self._build_ray()
            self._plan = "ray"
        elif kind == "cone" and grid.chart.circle.rotation_invariant:
            self._build_cone_invariant()
            self._plan = "cone-invariant"
        else:
            self._build_generic()
            self._plan = "generic"

    # -- plans ---------------------------------------------------------

    def _build_ray(self) -> None:
        lam = self.grid.axes[0]
        chart = self.grid.chart
        m = lam.size
        window = np.abs(lam[:, None] - lam[None, :]) <= self.radius
        keys = [(i, j) for i in range(m) for j in range(i, m) if window[i, j]]
        aopts = self.opts.inner_action_options()

        def solve(key):
            i, j = key
            return _phi_pair(self.system, chart.point(lam[i]), chart.point(lam[j]),
                             self.t, aopts)

        results = parallel_map(solve, keys, self.opts.threads)
        cost = np.full((m, m), np.inf)
        for (i, j), (val, err) in zip(keys, results):
            cost[i, j] = cost[j, i] = val
            if math.isfinite(err):
                self.stats.max_inner_error = max(self.stats.max_inner_error, err)
            if not math.isfinite(val):
                self.stats.n_failed += 1
        self.stats.n_pairs_cached = len(keys)
        self._cost = cost
        # per-target source window, for boundary-argmin accounting
        self._jlo = np.array([np.argmax(window[i]) for i in range(m)])
        self._jhi = np.array([m - 1 - np.argmax(window[i][::-1]) for i in range(m)])

    def _build_cone_invariant(self) -> None:
        lam, theta = self.grid.axes
        chart = self.grid.chart
        m, n = lam.size, theta.size
        dth = TWO_PI / n
        entries: list[tuple[int, int, np.ndarray]] = []
        keys: list[tuple[int, int, int]] = []
        for i in range(m):
            for j in range(i, m):
                if abs(lam[i] - lam[j]) > self.radius:
                    continue
                d = np.arange(n // 2 + 1)
                chord = np.sqrt(
                    lam[i] ** 2 + lam[j] ** 2
                    - 2.0 * lam[i] * lam[j] * np.cos(d * dth)
                )
                ds = d[chord <= self.radius]
                if ds.size == 0:
                    continue
                entries.append((i, j, ds))
                keys.extend((i, j, int(dd)) for dd in ds)
        aopts = self.opts.inner_action_options()

        def solve(key):
            i, j, d = key
            return _phi_pair(self.system, chart.point(lam[i], 0.0),
                             chart.point(lam[j], d * dth), self.t, aopts)

        results = parallel_map(solve, keys, self.opts.threads)
        table: dict[tuple[int, int, int], float] = {}
        for key, (val, err) in zip(keys, results):
            table[key] = val
            if math.isfinite(err):
                self.stats.max_inner_error = max(self.stats.max_inner_error, err)
            if not math.isfinite(val):
                self.stats.n_failed += 1
        self.stats.n_pairs_cached = len(keys)
        # contributions per target radius: (source radius, offset, cost, edge flag)
        per_target: list[list[tuple[int, int, float, bool]]] = [[] for _ in range(m)]
        for i, j, ds in entries:
            dmax = int(ds[-1])
            for dd in ds:
                c = table[(i, j, int(dd))]
                edge = int(dd) == dmax and dmax < n // 2
                per_target[j].append((i, int(dd), c, edge))
                if i != j:
                    per_target[i].append((j, int(dd), c, edge))
        self._per_target = per_target
        self._n_theta = n

    def _build_generic(self) -> None:
        chart = self.grid.chart
        flat_ok = self.grid.valid_mask().reshape(-1)
        configs = self.grid.node_configs().reshape(-1, self.system.n_bodies,
                                                   self.system.dim)
        idx_valid = np.nonzero(flat_ok)[0]
        cf = configs[idx_valid]
        diff = cf[:, None] - cf[None, :]
        dist = np.sqrt(np.einsum("b,pqbd,pqbd->pq", self.system.masses, diff, diff))
        within = dist <= self.radius
        nv = idx_valid.size
        keys = [(p, q) for p in range(nv) for q in range(p, nv) if within[p, q]]
        aopts = self.opts.inner_action_options()

        def solve(key):
            p, q = key
            return _phi_pair(self.system, cf[p], cf[q], self.t, aopts)

        results = parallel_map(solve, keys, self.opts.threads)
        table: dict[tuple[int, int], float] = {}
        for key, (val, err) in zip(keys, results):
            table[key] = val
            if math.isfinite(err):
                self.stats.max_inner_error = max(self.stats.max_inner_error, err)
            if not math.isfinite(val):
                self.stats.n_failed += 1
        self.stats.n_pairs_cached = len(keys)
        srcs, costs, edges = [], [], []
        for q in range(nv):
            ps = np.nonzero(within[:, q])[0]
            cs = np.array([table[(min(p, q), max(p, q))] for p in ps])
            near_edge = dist[ps, q] > self.radius - 0.1 * self.radius
            srcs.append(idx_valid[ps])
            costs.append(cs)
            edges.append(near_edge)
        self._idx_valid = idx_valid
        self._gsrcs = srcs
        self._gcosts = costs
        self._gedges = edges

    # -- sweeps --------------------------------------------------------

    def sweep(self, values: np.ndarray) -> tuple[np.ndarray, StepStats]:
        if self._plan == "ray":
            return self._sweep_ray(values)
        if self._plan == "cone-invariant":
            return self._sweep_cone_invariant(values)
        return self._sweep_generic(values)

    def _sweep_ray(self, values):
        u = np.where(np.isfinite(values), values, np.inf)
        cand = u[:, None] + self._cost
        new = cand.min(axis=0)
        arg = cand.argmin(axis=0)
        m = u.size
        on_edge = ((arg == self._jlo) & (self._jlo > 0)) | (
            (arg == self._jhi) & (self._jhi < m - 1)
        )
        stats = self._stats_copy(m, float(np.mean(on_edge)))
        return np.where(np.isfinite(new), new, np.nan), stats

    def _sweep_cone_invariant(self, values):
        u = np.where(np.isfinite(values), values, np.inf)
        m, n = u.shape
        new = np.empty_like(u)
        edge_hits = 0
        for i in range(m):
            contribs = self._per_target[i]
            rows = []
            flags = []
            for j, d, c, edge in contribs:
                if not math.isfinite(c):
                    continue
                rows.append(np.roll(u[j], d) + c)
                flags.append(edge)
                if d != 0:
                    rows.append(np.roll(u[j], -d) + c)
                    flags.append(edge)
            stack = np.stack(rows)
            best = stack.min(axis=0)
            arg = stack.argmin(axis=0)
            flag_arr = np.asarray(flags)
            edge_hits += int(flag_arr[arg].sum())
            new[i] = best
        stats = self._stats_copy(m * n, edge_hits / (m * n))
        return np.where(np.isfinite(new), new, np.nan), stats

    def _sweep_generic(self, values):
        flat = values.reshape(-1)
        u = np.where(np.isfinite(flat), flat, np.inf)
        new = np.full(flat.size, np.nan)
        edge_hits = 0
        for k, q in enumerate(self._idx_valid):
            tot = u[self._gsrcs[k]] + self._gcosts[k]
            a = int(np.argmin(tot))
            if math.isfinite(tot[a]):
                new[q] = tot[a]
                if self._gedges[k][a]:
                    edge_hits += 1
        nt = self._idx_valid.size
        stats = self._stats_copy(nt, edge_hits / max(nt, 1))
        return new.reshape(values.shape), stats

    def _stats_copy(self, n_targets, boundary_fraction) -> StepStats:
        return StepStats(
            n_targets=n_targets,
            n_pairs_cached=self.stats.n_pairs_cached,
            n_failed=self.stats.n_failed,
            boundary_argmin_fraction=boundary_fraction,
            max_inner_error=self.stats.max_inner_error,
        )


def lax_oleinik_step(
    system: MassSystem,
    u: GridFunction,
    t: float,
    opts: WeakKamOptions | None = None,
    costs: TransferCosts | None = None,
) -> GridFunction:
    """One application of the step operator; t = 0 is the identity.

    The output is the raw minimum, with no gauge fixing, so monotonicity
    and constant-shift equivariance hold at the discrete level.  Step
    statistics land in the output's meta under "lo_stats".
    """
    if t < 0.0:
        raise ValueError("step time must be nonnegative")
    if t == 0.0:
        return u.copy()
    if costs is None:
        costs = TransferCosts(system, u, t, opts)
    new_vals, stats = costs.sweep(u.values)
    out = u.with_values(new_vals)
    out.meta["lo_stats"] = stats
    return out


def _interior_mask(grid: GridFunction, margin: float) -> np.ndarray:
    """Nodes at metric distance >= margin from the radial edges."""
    mask = grid.valid_mask().copy()
    if grid.chart.kind == "circle":
        return mask
    lam = grid.axes[0]
    ok = (lam >= lam[0] + margin) & (lam <= lam[-1] - margin)
    if grid.chart.kind == "ray":
        return mask & ok
    return mask & ok[:, None]


def iterate_weak_kam(
    system: MassSystem,
    u0: GridFunction,
    t: float,
    tol: float = 1e-6,
    max_sweeps: int = 200,
    opts: WeakKamOptions | None = None,
) -> WeakKamIterate:
    """Repeat the step operator until the pinned profile stops moving.

    The raw iterates grow by an additive drift (the operator has no
    fixed point on a truncated chart in the raw gauge); convergence is
    judged on the profile with the pin-node value subtracted, over
    interior nodes only, since edge nodes see a clipped source ball.
    """
    opts = opts or WeakKamOptions()
    costs = TransferCosts(system, u0, t, opts)
    margin = opts.interior_margin if opts.interior_margin is not None else costs.radius
    interior = _interior_mask(u0, margin)
    if not interior.any():
        interior = u0.valid_mask()
    pin = u0.pin_index()
    u_vals = u0.values.copy()
    res_hist: list[float] = []
    drift_hist: list[float] = []
    mininc_hist: list[float] = []
    bfrac_hist: list[float] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        w_vals, stats = costs.sweep(u_vals)
        ok = u0.valid_mask() & np.isfinite(w_vals) & np.isfinite(u_vals)
        mininc_hist.append(float((w_vals - u_vals)[ok].min()))
        drift = w_vals[pin] - u_vals[pin]
        drift_hist.append(float(drift))
        pw = w_vals - w_vals[pin]
        pu = u_vals - u_vals[pin]
        sel = interior & np.isfinite(pw) & np.isfinite(pu)
        residual = float(np.abs(pw - pu)[sel].max()) if sel.any() else math.inf
        res_hist.append(residual)
        bfrac_hist.append(stats.boundary_argmin_fraction)
        u_vals = w_vals
        if residual <= tol:
            converged = True
            break
    raw = u0.with_values(u_vals)
    pinned = u0.with_values(u_vals - u_vals[pin])
    pinned.meta["pin_index"] = pin
    pinned.meta["interior_margin"] = margin
    return WeakKamIterate(
        grid=pinned,
        raw_grid=raw,
        residual=res_hist[-1],
        residual_history=res_hist,
        drift_history=drift_hist,
        min_increment_history=mininc_hist,
        boundary_fraction_history=bfrac_hist,
        t_step=t,
        iterations=sweeps,
        converged=converged,
        pin_index=pin,
    )


# -- scale-reduced iteration -------------------------------------------


@dataclass
class HomogeneousIterate:
    """Fixed point of the step operator within the scaling-covariant class.

    A function homogeneous of degree 1 - kappa is determined by its
    sphere restriction v, and the conjugation identity between the step
    operator and the scaling action closes the class under sweeping:
    the induced update is

        v(a) <- min over (lam, b) of lam^(1-kappa) v(b) + phi(lam s_b, s_a, t)

    with the source radius lam a continuous parameter, probed on a
    geometric grid with parabolic refinement around the winner.  There
    is no radial truncation, so the boundary reservoir that drives
    truncated-lattice iterates off the exact profile does not exist
    here; from the zero seed the iterates increase to the positive
    branch of the homogeneous solution.

    values holds v at uniformly spaced angles (NaN at collision-masked
    nodes).  source_lambda and source_offset record each node's winning
    source after the final sweep; edge_fraction counts winners pinned to
    the lambda-grid or offset boundary, which signals a too-small search
    radius.
    """

    chart: object
    angles: np.ndarray
    values: np.ndarray
    t_step: float
    iterations: int
    converged: bool
    residual: float
    residual_history: list[float]
    min_increment_history: list[float]
    edge_fraction: float
    source_lambda: np.ndarray
    source_offset: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "t_step": self.t_step,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
            "residual_history": list(self.residual_history),
            "min_increment_history": list(self.min_increment_history),
            "edge_fraction": self.edge_fraction,
            "meta": dict(self.meta),
        }


def _parabola_floor(y0: float, y1: float, y2: float) -> float:
    """Vertex value of the parabola through three consecutive samples.

    Returns y1 unless the triple is finite and strictly convex; the
    vertex is clamped to at most one grid spacing from the center, so a
    degenerate fit cannot fabricate a deep minimum.
    """
    if not (math.isfinite(y0) and math.isfinite(y1) and math.isfinite(y2)):
        return y1
    denom = y0 - 2.0 * y1 + y2
    if denom <= 0.0:
        return y1
    dx = 0.5 * (y0 - y2) / denom
    if abs(dx) > 1.0:
        return y1
    return min(y1, y1 - 0.125 * (y0 - y2) ** 2 / denom)


def iterate_homogeneous(
    system: MassSystem,
    circle,
    t: float,
    n_theta: int = 128,
    n_lambda: int | None = None,
    lam_floor: float = 0.02,
    tol: float | None = None,
    max_sweeps: int = 400,
    opts: WeakKamOptions | None = None,
    seed_values: np.ndarray | None = None,
) -> HomogeneousIterate:
    """Scale-reduced sweep loop on a circle chart.

    Transfer costs are cached once per (angle pair, source radius); on
    rotation-invariant circles the angular key collapses to |offset|.
    Cache fill order is sorted, so the result is thread-count
    independent.  The residual is the plain sup change per sweep: the
    homogeneous class has no additive gauge, so no pinning is needed.
    """
    if t <= 0.0:
        raise ValueError("step time must be positive")
    if n_theta < 8:
        raise ValueError("need at least 8 angular nodes")
    opts = opts or WeakKamOptions()
    aopts = opts.inner_action_options()
    kap = system.kappa
    R = search_radius(system, t, opts.radius_factor)
    if n_lambda is None:
        n_lambda = max(24, n_theta // 2)
    lam_lo = max(lam_floor, 1.0 - R)
    lam_hi = 1.0 + R
    lams = np.geomspace(lam_lo, lam_hi, n_lambda)
    pow_lam = lams ** (1.0 - kap)

    angles = uniform_angles(n_theta)
    valid = circle.node_valid(angles)
    if not valid.any():
        raise ChartRangeError("no collision-free nodes on the circle")

    # admissible offsets: some lambda keeps the chord inside the ball
    half = n_theta // 2
    all_offsets = list(range(-half, half + 1)) if 2 * half < n_theta else list(
        range(-half, half)
    )
    dth = TWO_PI / n_theta

    def lam_mask(offset: int) -> np.ndarray:
        cs = math.cos(offset * dth)
        chord2 = lams * lams + 1.0 - 2.0 * lams * cs
        return chord2 <= R * R

    offsets = [d for d in all_offsets if lam_mask(d).any()]
    if not offsets:
        raise ChartRangeError("search radius reaches no source nodes")

    mirror = bool(getattr(circle, "rotation_invariant", False))
    if mirror:
        # cost depends on |offset| only: planar rotations plus reflection
        # are mass-metric isometries fixing the shape family
        keys = sorted({abs(d) for d in offsets})
        jobs = [("d", d) for d in keys]
    else:
        keys = []
        for a in range(n_theta):
            if not valid[a]:
                continue
            for d in offsets:
                b = (a + d) % n_theta
                if valid[b]:
                    keys.append((a, d))
        jobs = [("ad", key) for key in sorted(keys)]

    targets = circle.point(angles)
    n_failed = 0

    def fill(job):
        kind, key = job
        if kind == "d":
            d = key
            x = targets[0]
            src_dir = circle.point(d * dth)
        else:
            a, d = key
            x = targets[a]
            src_dir = circle.point(angles[(a + d) % n_theta])
        mask = lam_mask(d)
        col = np.full(n_lambda, np.inf)
        bad = 0
        for k in np.nonzero(mask)[0]:
            val, _err = _phi_pair(system, lams[k] * src_dir, x, t, aopts)
            col[k] = val
            if not math.isfinite(val):
                bad += 1
        return col, bad

    filled = parallel_map(fill, jobs, threads=opts.threads)
    cost: dict = {}
    for job, (col, bad) in zip(jobs, filled):
        cost[job[1]] = col
        n_failed += bad

    v = np.zeros(n_theta) if seed_values is None else np.asarray(
        seed_values, dtype=float
    ).copy()
    if v.shape != (n_theta,):
        raise ValueError("seed_values must match the angular node count")
    v[~valid] = np.nan

    psi_scale = float(np.nanmax(circle.psi_values(angles[valid])))
    if tol is None:
        tol = 1e-12 * max(1.0, psi_scale)

    valid_idx = np.nonzero(valid)[0]
    max_abs_off = max(abs(o) for o in offsets)
    # mirror charts share one cost column per |offset|; generic charts get
    # a per-target stack so the sweep stays a handful of array ops
    stacked: dict[int, np.ndarray] = {}
    if mirror:
        for d in offsets:
            stacked[d] = cost[abs(d)]
    else:
        per_target = {
            d: np.stack(
                [
                    cost.get((a, d), np.full(n_lambda, np.inf))
                    for a in valid_idx
                ]
            )
            for d in offsets
        }

    res_hist: list[float] = []
    mininc_hist: list[float] = []
    best_lam = np.full(n_theta, np.nan)
    best_off = np.zeros(n_theta, dtype=int)
    edge_fraction = 0.0
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        best = np.full(len(valid_idx), np.inf)
        bd = np.zeros(len(valid_idx), dtype=int)
        bk = np.zeros(len(valid_idx), dtype=int)
        for d in offsets:
            vb = v[(valid_idx + d) % n_theta]
            src_ok = np.isfinite(vb)
            if not src_ok.any():
                continue
            rows = stacked[d][None, :] if mirror else per_target[d]
            cand = pow_lam[None, :] * vb[:, None] + rows
            with np.errstate(invalid="ignore"):
                cand = np.where(src_ok[:, None], cand, np.inf)
            k = np.argmin(cand, axis=1)
            val = cand[np.arange(len(valid_idx)), k]
            better = val < best
            best = np.where(better, val, best)
            bd = np.where(better, d, bd)
            bk = np.where(better, k, bk)
        w = np.full(n_theta, np.nan)
        n_edge = 0
        for i, a in enumerate(valid_idx):
            if not math.isfinite(best[i]):
                continue
            d, k = int(bd[i]), int(bk[i])
            vb = v[(a + d) % n_theta]
            row = pow_lam * vb + (stacked[d] if mirror else per_target[d][i])
            if 0 < k < n_lambda - 1:
                w[a] = _parabola_floor(row[k - 1], row[k], row[k + 1])
            else:
                w[a] = row[k]
                n_edge += 1
            if abs(d) == max_abs_off:
                n_edge += 1
            best_lam[a] = lams[k]
            best_off[a] = d
        diff = w[valid_idx] - v[valid_idx]
        finite = np.isfinite(diff)
        residual = float(np.abs(diff[finite]).max()) if finite.any() else math.inf
        mininc = float(diff[finite].min()) if finite.any() else math.nan
        res_hist.append(residual)
        mininc_hist.append(mininc)
        edge_fraction = n_edge / max(1, len(valid_idx))
        v = w
        if residual <= tol:
            converged = True
            break

    return HomogeneousIterate(
        chart=circle,
        angles=angles,
        values=v,
        t_step=t,
        iterations=sweeps,
        converged=converged,
        residual=res_hist[-1] if res_hist else math.inf,
        residual_history=res_hist,
        min_increment_history=mininc_hist,
        edge_fraction=edge_fraction,
        source_lambda=best_lam,
        source_offset=best_off,
        meta={
            "n_lambda": n_lambda,
            "lam_lo": lam_lo,
            "lam_hi": lam_hi,
            "search_radius": R,
            "n_cost_keys": len(jobs),
            "n_failed": n_failed,
            "tol": tol,
        },
    )


# -- scaling group -----------------------------------------------------


def scaling_action(
    u: GridFunction, lam: float, max_invalid_fraction: float = 0.9
) -> GridFunction:
    """Pointwise lam^(kappa-1) * u(lam * x) with radial interpolation.

    Nodes whose scaled radius leaves the lattice become invalid (NaN).
    Scaling by a lattice ratio lands on nodes exactly (up to a snap of
    1e-9 in the weight), so powers of two are index shifts.
    """
    if lam <= 0.0:
        raise ValueError("scaling factor must be positive")
    if u.chart.kind == "circle":
        raise ChartRangeError("circle lattices have no radial direction to scale")
    kap = u.chart.system.kappa
    lam_nodes = u.axes[0]
    target = lam * lam_nodes
    out_of = (target < lam_nodes[0] * (1.0 - 1e-12)) | (
        target > lam_nodes[-1] * (1.0 + 1e-12)
    )
    tc = np.clip(target, lam_nodes[0], lam_nodes[-1])
    idx = np.clip(np.searchsorted(lam_nodes, tc, side="right") - 1, 0,
                  lam_nodes.size - 2)
    w = (tc - lam_nodes[idx]) / (lam_nodes[idx + 1] - lam_nodes[idx])
    w = np.clip(w, 0.0, 1.0)
    vals = np.where(u.valid_mask(), u.values, np.nan)
    lo = vals[idx]
    hi = vals[idx + 1]
    snap_lo = w < EXACT_NODE_SNAP
    snap_hi = w > 1.0 - EXACT_NODE_SNAP
    if u.chart.kind == "cone":
        wb = w[:, None]
        mixed = (1.0 - wb) * lo + wb * hi
        mixed = np.where(snap_lo[:, None], lo, mixed)
        mixed = np.where(snap_hi[:, None], hi, mixed)
        mixed[out_of] = np.nan
    else:
        mixed = (1.0 - w) * lo + w * hi
        mixed = np.where(snap_lo, lo, mixed)
        mixed = np.where(snap_hi, hi, mixed)
        mixed[out_of] = np.nan
    new_vals = lam ** (kap - 1.0) * mixed
    new_valid = np.isfinite(new_vals)
    invalid_fraction = 1.0 - float(new_valid.sum()) / new_valid.size
    if invalid_fraction > max_invalid_fraction:
        raise ChartRangeError(
            f"scaling by {lam} leaves {invalid_fraction:.0%} of the lattice"
        )
    out = GridFunction(
        chart=u.chart,
        axes=u.axes,
        values=new_vals,
        valid=new_valid if not new_valid.all() else None,
        meta={"scaled_by": lam, "invalid_fraction": invalid_fraction},
    )
    return out


def normalize_h0(u: GridFunction) -> tuple[GridFunction, float]:
    """Subtract the extrapolated origin value (radial power-law fit).

    The profile near the inner edge behaves like u(0) + c * lam^(1-kappa);
    two innermost valid nodes per angular column determine u(0), and the
    average over columns is subtracted.
    """
    kap = u.chart.system.kappa
    p = 1.0 - kap
    lam = u.axes[0]
    vals = np.where(u.valid_mask(), u.values, np.nan)
    if u.chart.kind == "ray":
        cols = vals[:, None]
    elif u.chart.kind == "cone":
        cols = vals
    else:
        raise ChartRangeError("origin normalization needs a radial lattice")
    estimates = []
    for c in range(cols.shape[1]):
        col = cols[:, c]
        good = np.nonzero(np.isfinite(col))[0]
        if good.size < 2:
            continue
        i0, i1 = good[0], good[1]
        a0, a1 = lam[i0] ** p, lam[i1] ** p
        estimates.append((col[i0] * a1 - col[i1] * a0) / (a1 - a0))
    if not estimates:
        raise ChartRangeError("no radial column has two valid nodes")
    u0 = float(np.mean(estimates))
    out = u.with_values(u.values - u0)
    out.meta["origin_gauge"] = u0
    return out, u0


def homogenize(
    u: GridFunction,
    lam_grid: list[float] | None = None,
    normalize: bool = True,
) -> GridFunction:
    """Pointwise minimum of the scaling action over a grid of factors.

    The input is origin-normalized first (the additive gauge must vanish
    at zero for the scaling minimum to be meaningful).  lam = 1 is always
    included, so every node keeps at least one candidate.
    """
    if lam_grid is not None and len(lam_grid) == 0:
        raise ValueError("scaling grid must not be empty")
    if lam_grid is None:
        lam_nodes = u.axes[0]
        ratios = lam_nodes / lam_nodes[0]
        lam_grid = sorted(set(np.concatenate([ratios, 1.0 / ratios]).tolist()))
    base, gauge = normalize_h0(u) if normalize else (u, 0.0)
    stack = [np.where(base.valid_mask(), base.values, np.nan)]
    for lam in lam_grid:
        if abs(lam - 1.0) < 1e-15:
            continue
        su = scaling_action(base, lam, max_invalid_fraction=1.0)
        stack.append(np.where(su.valid_mask(), su.values, np.nan))
    arr = np.stack(stack)
    with np.errstate(invalid="ignore"):
        out_vals = np.nanmin(arr, axis=0)
    out = GridFunction(
        chart=u.chart,
        axes=u.axes,
        values=out_vals,
        valid=None if u.valid is None else u.valid.copy(),
        meta={"origin_gauge": gauge, "lam_grid": list(lam_grid)},
    )
    return out


def scaling_invariance_defect(
    u: GridFunction, eta: float, trim_octaves: float = 0.0
) -> float:
    """Sup |S_eta u - u| over nodes where both sides exist."""
    su = scaling_action(u, eta, max_invalid_fraction=1.0)
    a = np.where(u.valid_mask(), u.values, np.nan)
    b = np.where(su.valid_mask(), su.values, np.nan)
    sel = np.isfinite(a) & np.isfinite(b)
    if trim_octaves > 0.0:
        lam = u.axes[0]
        lo = lam[0] * 2.0**trim_octaves
        hi = lam[-1] / 2.0**trim_octaves
        keep = (lam >= lo * (1 - 1e-12)) & (lam <= hi * (1 + 1e-12))
        sel &= keep[:, None] if u.chart.kind == "cone" else keep
    if not sel.any():
        raise ChartRangeError("no overlap after scaling")
    return float(np.abs(a - b)[sel].max())


def group_law_defect(u: GridFunction, lam: float, eta: float) -> float:
    """Sup |S_lam S_eta u - S_(lam*eta) u| over the common region."""
    two = scaling_action(scaling_action(u, eta, 1.0), lam, 1.0)
    one = scaling_action(u, lam * eta, 1.0)
    a = np.where(two.valid_mask(), two.values, np.nan)
    b = np.where(one.valid_mask(), one.values, np.nan)
    sel = np.isfinite(a) & np.isfinite(b)
    if not sel.any():
        raise ChartRangeError("no overlap for the composed scalings")
    return float(np.abs(a - b)[sel].max())


# -- subsolution and conjugation checks --------------------------------


def _phi_free_error(r: PhiResult, aopts: ActionOptions) -> float:
    """Error budget for a free-time solve, mirroring the verdict budget."""
    scale = max(1.0, abs(r.value))
    err = 3.0 * r.error_estimate
    err += 25.0 * aopts.rel_time_tol**2 * abs(r.value)
    err += 100.0 * aopts.gtol * scale
    return err + 1e-12 * scale


def subsolution_check(
    system: MassSystem,
    u: GridFunction,
    pairs,
    action_opts: ActionOptions | None = None,
    slack: float = 0.0,
    threads: int | None = None,
) -> dict:
    """Test u(x) - u(y) <= phi(x, y) on parameter-space pairs.

    Reports excesses beyond the per-pair solver error budget plus the
    caller's slack (interpolation allowance when pairs are off-node).
    """
    aopts = action_opts or ActionOptions(
        n_nodes=48, scan_nodes=12, rel_time_tol=1e-3
    )
    pair_list = [
        (np.atleast_1d(np.asarray(px, dtype=float)),
         np.atleast_1d(np.asarray(py, dtype=float)))
        for px, py in pairs
    ]

    def one(pair):
        px, py = pair
        ux = float(u.evaluate(px[None, :])[0])
        uy = float(u.evaluate(py[None, :])[0])
        if not (math.isfinite(ux) and math.isfinite(uy)):
            return None
        if u.chart.kind == "ray":
            x = u.chart.point(px[0])
            y = u.chart.point(py[0])
        elif u.chart.kind == "circle":
            x = u.chart.point(px[0])
            y = u.chart.point(py[0])
        else:
            x = u.chart.point(px[0], px[1])
            y = u.chart.point(py[0], py[1])
        r = minimize_free_time(system, x, y, aopts)
        err = _phi_free_error(r, aopts)
        excess = ux - uy - r.value
        return {
            "x": px.tolist(),
            "y": py.tolist(),
            "phi": r.value,
            "u_x": ux,
            "u_y": uy,
            "excess": excess,
            "error_budget": err + slack,
            "violation": bool(excess > err + slack),
        }

    rows = [r for r in parallel_map(one, pair_list, threads) if r is not None]
    violations = [r for r in rows if r["violation"]]
    worst = max((r["excess"] for r in rows), default=-math.inf)
    return {
        "n_pairs": len(rows),
        "n_skipped": len(pair_list) - len(rows),
        "n_violations": len(violations),
        "worst_excess": worst,
        "violations": violations,
    }


def conjugation_check(
    system: MassSystem,
    u: GridFunction,
    t: float,
    lam: float,
    opts: WeakKamOptions | None = None,
    return_details: bool = False,
):
    """Discrepancy between stepping a scaled profile and scaling a step.

    The two sides use independently built cost tables (times t and
    lam^(1+kappa) t), so agreement is a real consistency check, not an
    identity of the code path.
    """
    opts = opts or WeakKamOptions()
    su = scaling_action(u, lam, max_invalid_fraction=1.0)
    left = lax_oleinik_step(system, su, t, opts)
    t2 = lam ** (1.0 + system.kappa) * t
    stepped = lax_oleinik_step(system, u, t2, opts)
    right = scaling_action(stepped, lam, max_invalid_fraction=1.0)
    a = np.where(np.isfinite(left.values), left.values, np.nan)
    b = np.where(np.isfinite(right.values), right.values, np.nan)
    sel = np.isfinite(a) & np.isfinite(b)
    if not sel.any():
        raise ChartRangeError("no overlap between the two sides")
    disc = float(np.abs(a - b)[sel].max())
    if not return_details:
        return disc
    details = {
        "discrepancy": disc,
        "n_overlap": int(sel.sum()),
        "left_inner_error": left.meta["lo_stats"].max_inner_error,
        "right_inner_error": stepped.meta["lo_stats"].max_inner_error,
        "left_boundary_fraction": left.meta["lo_stats"].boundary_argmin_fraction,
        "right_boundary_fraction": stepped.meta["lo_stats"].boundary_argmin_fraction,
    }
    return disc, details


# -- horizon limit along a minimizing ray ------------------------------


def busemann(
    system: MassSystem,
    s_min: np.ndarray,
    x: np.ndarray,
    t_list,
    tol: float = 1e-3,
    action_opts: ActionOptions | None = None,
) -> tuple[float, dict]:
    """Limit of phi(x, t*s) - phi(t*s, 0) along an expanding ray.

    The second term is exact for a central shape (the homothetic ray
    calibrates): phi(t*s, 0) = t^(1-kappa) * psi(s).  The first term is
    a free-time solve per t.  Convergence is declared when the last two
    evaluations differ by at most tol.
    """
    ts = np.asarray(t_list, dtype=float)
    if ts.size < 2:
        raise ValueError("need at least two ray times")
    if np.any(np.diff(ts) <= 0.0) or ts[0] <= 0.0:
        raise ValueError("ray times must be positive and increasing")
    ej = make_ejection(system, s_min)
    aopts = action_opts or ActionOptions(
        n_nodes=48, scan_nodes=12, rel_time_tol=1e-3
    )
    kap = system.kappa
    g = []
    for t in ts:
        r = minimize_free_time(system, x, t * ej.s, aopts)
        g.append(r.value - t ** (1.0 - kap) * ej.psi)
    g_arr = np.array(g)
    diffs = np.abs(np.diff(g_arr))
    converged = bool(diffs[-1] <= tol)
    history = {
        "t_list": ts.tolist(),
        "values": g_arr.tolist(),
        "diffs": diffs.tolist(),
        "converged": converged,
        "spans_two_decades": bool(ts[-1] / ts[0] >= 100.0 * (1.0 - 1e-9)),
        "psi": ej.psi,
    }
    return float(g_arr[-1]), history
