"""Feasibility boundary geometry.

The feasible region of a phase is the set where every constraint is
positive; its boundary is the zero set of the product

    H(x, p) = prod_k h_k(x, p).

Points on that boundary behave like equilibria of the transformed field
H f (it vanishes there), and they are classified by the sign of the
drift of H along the flow,

    Hdot = (dH/dx) f :   Hdot < 0  leaving the region  (stable side),
                         Hdot > 0  entering            (unstable side),
                         Hdot = 0  tangent             (semi-saddle).

All derivatives of H come from the product rule over the per-constraint
values and gradients; exclusion products are formed explicitly so that
zeros on the boundary are handled exactly.

The module also builds the union boundary of the fault and post-fault
phases (duplicate constraint names are kept once, from the post side)
and samples stability regions of the post-fault system on a rectangular
grid, annotating the constraint boundary with its point classification,
refined semi-saddles, and backward-orbit samples through them.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CctError, EmptyCombinedBoundary, NumericalBlowup, StiffnessFailure
from .integrator import EventConfig, EventKind, IntegrationOptions, integrate
from .model import (
    ConstrainedSystem,
    Constraint,
    Phase,
    eval_f,
    eval_jacobians,
    find_equilibrium,
)

__all__ = [
    "PseudoEpKind",
    "PseudoEpClass",
    "eval_H",
    "eval_H_gradients",
    "eval_H_hessians",
    "eval_H_dot",
    "eval_H_dot_gradients",
    "transformed_field",
    "classify_pseudo_ep",
    "combined_constraints",
    "combined_H",
    "phase_guard",
    "combined_guard",
    "crossing_labeler",
    "CellClass",
    "GridSpec",
    "BoundaryPoint",
    "SrGrid",
    "sample_stability_region",
]

# Default |H| tolerance for deciding a point sits on the boundary.
_BOUNDARY_TOL = 1e-8
# Default tangency tolerance, scaled by |dH/dx| |f| before use.
_TANGENCY_TOL = 1e-6


class PseudoEpKind(Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    SEMI_SADDLE = "semi_saddle"
    NOT_ON_BOUNDARY = "not_on_boundary"


@dataclass(frozen=True)
class PseudoEpClass:
    """Point classification on (or off) the feasibility boundary."""

    kind: PseudoEpKind
    h_value: float
    h_dot: float
    threshold: float  # the scaled tangency band actually applied


def _constraint_values(constraints: Sequence[Constraint], x, p) -> np.ndarray:
    return np.array([c.value(x, p) for c in constraints], dtype=float)


def _exclusion_products(values: np.ndarray) -> np.ndarray:
    """P[k] = product of all values except the k-th, zero-safe."""
    m = len(values)
    prefix = np.ones(m + 1)
    suffix = np.ones(m + 1)
    for i in range(m):
        prefix[i + 1] = prefix[i] * values[i]
        suffix[m - 1 - i] = suffix[m - i] * values[m - 1 - i]
    return prefix[:m] * suffix[1:]


def _pair_exclusion(values: np.ndarray, k: int, j: int) -> float:
    keep = [v for i, v in enumerate(values) if i not in (k, j)]
    return float(np.prod(keep)) if keep else 1.0


def _product_and_gradients(constraints, x, p, n, n_p):
    values = _constraint_values(constraints, x, p)
    h = float(np.prod(values)) if len(values) else 1.0
    excl = _exclusion_products(values) if len(values) else np.empty(0)
    gx = np.zeros(n)
    gp = np.zeros(n_p)
    for k, c in enumerate(constraints):
        gx += excl[k] * np.asarray(c.grad_x(x, p), dtype=float)
        gp += excl[k] * np.asarray(c.grad_p(x, p), dtype=float)
    return h, gx, gp


def eval_H(system: ConstrainedSystem, phase: Phase, x, p) -> float:
    """Product of the phase's constraints; 1.0 for a constraint-free phase."""
    values = _constraint_values(system.phases[phase].constraints, x, p)
    return float(np.prod(values)) if len(values) else 1.0


def eval_H_gradients(system: ConstrainedSystem, phase: Phase, x, p) -> tuple[np.ndarray, np.ndarray]:
    """(dH/dx, dH/dp) by the product rule."""
    _, gx, gp = _product_and_gradients(
        system.phases[phase].constraints, x, p, system.n, system.n_params
    )
    return gx, gp


def eval_H_hessians(system: ConstrainedSystem, phase: Phase, x, p) -> tuple[np.ndarray, np.ndarray]:
    """(d2H/dx2, d2H/dxdp); needs per-constraint second derivatives."""
    constraints = system.phases[phase].constraints
    n, n_p = system.n, system.n_params
    values = _constraint_values(constraints, x, p)
    excl = _exclusion_products(values) if len(values) else np.empty(0)
    hxx = np.zeros((n, n))
    hxp = np.zeros((n, n_p))
    gxs = [np.asarray(c.grad_x(x, p), dtype=float) for c in constraints]
    gps = [np.asarray(c.grad_p(x, p), dtype=float) for c in constraints]
    for k, c in enumerate(constraints):
        if c.hess_xx is None or c.hess_xp is None:
            raise CctError(
                f"constraint {c.name!r} lacks second derivatives; "
                "they are required for boundary curvature"
            )
        hxx += excl[k] * np.asarray(c.hess_xx(x, p), dtype=float)
        hxp += excl[k] * np.asarray(c.hess_xp(x, p), dtype=float)
        for j in range(len(constraints)):
            if j == k:
                continue
            pkj = _pair_exclusion(values, k, j)
            hxx += pkj * np.outer(gxs[k], gxs[j])
            hxp += pkj * np.outer(gxs[k], gps[j])
    return hxx, hxp


def eval_H_dot(system: ConstrainedSystem, phase: Phase, x, p) -> float:
    """Drift of H along the flow, (dH/dx) f."""
    gx, _ = eval_H_gradients(system, phase, x, p)
    return float(gx @ eval_f(system, phase, x, p))


def eval_H_dot_gradients(system: ConstrainedSystem, phase: Phase, x, p) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of Hdot = (dH/dx) f with respect to x and p.

    d Hdot/dx = (d2H/dx2) f + (df/dx)^T dH/dx
    d Hdot/dp = (d2H/dxdp)^T f + (df/dp)^T dH/dx
    """
    gx, _ = eval_H_gradients(system, phase, x, p)
    hxx, hxp = eval_H_hessians(system, phase, x, p)
    f = eval_f(system, phase, x, p)
    jx, jp = eval_jacobians(system, phase, x, p)
    return hxx @ f + jx.T @ gx, hxp.T @ f + jp.T @ gx


def transformed_field(system: ConstrainedSystem, phase: Phase, x, p) -> np.ndarray:
    """H f: the field whose new equilibria are the boundary points."""
    return eval_H(system, phase, x, p) * eval_f(system, phase, x, p)


def classify_pseudo_ep(
    system: ConstrainedSystem,
    phase: Phase,
    x,
    p,
    boundary_tol: float = _BOUNDARY_TOL,
    tangency_tol: float = _TANGENCY_TOL,
) -> PseudoEpClass:
    """Classify a boundary point by the sign of Hdot.

    The tangency band is ``tangency_tol`` scaled by |dH/dx| |f| so the
    verdict does not depend on the scaling of the constraints or of
    time.
    """
    h, gx, _ = _product_and_gradients(
        system.phases[phase].constraints, x, p, system.n, system.n_params
    )
    f = eval_f(system, phase, x, p)
    h_dot = float(gx @ f)
    threshold = tangency_tol * float(np.linalg.norm(gx) * np.linalg.norm(f))
    if abs(h) > boundary_tol:
        kind = PseudoEpKind.NOT_ON_BOUNDARY
    elif h_dot < -threshold:
        kind = PseudoEpKind.STABLE
    elif h_dot > threshold:
        kind = PseudoEpKind.UNSTABLE
    else:
        kind = PseudoEpKind.SEMI_SADDLE
    return PseudoEpClass(kind=kind, h_value=h, h_dot=h_dot, threshold=threshold)


# ── combined fault/post boundary ──────────────────────────────────────────────


def combined_constraints(system: ConstrainedSystem) -> tuple[tuple[Constraint, ...], tuple[str, ...]]:
    """Union of post and fault constraints; fault-side name duplicates dropped."""
    post = system.phases[Phase.POST_FAULT].constraints
    post_names = {c.name for c in post}
    kept = list(post)
    excluded = []
    for c in system.phases[Phase.FAULT_ON].constraints:
        if c.name in post_names:
            excluded.append(c.name)
        else:
            kept.append(c)
    if not kept:
        raise EmptyCombinedBoundary(
            "neither the fault nor the post-fault phase declares constraints"
        )
    return tuple(kept), tuple(excluded)


def combined_H(system: ConstrainedSystem, x, p) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Product over the union boundary and its (dH/dx, dH/dp)."""
    kept, _ = combined_constraints(system)
    h, gx, gp = _product_and_gradients(kept, x, p, system.n, system.n_params)
    return h, (gx, gp)


def phase_guard(system: ConstrainedSystem, phase: Phase, p) -> Callable[[np.ndarray], float]:
    """Scalar guard H_phase(x) for event detection."""
    constraints = system.phases[phase].constraints
    p = np.asarray(p, dtype=float)

    def guard(x: np.ndarray) -> float:
        h = 1.0
        for c in constraints:
            h *= c.value(x, p)
        return h

    return guard


def combined_guard(system: ConstrainedSystem, p) -> Callable[[np.ndarray], float]:
    """Scalar guard over the union of fault and post constraints."""
    kept, _ = combined_constraints(system)
    p = np.asarray(p, dtype=float)

    def guard(x: np.ndarray) -> float:
        h = 1.0
        for c in kept:
            h *= c.value(x, p)
        return h

    return guard


def crossing_labeler(constraints: Sequence[Constraint], p) -> Callable[[np.ndarray], str]:
    """Names the constraint closest to zero at a crossing state."""
    p = np.asarray(p, dtype=float)

    def label(x: np.ndarray) -> str:
        return min(constraints, key=lambda c: abs(c.value(x, p))).name

    return label


# ── stability region sampling ─────────────────────────────────────────────────


class CellClass(Enum):
    STABLE = "stable"
    HITS_BOUNDARY = "hits_boundary"
    DIVERGES = "diverges"


@dataclass(frozen=True)
class GridSpec:
    """Rectangular sampling window for planar systems."""

    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    n1: int = 100
    n2: int = 100

    def __post_init__(self) -> None:
        if not (self.x1_max > self.x1_min and self.x2_max > self.x2_min):
            raise ValueError("grid window is empty")
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError("grid needs at least 2 samples per axis")

    @property
    def x1(self) -> np.ndarray:
        return np.linspace(self.x1_min, self.x1_max, self.n1)

    @property
    def x2(self) -> np.ndarray:
        return np.linspace(self.x2_min, self.x2_max, self.n2)


@dataclass(frozen=True)
class BoundaryPoint:
    """A sampled point of one constraint's zero set, classified."""

    x: np.ndarray
    constraint: str
    kind: PseudoEpKind
    h_dot: float


@dataclass(frozen=True)
class SrGrid:
    """Classified stability-region grid of the post-fault system."""

    spec: GridSpec
    classes: np.ndarray  # (n1, n2) object array of CellClass
    sep: np.ndarray
    boundary_points: tuple[BoundaryPoint, ...]
    semi_saddles: tuple[BoundaryPoint, ...]
    manifolds: tuple[np.ndarray, ...]  # backward-orbit polylines through semi-saddles

    def stable_mask(self) -> np.ndarray:
        return np.array(
            [[c is CellClass.STABLE for c in row] for row in self.classes], dtype=bool
        )


_GRID_OPTS = IntegrationOptions(rel_tol=1e-6, abs_tol=1e-9, t_max=20.0, max_step=0.5)
_GRID_SEP_RADIUS = 1e-2


def classify_grid_point(
    system: ConstrainedSystem,
    p: np.ndarray,
    x0: np.ndarray,
    x_sep: np.ndarray,
    opts: IntegrationOptions = _GRID_OPTS,
    sep_radius: float = _GRID_SEP_RADIUS,
) -> CellClass:
    """STABLE, HITS_BOUNDARY or DIVERGES verdict for one start point."""
    x0 = np.asarray(x0, dtype=float)
    # The product guard is blind to points violating an even number of
    # constraints at once, so feasibility of the start is checked per
    # constraint.
    if any(c.value(x0, p) <= 0.0 for c in system.phases[Phase.POST_FAULT].constraints):
        return CellClass.HITS_BOUNDARY
    guard = phase_guard(system, Phase.POST_FAULT, p)
    events = EventConfig(
        boundary=guard,
        terminal_on_crossing=True,
        sep_target=np.asarray(x_sep, dtype=float),
        sep_radius=sep_radius,
        terminal_on_sep=True,
    )
    try:
        traj = integrate(system, Phase.POST_FAULT, x0, p, opts, events)
    except (NumericalBlowup, StiffnessFailure):
        return CellClass.DIVERGES
    if traj.first_event(EventKind.CONSTRAINT_CROSSING) is not None:
        return CellClass.HITS_BOUNDARY
    if traj.first_event(EventKind.CONVERGED_TO_SEP) is not None:
        return CellClass.STABLE
    return CellClass.DIVERGES


def _classify_rows(factory, factory_args, p, spec, opts, sep_radius, x_sep, rows):
    system = factory(*factory_args)
    x1, x2 = spec.x1, spec.x2
    out = []
    for i in rows:
        row = [
            classify_grid_point(system, p, np.array([x1[i], x2[j]]), x_sep, opts, sep_radius)
            for j in range(spec.n2)
        ]
        out.append((i, row))
    return out


def _scan_zero_crossings(values: np.ndarray, coords: np.ndarray):
    """Indices and interpolation weights where consecutive samples change sign."""
    hits = []
    for i in range(len(values) - 1):
        a, b = values[i], values[i + 1]
        if a == 0.0:
            hits.append((coords[i], 0.0))
        elif (a > 0.0) != (b > 0.0):
            w = a / (a - b)
            hits.append((coords[i] + w * (coords[i + 1] - coords[i]), w))
    if len(values) and values[-1] == 0.0:
        hits.append((coords[-1], 0.0))
    return [h[0] for h in hits]


def _project_to_constraint(c: Constraint, x: np.ndarray, p: np.ndarray, iters: int = 6) -> np.ndarray:
    """Pull a nearby point onto h = 0 along the constraint gradient."""
    x = x.copy()
    for _ in range(iters):
        v = c.value(x, p)
        g = np.asarray(c.grad_x(x, p), dtype=float)
        gg = float(g @ g)
        if gg == 0.0:
            break
        x -= (v / gg) * g
        if abs(c.value(x, p)) < 1e-13:
            break
    return x


def _boundary_samples(system, p, spec, constraint: Constraint):
    """Feasible-boundary points of one constraint inside the window."""
    others = [
        c for c in system.phases[Phase.POST_FAULT].constraints if c.name != constraint.name
    ]
    pts = []
    x1, x2 = spec.x1, spec.x2
    for i, a in enumerate(x1):
        vals = np.array([constraint.value(np.array([a, b]), p) for b in x2])
        for b_root in _scan_zero_crossings(vals, x2):
            pts.append(np.array([a, b_root]))
    for j, b in enumerate(x2):
        vals = np.array([constraint.value(np.array([a, b]), p) for a in x1])
        for a_root in _scan_zero_crossings(vals, x1):
            pts.append(np.array([a_root, b]))
    refined = []
    for x in pts:
        x = _project_to_constraint(constraint, x, p)
        if all(o.value(x, p) >= -1e-10 for o in others):
            refined.append(x)
    refined.sort(key=lambda x: (x[0], x[1]))
    deduped = []
    for x in refined:
        if not deduped or np.linalg.norm(x - deduped[-1]) > 1e-9:
            deduped.append(x)
    return deduped


def _refine_semi_saddle(system, p, constraint, x_a, x_b, iters: int = 80):
    """Bisect Hdot's sign change along the constraint between two points."""

    def h_dot_at(x):
        return eval_H_dot(system, Phase.POST_FAULT, x, p)

    g_a = h_dot_at(x_a)
    lo, hi = x_a, x_b
    for _ in range(iters):
        mid = _project_to_constraint(constraint, 0.5 * (lo + hi), p)
        g_mid = h_dot_at(mid)
        if (g_a > 0.0) == (g_mid > 0.0):
            lo, g_a = mid, g_mid
        else:
            hi = mid
        if np.linalg.norm(hi - lo) < 1e-12:
            break
    return _project_to_constraint(constraint, 0.5 * (lo + hi), p)


def _manifold_samples(system, p, x_saddle, spec, opts):
    """Backward orbit through a semi-saddle, clipped to the window."""
    dyn = system.phases[Phase.POST_FAULT]

    reversed_system = ConstrainedSystem(
        n=system.n,
        param_names=system.param_names,
        phases={
            ph: replace(dyn, f=lambda x, q: -np.asarray(dyn.f(x, q)),
                        jac_x=lambda x, q: -np.asarray(dyn.jac_x(x, q)),
                        jac_p=lambda x, q: -np.asarray(dyn.jac_p(x, q)))
            for ph in Phase
        },
    )
    for horizon in (6.0, 2.5, 1.0, 0.4):
        try:
            traj = integrate(
                reversed_system, Phase.POST_FAULT, x_saddle, p,
                replace(opts, t_max=horizon),
            )
        except (NumericalBlowup, StiffnessFailure):
            continue
        pts = traj.states
        inside = (
            (pts[:, 0] >= spec.x1_min) & (pts[:, 0] <= spec.x1_max)
            & (pts[:, 1] >= spec.x2_min) & (pts[:, 1] <= spec.x2_max)
        )
        if not inside.any():
            return traj.states[:1]
        stop = int(np.argmin(inside)) if not inside.all() else len(pts)
        return pts[:stop][::-1]  # chronological order, ending at the saddle
    return np.asarray([x_saddle])


def sample_stability_region(
    system: ConstrainedSystem,
    p: np.ndarray,
    spec: GridSpec,
    opts: IntegrationOptions = _GRID_OPTS,
    sep_radius: float = _GRID_SEP_RADIUS,
    sep_guess: Optional[np.ndarray] = None,
    jobs: int = 1,
    system_factory=None,
) -> SrGrid:
    """Classify every grid point of the post-fault system.

    A point is STABLE when its trajectory converges to the post-fault
    SEP without leaving the feasible region, HITS_BOUNDARY when the
    feasibility product crosses zero first (or the point starts
    infeasible), DIVERGES otherwise.  ``jobs > 1`` distributes rows
    over worker processes; ``system_factory`` must then be a picklable
    (callable, args) pair that rebuilds the system.
    """
    if system.n != 2:
        raise CctError("stability-region grids are only supported for planar systems")
    p = np.asarray(p, dtype=float)
    guess = np.zeros(2) if sep_guess is None else np.asarray(sep_guess, dtype=float)
    x_sep = find_equilibrium(system, Phase.POST_FAULT, p, guess).x

    classes = np.empty((spec.n1, spec.n2), dtype=object)
    if jobs > 1 and system_factory is not None:
        factory, factory_args = system_factory
        chunks = np.array_split(np.arange(spec.n1), jobs)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(
                    _classify_rows, factory, factory_args, p, spec, opts,
                    sep_radius, x_sep, chunk.tolist(),
                )
                for chunk in chunks if len(chunk)
            ]
            for fut in futures:
                for i, row in fut.result():
                    classes[i, :] = row
    else:
        for i, row in _classify_rows(
            lambda: system, (), p, spec, opts, sep_radius, x_sep, range(spec.n1)
        ):
            classes[i, :] = row

    boundary_points: list[BoundaryPoint] = []
    semi_saddles: list[BoundaryPoint] = []
    manifolds: list[np.ndarray] = []
    for c in system.phases[Phase.POST_FAULT].constraints:
        samples = _boundary_samples(system, p, spec, c)
        classified = [
            classify_pseudo_ep(system, Phase.POST_FAULT, x, p, boundary_tol=1e-6)
            for x in samples
        ]
        boundary_points.extend(
            BoundaryPoint(x=x, constraint=c.name, kind=cl.kind, h_dot=cl.h_dot)
            for x, cl in zip(samples, classified)
        )
        for k in range(len(samples) - 1):
            if (classified[k].h_dot > 0.0) != (classified[k + 1].h_dot > 0.0):
                x_ss = _refine_semi_saddle(system, p, c, samples[k], samples[k + 1])
                cl = classify_pseudo_ep(system, Phase.POST_FAULT, x_ss, p, boundary_tol=1e-6)
                semi_saddles.append(
                    BoundaryPoint(x=x_ss, constraint=c.name, kind=cl.kind, h_dot=cl.h_dot)
                )
                manifolds.append(_manifold_samples(system, p, x_ss, spec, opts))

    return SrGrid(
        spec=spec,
        classes=classes,
        sep=x_sep,
        boundary_points=tuple(boundary_points),
        semi_saddles=tuple(semi_saddles),
        manifolds=tuple(manifolds),
    )
