"""Critical clearing time estimation by bisection over the fault duration.

The system starts at its pre-fault stable equilibrium.  A fault holds
for a clearing time t_cl, after which the post-fault dynamics take
over.  A clearing time is acceptable when the post-fault trajectory
returns to the post-fault SEP without leaving the feasible region; the
critical clearing time is the supremum of acceptable values.

Instability at the critical time takes one of three forms:

  1 FAULT_BOUNDARY: the fault trajectory itself reaches the union of
    the fault and post-fault constraint boundaries, so clearing any
    later is infeasible outright.  The critical time is the refined
    boundary-hit time.
  2 POST_FAULT_CROSSING: clearing states stay feasible but the
    post-fault transient crosses the boundary at a finite time t1;
    at criticality it grazes the boundary tangentially.
  3 NO_RETURN: the post-fault transient stays feasible yet never
    returns to the SEP, passing instead near a competing equilibrium
    where the field norm collapses.

Bisection maintains a bracket [t_lo, t_hi] with a stable verdict at
t_lo and an unstable one at t_hi; clearing states are interpolated
from a single sustained-fault trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional

import numpy as np

from .boundary import (
    combined_constraints,
    combined_guard,
    crossing_labeler,
    eval_H,
    phase_guard,
)
from .errors import (
    BracketCollapse,
    InconclusiveRun,
    NoEquilibriumFound,
    NoFiniteCct,
)
from .integrator import (
    EventConfig,
    EventKind,
    IntegrationOptions,
    Trajectory,
    integrate,
    state_at,
)
from .model import ConstrainedSystem, EquilibriumClass, Phase, find_equilibrium

__all__ = [
    "InstabilityMode",
    "CctOptions",
    "PostFaultClassification",
    "CriticalResult",
    "classify_post_fault",
    "clearing_outcome",
    "compute_cct",
]

# Field-norm minima and end states within this multiple of sep_radius
# count as part of the convergence tail, not as captures elsewhere.
_LOOSE_FACTOR = 100.0


class InstabilityMode(IntEnum):
    FAULT_BOUNDARY = 1
    POST_FAULT_CROSSING = 2
    NO_RETURN = 3


@dataclass(frozen=True)
class CctOptions:
    """Tolerances and budgets for the critical-time search."""

    integration: IntegrationOptions = IntegrationOptions()
    bisection_tol: float = 0.01
    max_iterations: int = 100
    sep_radius: float = 1e-3
    clearing_feasibility_tol: float = 1e-5
    field_norm_threshold: float = 1e-3
    horizon_doublings: int = 6
    sep_guess: Optional[np.ndarray] = None
    reverify: bool = False

    def __post_init__(self) -> None:
        if not (self.bisection_tol > 0.0 and math.isfinite(self.bisection_tol)):
            raise ValueError("bisection_tol must be positive and finite")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.sep_radius <= 0.0:
            raise ValueError("sep_radius must be positive")
        if self.clearing_feasibility_tol < 0.0:
            raise ValueError("clearing_feasibility_tol must be non-negative")
        if self.field_norm_threshold <= 0.0:
            raise ValueError("field_norm_threshold must be positive")
        if self.horizon_doublings < 0:
            raise ValueError("horizon_doublings must be non-negative")


@dataclass(frozen=True)
class PostFaultClassification:
    """Verdict for one clearing state.

    ``t1`` is the post-fault boundary-crossing time, ``t2`` the first
    field-norm capture away from the SEP; both are inf when absent.
    ``T = min(t1, t2)`` locates the decisive event of an unstable run.
    ``h_at_clearing`` is the feasibility product at the clearing state,
    normalised by its value at the pre-fault equilibrium.
    """

    stable: bool
    t1: float = math.inf
    t2: float = math.inf
    T: float = math.inf
    x_T: Optional[np.ndarray] = None
    crossing_label: Optional[str] = None
    h_at_clearing: float = math.nan
    f_norm_min: Optional[float] = None
    converged_to_sep: bool = False


@dataclass(frozen=True)
class CriticalResult:
    """Bisection outcome: the critical time, its bracket, and the mode."""

    t_cl: float
    mode: InstabilityMode
    t_lo: float
    t_hi: float
    x_cr: np.ndarray
    x_T: Optional[np.ndarray]
    T: Optional[float]
    t1: float
    t2: float
    crossing_label: Optional[str]
    iterations: int
    bracket_history: tuple[tuple[float, float], ...]
    interior_unstable: bool
    x_sep_pre: np.ndarray
    x_sep_post: np.ndarray
    fault_hit_time: Optional[float]
    fault_hit_state: Optional[np.ndarray]
    h_ref: float


def _stable_equilibrium(system, phase, p, guess) -> np.ndarray:
    res = find_equilibrium(system, phase, p, guess)
    if res.classification is not EquilibriumClass.STABLE:
        raise NoEquilibriumFound(
            f"{phase.value}-phase equilibrium near {np.asarray(guess)} is "
            f"{res.classification.value}, not stable"
        )
    return res.x


def classify_post_fault(
    system: ConstrainedSystem,
    p: np.ndarray,
    x_cl: np.ndarray,
    x_sep_post: np.ndarray,
    h_ref: float,
    opts: CctOptions,
) -> PostFaultClassification:
    """Stable/unstable verdict for the post-fault run from one clearing state.

    A clearing state on or past the boundary (normalised feasibility
    product at or below ``clearing_feasibility_tol``, or any individual
    constraint non-positive) is unstable with t1 = 0 and needs no
    integration.  Otherwise the run is watched for a boundary crossing,
    for field-norm minima below ``field_norm_threshold`` away from the
    SEP, and for entry into the SEP ball.  Convergence beats captures
    seen on the way; a run that ends far from the SEP with no crossing
    and no capture is inconclusive.
    """
    p = np.asarray(p, dtype=float)
    x_cl = np.asarray(x_cl, dtype=float)
    constraints = system.phases[Phase.POST_FAULT].constraints

    h_norm = math.inf
    if constraints:
        h_norm = eval_H(system, Phase.POST_FAULT, x_cl, p) / h_ref
        if h_norm <= opts.clearing_feasibility_tol or any(
            c.value(x_cl, p) <= 0.0 for c in constraints
        ):
            label = crossing_labeler(constraints, p)(x_cl)
            return PostFaultClassification(
                stable=False, t1=0.0, T=0.0, x_T=x_cl.copy(),
                crossing_label=label, h_at_clearing=h_norm,
            )

    events = EventConfig(
        boundary=phase_guard(system, Phase.POST_FAULT, p) if constraints else None,
        terminal_on_crossing=True,
        label_crossing=crossing_labeler(constraints, p) if constraints else None,
        sep_target=x_sep_post,
        sep_radius=opts.sep_radius,
        terminal_on_sep=True,
        track_norm_minima=True,
        norm_min_threshold=opts.field_norm_threshold,
    )
    traj = integrate(system, Phase.POST_FAULT, x_cl, p, opts.integration, events)

    crossing = traj.first_event(EventKind.CONSTRAINT_CROSSING)
    converged = traj.first_event(EventKind.CONVERGED_TO_SEP) is not None
    loose = _LOOSE_FACTOR * opts.sep_radius
    capture = next(
        (
            ev for ev in traj.events
            if ev.kind is EventKind.FIELD_NORM_LOCAL_MIN
            and float(np.linalg.norm(ev.state - x_sep_post)) > loose
        ),
        None,
    )

    t1 = crossing.time if crossing is not None else math.inf
    t2 = capture.time if capture is not None else math.inf
    f_norm_min = capture.info["f_norm"] if capture is not None else None

    if converged and crossing is None:
        return PostFaultClassification(
            stable=True, h_at_clearing=h_norm, converged_to_sep=True,
            t2=t2, f_norm_min=f_norm_min,
        )
    if crossing is not None and t1 <= t2:
        return PostFaultClassification(
            stable=False, t1=t1, t2=t2, T=t1, x_T=crossing.state.copy(),
            crossing_label=crossing.info.get("constraint"),
            h_at_clearing=h_norm, f_norm_min=f_norm_min,
        )
    if capture is not None:
        return PostFaultClassification(
            stable=False, t1=t1, t2=t2, T=t2, x_T=capture.state.copy(),
            crossing_label=None, h_at_clearing=h_norm, f_norm_min=f_norm_min,
        )
    # Horizon reached without any verdict: accept slow convergence if
    # the end state is at least loosely near the SEP.
    end_dist = float(np.linalg.norm(traj.final_state - x_sep_post))
    if end_dist <= loose:
        return PostFaultClassification(stable=True, h_at_clearing=h_norm)
    raise InconclusiveRun(
        f"post-fault run from {x_cl} ended {end_dist:.3g} from the SEP at "
        f"t={traj.final_time:.3g} with no crossing, capture, or convergence; "
        "raise t_max or loosen thresholds"
    )


def _run_fault(system, p, x0, opts: CctOptions, horizon: float) -> Trajectory:
    events = EventConfig(
        boundary=combined_guard(system, p),
        terminal_on_crossing=True,
        label_crossing=crossing_labeler(combined_constraints(system)[0], p),
    )
    return integrate(
        system, Phase.FAULT_ON, x0, p,
        replace(opts.integration, t_max=horizon), events,
    )


def _hit_classification(system, p, crossing, h_ref) -> PostFaultClassification:
    """Clearing at the combined-boundary hit is infeasible by definition."""
    h_norm = eval_H(system, Phase.POST_FAULT, crossing.state, p) / h_ref
    return PostFaultClassification(
        stable=False, t1=0.0, T=0.0, x_T=crossing.state.copy(),
        crossing_label=crossing.info.get("constraint"), h_at_clearing=h_norm,
    )


def compute_cct(
    system: ConstrainedSystem,
    p: np.ndarray,
    opts: Optional[CctOptions] = None,
) -> CriticalResult:
    """Bracket the critical clearing time and identify the instability mode.

    The sustained-fault trajectory provides clearing states by dense
    interpolation.  Its combined-boundary hit, when one exists, seeds
    the unstable end of the bracket; otherwise the horizon is doubled
    until some clearing state goes unstable.  Stable-at-zero and an
    unstable upper bound in hand, plain bisection narrows the bracket
    to ``bisection_tol``.
    """
    if opts is None:
        opts = CctOptions()
    p = np.asarray(p, dtype=float)
    guess = (
        np.zeros(system.n) if opts.sep_guess is None
        else np.asarray(opts.sep_guess, dtype=float)
    )
    x_sep_pre = _stable_equilibrium(system, Phase.PRE_FAULT, p, guess)
    x_sep_post = _stable_equilibrium(system, Phase.POST_FAULT, p, x_sep_pre)

    h_ref = eval_H(system, Phase.POST_FAULT, x_sep_pre, p)
    if not (h_ref > 0.0) or combined_guard(system, p)(x_sep_pre) <= 0.0:
        raise NoFiniteCct(
            "the pre-fault equilibrium is not strictly feasible; "
            "no positive clearing time exists"
        )

    cls_zero = classify_post_fault(system, p, x_sep_pre, x_sep_post, h_ref, opts)
    if not cls_zero.stable:
        raise NoFiniteCct("instant clearing is already unstable")

    horizon = opts.integration.t_max
    fault_traj = _run_fault(system, p, x_sep_pre, opts, horizon)
    crossing = fault_traj.first_event(EventKind.CONSTRAINT_CROSSING)
    hit_time = crossing.time if crossing is not None else None
    hit_state = crossing.state.copy() if crossing is not None else None

    hi_cls: Optional[PostFaultClassification] = None
    hi_is_hit = False
    if crossing is not None:
        t_hi = crossing.time
        hi_cls = _hit_classification(system, p, crossing, h_ref)
        hi_is_hit = True
    else:
        t_hi = None
        for _ in range(opts.horizon_doublings + 1):
            cls_end = classify_post_fault(
                system, p, fault_traj.final_state, x_sep_post, h_ref, opts
            )
            if not cls_end.stable:
                t_hi = fault_traj.final_time
                hi_cls = cls_end
                break
            horizon *= 2.0
            fault_traj = _run_fault(system, p, x_sep_pre, opts, horizon)
            crossing = fault_traj.first_event(EventKind.CONSTRAINT_CROSSING)
            if crossing is not None:
                t_hi = crossing.time
                hit_time, hit_state = crossing.time, crossing.state.copy()
                hi_cls = _hit_classification(system, p, crossing, h_ref)
                hi_is_hit = True
                break
        if t_hi is None:
            raise NoFiniteCct(
                f"no unstable clearing time found up to t={horizon:.6g}; "
                "the clearing time appears unbounded"
            )

    t_lo = 0.0
    history = [(t_lo, t_hi)]
    iterations = 0
    while t_hi - t_lo > opts.bisection_tol:
        if iterations >= opts.max_iterations:
            raise InconclusiveRun(
                f"bracket still {t_hi - t_lo:.3g} wide after "
                f"{iterations} bisection steps"
            )
        t_mid = 0.5 * (t_lo + t_hi)
        x_mid = state_at(fault_traj, t_mid)
        cls_mid = classify_post_fault(system, p, x_mid, x_sep_post, h_ref, opts)
        if cls_mid.stable:
            t_lo = t_mid
        else:
            t_hi = t_mid
            hi_cls = cls_mid
            hi_is_hit = False
        history.append((t_lo, t_hi))
        iterations += 1

    if opts.reverify:
        tight = replace(
            opts,
            integration=replace(
                opts.integration,
                rel_tol=opts.integration.rel_tol * 0.01,
                abs_tol=opts.integration.abs_tol * 0.01,
            ),
            reverify=False,
        )
        if t_lo > 0.0:
            lo_check = classify_post_fault(
                system, p, state_at(fault_traj, t_lo), x_sep_post, h_ref, tight
            )
            if not lo_check.stable:
                raise BracketCollapse(
                    f"t_lo={t_lo:.9g} reclassified unstable under tighter "
                    "integration tolerances"
                )
        if not hi_is_hit:
            hi_check = classify_post_fault(
                system, p, state_at(fault_traj, t_hi), x_sep_post, h_ref, tight
            )
            if hi_check.stable:
                raise BracketCollapse(
                    f"t_hi={t_hi:.9g} reclassified stable under tighter "
                    "integration tolerances"
                )

    if hi_is_hit:
        mode = InstabilityMode.FAULT_BOUNDARY
        t_cl = t_hi
        x_cr = hit_state
        x_T, T = None, None
    else:
        t_cl = 0.5 * (t_lo + t_hi)
        x_cr = state_at(fault_traj, t_cl)
        if hi_cls.t1 <= hi_cls.t2:
            mode = InstabilityMode.POST_FAULT_CROSSING
        else:
            mode = InstabilityMode.NO_RETURN
        x_T, T = hi_cls.x_T, hi_cls.T

    return CriticalResult(
        t_cl=t_cl,
        mode=mode,
        t_lo=t_lo,
        t_hi=t_hi,
        x_cr=x_cr,
        x_T=x_T,
        T=T,
        t1=hi_cls.t1,
        t2=hi_cls.t2,
        crossing_label=hi_cls.crossing_label,
        iterations=iterations,
        bracket_history=tuple(history),
        interior_unstable=not hi_is_hit,
        x_sep_pre=x_sep_pre,
        x_sep_post=x_sep_post,
        fault_hit_time=hit_time,
        fault_hit_state=hit_state,
        h_ref=h_ref,
    )


def clearing_outcome(
    system: ConstrainedSystem,
    p: np.ndarray,
    t_clear: float,
    opts: Optional[CctOptions] = None,
) -> PostFaultClassification:
    """Verdict for one specific clearing time, fault segment included.

    A fault segment that reaches the combined boundary before
    ``t_clear`` makes the clearing unstable outright (t1 = 0 at the
    hit state); otherwise the post-fault run from the interpolated
    clearing state decides.
    """
    if opts is None:
        opts = CctOptions()
    if t_clear < 0.0:
        raise ValueError("t_clear must be non-negative")
    p = np.asarray(p, dtype=float)
    guess = (
        np.zeros(system.n) if opts.sep_guess is None
        else np.asarray(opts.sep_guess, dtype=float)
    )
    x_sep_pre = _stable_equilibrium(system, Phase.PRE_FAULT, p, guess)
    x_sep_post = _stable_equilibrium(system, Phase.POST_FAULT, p, x_sep_pre)
    h_ref = eval_H(system, Phase.POST_FAULT, x_sep_pre, p)
    if not (h_ref > 0.0):
        raise NoFiniteCct("the pre-fault equilibrium is not strictly feasible")
    if t_clear == 0.0:
        return classify_post_fault(system, p, x_sep_pre, x_sep_post, h_ref, opts)
    fault_traj = _run_fault(system, p, x_sep_pre, opts, t_clear)
    crossing = fault_traj.first_event(EventKind.CONSTRAINT_CROSSING)
    if crossing is not None and crossing.time < t_clear:
        return _hit_classification(system, p, crossing, h_ref)
    return classify_post_fault(
        system, p, fault_traj.final_state, x_sep_post, h_ref, opts
    )
