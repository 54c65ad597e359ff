"""Three-phase constrained dynamical systems.

A study object is a parameter-dependent vector field that switches
between three phases (pre-fault, fault-on, post-fault) together with a
list of inequality constraints per phase.  The state is feasible while
every constraint function is positive:

    x' = f_phase(x, p),        h_k(x, p) > 0  for all k in the phase.

Everything downstream (event-detecting integration, boundary geometry,
critical clearing times, sensitivities) works against this interface,
so a system only has to supply f, its Jacobians with respect to x and
p, and per-constraint values, gradients and (optionally) second
derivatives.

Two constructors are provided:

* ``smib_system`` builds the classic single-machine-infinite-bus swing
  model with angle and speed limits.  Derivatives are hand-coded.
* ``system_from_expressions`` builds a system from strings, using
  sympy to differentiate symbolically and lambdify to numpy callables.

The module also houses equilibrium location (damped Newton with
eigenvalue classification) and the equilibrium parameter sensitivity
dx_s/dp obtained from the implicit function theorem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    NoEquilibriumFound,
    SingularJacobian,
)

__all__ = [
    "Phase",
    "Constraint",
    "PhaseDynamics",
    "ConstrainedSystem",
    "EquilibriumClass",
    "EquilibriumResult",
    "SmibParams",
    "eval_f",
    "eval_jacobians",
    "find_equilibrium",
    "sep_sensitivity",
    "smib_system",
    "system_from_expressions",
]

# Newton iterations before giving up on an equilibrium.
_NEWTON_MAX_ITER = 50
# Step-halving attempts per Newton iteration.
_NEWTON_MAX_HALVINGS = 40
# |Re(eigenvalue)| below this is treated as a zero real part.
_HYPERBOLICITY_TOL = 1e-8
# Condition numbers beyond this count as singular to working precision.
_SINGULAR_COND = 1e12


class Phase(Enum):
    """Which piece of the piecewise vector field is active."""

    PRE_FAULT = "pre"
    FAULT_ON = "fault"
    POST_FAULT = "post"


class EquilibriumClass(Enum):
    """Linearization verdict at an equilibrium."""

    STABLE = "stable"
    UNSTABLE = "unstable"
    NON_HYPERBOLIC = "non_hyperbolic"


@dataclass(frozen=True)
class Constraint:
    """One scalar inequality h(x, p) > 0.

    ``grad_x``/``grad_p`` return the row of first derivatives; the
    Hessian callables may be None for systems that never enter the
    mode-2 sensitivity path (which needs second derivatives of h).
    """

    name: str
    value: Callable[[np.ndarray, np.ndarray], float]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess_xx: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    hess_xp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class PhaseDynamics:
    """Vector field, its Jacobians and the constraint list of one phase."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    constraints: tuple[Constraint, ...] = ()


@dataclass(frozen=True)
class ConstrainedSystem:
    """A three-phase system over a shared state and parameter space."""

    n: int
    param_names: tuple[str, ...]
    phases: Mapping[Phase, PhaseDynamics]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"state dimension must be positive, got {self.n}")
        if len(self.param_names) < 1:
            raise ValueError("at least one parameter is required")
        if len(set(self.param_names)) != len(self.param_names):
            raise ValueError(f"duplicate parameter names in {self.param_names}")
        missing = [ph for ph in Phase if ph not in self.phases]
        if missing:
            raise ValueError(f"missing phases: {[ph.value for ph in missing]}")
        for ph, dyn in self.phases.items():
            names = [c.name for c in dyn.constraints]
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate constraint names in phase {ph.value}: {names}")

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def param_index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ConfigError(
                f"unknown parameter {name!r}; system has {self.param_names}"
            ) from None


def _check_dims(system: ConstrainedSystem, x: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape != (system.n,):
        raise DimensionMismatch(f"state has shape {x.shape}, expected ({system.n},)")
    if p.shape != (system.n_params,):
        raise DimensionMismatch(f"parameters have shape {p.shape}, expected ({system.n_params},)")
    return x, p


def eval_f(system: ConstrainedSystem, phase: Phase, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vector field of the given phase at (x, p)."""
    x, p = _check_dims(system, x, p)
    return np.asarray(system.phases[phase].f(x, p), dtype=float)


def eval_jacobians(
    system: ConstrainedSystem, phase: Phase, x: np.ndarray, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """State and parameter Jacobians (df/dx, df/dp) of the given phase."""
    x, p = _check_dims(system, x, p)
    dyn = system.phases[phase]
    jx = np.asarray(dyn.jac_x(x, p), dtype=float)
    jp = np.asarray(dyn.jac_p(x, p), dtype=float)
    return jx, jp


# ── Equilibria ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EquilibriumResult:
    """Equilibrium point with its linearization verdict."""

    x: np.ndarray
    classification: EquilibriumClass
    residual: float
    eigenvalues: np.ndarray


def find_equilibrium(
    system: ConstrainedSystem,
    phase: Phase,
    p: np.ndarray,
    x_guess: np.ndarray,
    tol: float = 1e-10,
) -> EquilibriumResult:
    """Solve f_phase(x, p) = 0 by damped Newton iteration.

    Steps are halved until the residual norm decreases (up to 40
    halvings).  Raises NoEquilibriumFound when the residual is still
    above ``tol`` after 50 iterations and SingularJacobian when a
    Newton system cannot be solved.
    """
    x, p = _check_dims(system, np.asarray(x_guess, dtype=float), p)
    dyn = system.phases[phase]
    x = x.copy()
    r = np.asarray(dyn.f(x, p), dtype=float)
    rnorm = float(np.linalg.norm(r))
    for _ in range(_NEWTON_MAX_ITER):
        if rnorm <= tol:
            break
        jac = np.asarray(dyn.jac_x(x, p), dtype=float)
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(
                f"singular Jacobian during equilibrium search at x = {x.tolist()}"
            ) from exc
        scale = 1.0
        x_new, r_new, rnorm_new = x, r, rnorm
        for _ in range(_NEWTON_MAX_HALVINGS):
            x_try = x + scale * step
            r_try = np.asarray(dyn.f(x_try, p), dtype=float)
            rnorm_try = float(np.linalg.norm(r_try))
            if np.isfinite(rnorm_try) and rnorm_try < rnorm:
                x_new, r_new, rnorm_new = x_try, r_try, rnorm_try
                break
            scale *= 0.5
        else:
            raise NoEquilibriumFound(
                f"Newton stalled at residual {rnorm:.3e} (no descent direction)"
            )
        x, r, rnorm = x_new, r_new, rnorm_new
    if rnorm > tol:
        raise NoEquilibriumFound(
            f"no equilibrium within {_NEWTON_MAX_ITER} iterations; residual {rnorm:.3e} > {tol:.1e}"
        )
    jac = np.asarray(dyn.jac_x(x, p), dtype=float)
    eigs = np.linalg.eigvals(jac)
    real = eigs.real
    if np.any(np.abs(real) < _HYPERBOLICITY_TOL):
        cls = EquilibriumClass.NON_HYPERBOLIC
    elif np.all(real < 0.0):
        cls = EquilibriumClass.STABLE
    else:
        cls = EquilibriumClass.UNSTABLE
    return EquilibriumResult(x=x, classification=cls, residual=rnorm, eigenvalues=eigs)


def sep_sensitivity(
    system: ConstrainedSystem, phase: Phase, p: np.ndarray, x_s: np.ndarray
) -> np.ndarray:
    """First-order equilibrium shift dx_s/dp, shape (n, n_params).

    From differentiating f(x_s(p), p) = 0:  dx_s/dp solves
    (df/dx) dx_s/dp = -df/dp.  ``x_s`` must already be an equilibrium
    of the given phase; the Jacobian there must be nonsingular.
    """
    jx, jp = eval_jacobians(system, phase, x_s, p)
    try:
        cond = np.linalg.cond(jx)
        if not np.isfinite(cond) or cond > _SINGULAR_COND:
            raise np.linalg.LinAlgError(f"condition number {cond:.2e}")
        return np.linalg.solve(jx, -jp)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian(
            "state Jacobian at the equilibrium is singular to working precision; "
            "the equilibrium shift is undefined (non-hyperbolic point)"
        ) from exc


# ── Single machine, infinite bus ─────────────────────────────────────────────


@dataclass(frozen=True)
class SmibParams:
    """Swing-equation model with angle and speed limits.

    State x = [delta, omega] (rotor angle, speed deviation).  Dynamics

        delta' = omega
        omega' = (Pm - (EV/X) sin(delta) - D omega) / M

    The electrical coupling EV/X takes a different value per phase; a
    fault removes it entirely and clearing restores the pre-fault
    value.  The varying parameter vector is p = [Pm, M, delta_max,
    omega_max]; damping and the couplings are structural.
    """

    p_mech: float  # Pm, mechanical input power
    inertia: float  # M
    delta_max: float  # angle limit, h1 = delta_max - delta
    omega_max: float  # speed limit, h2 = omega_max - omega
    damping: float = 0.5  # D
    coupling_pre: float = 1.0  # EV/X before the fault
    coupling_fault: float = 0.0  # EV/X during the fault
    coupling_post: float = 1.0  # EV/X after clearing

    def __post_init__(self) -> None:
        if not self.inertia > 0.0:
            raise ValueError(f"inertia must be positive, got {self.inertia}")
        if self.damping < 0.0:
            raise ValueError(f"damping must be nonnegative, got {self.damping}")
        for name in ("p_mech", "delta_max", "omega_max"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.coupling_fault != 0.0:
            raise ValueError(
                f"the fault phase must disconnect the machine (coupling 0), got {self.coupling_fault}"
            )
        if self.coupling_pre != self.coupling_post:
            raise ValueError(
                "clearing must restore the pre-fault topology "
                f"(coupling_pre {self.coupling_pre} != coupling_post {self.coupling_post})"
            )

    @property
    def p0(self) -> np.ndarray:
        """Nominal parameter vector [Pm, M, delta_max, omega_max]."""
        return np.array([self.p_mech, self.inertia, self.delta_max, self.omega_max])


_SMIB_PARAM_NAMES = ("Pm", "M", "delta_max", "omega_max")


def _smib_phase(coupling: float, damping: float) -> PhaseDynamics:
    b, d = float(coupling), float(damping)

    def f(x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.array(
            [x[1], (p[0] - b * math.sin(x[0]) - d * x[1]) / p[1]]
        )

    def jac_x(x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.array(
            [[0.0, 1.0], [-b * math.cos(x[0]) / p[1], -d / p[1]]]
        )

    def jac_p(x: np.ndarray, p: np.ndarray) -> np.ndarray:
        f2 = (p[0] - b * math.sin(x[0]) - d * x[1]) / p[1]
        return np.array(
            [[0.0, 0.0, 0.0, 0.0], [1.0 / p[1], -f2 / p[1], 0.0, 0.0]]
        )

    return PhaseDynamics(f=f, jac_x=jac_x, jac_p=jac_p, constraints=_smib_constraints())


def _smib_constraints() -> tuple[Constraint, ...]:
    zero_xx = np.zeros((2, 2))
    zero_xp = np.zeros((2, 4))
    angle = Constraint(
        name="angle_limit",
        value=lambda x, p: p[2] - x[0],
        grad_x=lambda x, p: np.array([-1.0, 0.0]),
        grad_p=lambda x, p: np.array([0.0, 0.0, 1.0, 0.0]),
        hess_xx=lambda x, p: zero_xx,
        hess_xp=lambda x, p: zero_xp,
    )
    speed = Constraint(
        name="speed_limit",
        value=lambda x, p: p[3] - x[1],
        grad_x=lambda x, p: np.array([0.0, -1.0]),
        grad_p=lambda x, p: np.array([0.0, 0.0, 0.0, 1.0]),
        hess_xx=lambda x, p: zero_xx,
        hess_xp=lambda x, p: zero_xp,
    )
    return (angle, speed)


def smib_system(params: SmibParams) -> ConstrainedSystem:
    """Build the three-phase swing model; all phases share the limits."""
    return ConstrainedSystem(
        n=2,
        param_names=_SMIB_PARAM_NAMES,
        phases={
            Phase.PRE_FAULT: _smib_phase(params.coupling_pre, params.damping),
            Phase.FAULT_ON: _smib_phase(params.coupling_fault, params.damping),
            Phase.POST_FAULT: _smib_phase(params.coupling_post, params.damping),
        },
    )


# ── Declarative systems ──────────────────────────────────────────────────────


def _lambdify_vector(args, exprs, length: int):
    import sympy as sp

    fn = sp.lambdify(args, sp.Matrix(exprs), modules="numpy")

    def g(x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.asarray(fn(x, p), dtype=float).reshape(length)

    return g


def _lambdify_matrix(args, mat, shape: tuple[int, int]):
    import sympy as sp

    fn = sp.lambdify(args, sp.Matrix(mat), modules="numpy")

    def g(x: np.ndarray, p: np.ndarray) -> np.ndarray:
        return np.asarray(fn(x, p), dtype=float).reshape(shape)

    return g


def _lambdify_scalar(args, expr):
    import sympy as sp

    fn = sp.lambdify(args, expr, modules="numpy")

    def g(x: np.ndarray, p: np.ndarray) -> float:
        return float(fn(x, p))

    return g


def system_from_expressions(
    state: Sequence[str],
    params: Sequence[str],
    phases: Mapping[str, Mapping],
) -> ConstrainedSystem:
    """Build a ConstrainedSystem from expression strings.

    ``phases`` maps each of "pre", "fault", "post" to a mapping with
    key "f" (list of n expressions) and optional "h" (mapping of
    constraint name to expression, or a list).  Expressions may use the
    state and parameter names plus standard functions (sin, cos, exp,
    ...).  All derivatives, including constraint second derivatives,
    are produced symbolically.
    """
    import sympy as sp

    if len(state) < 1:
        raise ConfigError("at least one state variable is required")
    if len(params) < 1:
        raise ConfigError("at least one parameter is required")
    names = list(state) + list(params)
    if len(set(names)) != len(names):
        raise ConfigError(f"state/parameter names must be distinct, got {names}")
    xs = tuple(sp.Symbol(s, real=True) for s in state)
    ps = tuple(sp.Symbol(s, real=True) for s in params)
    local = {str(s): s for s in xs + ps}
    allowed = set(xs) | set(ps)
    args = (xs, ps)
    n, n_p = len(xs), len(ps)

    def parse(text: str):
        try:
            expr = sp.sympify(text, locals=dict(local))
        except (sp.SympifyError, SyntaxError, TypeError) as exc:
            raise ConfigError(f"cannot parse expression {text!r}: {exc}") from exc
        stray = expr.free_symbols - allowed
        if stray:
            raise ConfigError(
                f"expression {text!r} uses unknown names {sorted(str(s) for s in stray)}"
            )
        return expr

    built: dict[Phase, PhaseDynamics] = {}
    for phase in Phase:
        try:
            block = phases[phase.value]
        except KeyError:
            raise ConfigError(f"missing phase {phase.value!r}") from None
        f_texts = block.get("f")
        if not isinstance(f_texts, (list, tuple)) or len(f_texts) != n:
            raise ConfigError(
                f"phase {phase.value!r} needs a list of {n} expressions under 'f'"
            )
        f_exprs = sp.Matrix([parse(t) for t in f_texts])
        jx = f_exprs.jacobian(xs)
        jp = f_exprs.jacobian(ps)
        h_block = block.get("h", {})
        if isinstance(h_block, (list, tuple)):
            h_items = [(f"h{i + 1}", t) for i, t in enumerate(h_block)]
        else:
            h_items = list(h_block.items())
        constraints = []
        for cname, text in h_items:
            expr = parse(text)
            gx = sp.Matrix([expr]).jacobian(xs)
            gp = sp.Matrix([expr]).jacobian(ps)
            hxx = sp.hessian(expr, xs) if n > 0 else sp.Matrix(0, 0, [])
            hxp = sp.Matrix([[sp.diff(expr, xi, pj) for pj in ps] for xi in xs])
            constraints.append(
                Constraint(
                    name=str(cname),
                    value=_lambdify_scalar(args, expr),
                    grad_x=_lambdify_vector(args, gx, n),
                    grad_p=_lambdify_vector(args, gp, n_p),
                    hess_xx=_lambdify_matrix(args, hxx, (n, n)),
                    hess_xp=_lambdify_matrix(args, hxp, (n, n_p)),
                )
            )
        built[phase] = PhaseDynamics(
            f=_lambdify_vector(args, f_exprs, n),
            jac_x=_lambdify_matrix(args, jx, (n, n)),
            jac_p=_lambdify_matrix(args, jp, (n, n_p)),
            constraints=tuple(constraints),
        )
    return ConstrainedSystem(n=n, param_names=tuple(str(s) for s in params), phases=built)
