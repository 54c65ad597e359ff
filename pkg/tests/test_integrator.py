"""Integrator checks.

Groups: accuracy against closed forms, interpolation, variational
equations against finite differences and the flow-composition identity,
event detection (crossings, convergence ball, field-norm minima), and
failure modes.
"""

import math

import numpy as np
import pytest

from cctsens.errors import NumericalBlowup, OutOfRange, StiffnessFailure
from cctsens.integrator import (
    EventConfig,
    EventKind,
    IntegrationOptions,
    integrate,
    integrate_with_sensitivities,
    state_at,
)
from cctsens.model import (
    Phase,
    SmibParams,
    find_equilibrium,
    smib_system,
    system_from_expressions,
)

_PARAMS = SmibParams(p_mech=0.5, inertia=0.1, delta_max=2.0, omega_max=1.5)
_SYS = smib_system(_PARAMS)
_P0 = _PARAMS.p0
_TIGHT = IntegrationOptions(rel_tol=1e-10, abs_tol=1e-12, t_max=1.0)

_DECAY = system_from_expressions(
    ["x"], ["a"], {ph: {"f": ["-a * x"]} for ph in ("pre", "fault", "post")}
)


def _fault_speed(t, pm=0.5, d=0.5, m=0.1):
    """Closed-form fault-on speed from a standstill start."""
    return (pm / d) * (1.0 - math.exp(-d * t / m))


# ── accuracy ──────────────────────────────────────────────────────────────────


def test_exponential_decay_accuracy():
    traj = integrate(_DECAY, Phase.PRE_FAULT, np.array([1.0]), np.array([1.0]), _TIGHT)
    err = abs(traj.final_state[0] - math.exp(-1.0)) / math.exp(-1.0)
    assert err <= 1e-8, f"relative error {err:.2e}"
    assert traj.times[0] == 0.0
    assert np.array_equal(traj.states[0], [1.0])


def test_fault_speed_closed_form():
    x0 = np.array([math.asin(0.5), 0.0])
    traj = integrate(_SYS, Phase.FAULT_ON, x0, _P0, IntegrationOptions(t_max=0.5))
    assert abs(traj.final_state[1] - _fault_speed(0.5)) <= 1e-6


def test_halving_tolerances_does_not_worsen():
    x0 = np.array([0.9, 0.3])
    errs = []
    reference = integrate(
        _SYS, Phase.POST_FAULT, x0, _P0, IntegrationOptions(rel_tol=1e-13, abs_tol=1e-13, t_max=2.0)
    ).final_state
    for rtol in (1e-6, 1e-8, 1e-10):
        traj = integrate(
            _SYS, Phase.POST_FAULT, x0, _P0,
            IntegrationOptions(rel_tol=rtol, abs_tol=rtol * 1e-2, t_max=2.0),
        )
        errs.append(np.linalg.norm(traj.final_state - reference))
    assert errs[1] <= errs[0] and errs[2] <= errs[1], f"errors not monotone: {errs}"


def test_final_time_is_exact():
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.7, 0.1]), _P0, IntegrationOptions(t_max=3.7))
    assert traj.final_time == 3.7


# ── interpolation ─────────────────────────────────────────────────────────────


def test_state_at_returns_stored_nodes_exactly():
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.7, 0.1]), _P0, IntegrationOptions(t_max=2.0))
    for i in (0, len(traj.times) // 2, -1):
        assert np.array_equal(state_at(traj, float(traj.times[i])), traj.states[i])


def test_state_at_matches_closed_form_between_nodes():
    x0 = np.array([math.asin(0.5), 0.0])
    traj = integrate(_SYS, Phase.FAULT_ON, x0, _P0, IntegrationOptions(t_max=0.5))
    for t_q in (0.123, 0.2371, 0.468):
        w = state_at(traj, t_q)[1]
        assert abs(w - _fault_speed(t_q)) <= 1e-6, f"interp at {t_q}: {w}"


def test_state_at_out_of_range():
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.7, 0.1]), _P0, IntegrationOptions(t_max=1.0))
    with pytest.raises(OutOfRange):
        state_at(traj, 1.5)
    with pytest.raises(OutOfRange):
        state_at(traj, -0.2)


def test_sample_stride_thins_output_but_keeps_ends():
    dense = integrate(_SYS, Phase.POST_FAULT, np.array([0.7, 0.1]), _P0, IntegrationOptions(t_max=2.0))
    thin = integrate(
        _SYS, Phase.POST_FAULT, np.array([0.7, 0.1]), _P0,
        IntegrationOptions(t_max=2.0, sample_stride=5),
    )
    assert len(thin.times) < len(dense.times)
    assert thin.times[0] == 0.0 and thin.final_time == 2.0
    assert np.allclose(thin.final_state, dense.final_state, atol=1e-12)


# ── variational equations ─────────────────────────────────────────────────────


def test_sensitivities_start_from_identity_and_zero():
    _, bundle = integrate_with_sensitivities(
        _SYS, Phase.POST_FAULT, np.array([0.6, 0.2]), _P0, IntegrationOptions(t_max=0.3)
    )
    assert np.array_equal(bundle.phi_x[0], np.eye(2))
    assert np.array_equal(bundle.phi_p[0], np.zeros((2, 4)))


def test_linear_system_sensitivity_closed_form():
    """For x' = -a x, d x(t)/d x0 = exp(-a t) and d x(t)/d a = -t x(t)."""
    opts = IntegrationOptions(rel_tol=1e-12, abs_tol=1e-14, t_max=0.8)
    traj, bundle = integrate_with_sensitivities(
        _DECAY, Phase.PRE_FAULT, np.array([2.0]), np.array([1.3]), opts
    )
    t = 0.8
    assert abs(bundle.final_phi_x[0, 0] - math.exp(-1.3 * t)) < 1e-10
    assert abs(bundle.final_phi_p[0, 0] - (-t * 2.0 * math.exp(-1.3 * t))) < 1e-9


def test_trajectory_sensitivities_match_finite_differences():
    rng = np.random.default_rng(19)
    opts = IntegrationOptions(rel_tol=1e-11, abs_tol=1e-13, t_max=0.4)
    for phase in (Phase.FAULT_ON, Phase.POST_FAULT):
        for _ in range(4):
            x0 = rng.uniform([-0.5, -0.5], [1.2, 0.8])
            p = np.array([rng.uniform(0.3, 0.8), rng.uniform(0.08, 0.3), 2.0, 1.5])
            _, bundle = integrate_with_sensitivities(_SYS, phase, x0, p, opts)
            eps = 1e-6
            for j in range(2):
                e = np.zeros(2)
                e[j] = eps
                plus = integrate(_SYS, phase, x0 + e, p, opts).final_state
                minus = integrate(_SYS, phase, x0 - e, p, opts).final_state
                fd = (plus - minus) / (2 * eps)
                err = np.linalg.norm(bundle.final_phi_x[:, j] - fd) / max(np.linalg.norm(fd), 1.0)
                assert err <= 1e-3, f"phi_x col {j} off by {err:.2e} in {phase}"
            for j in range(2):  # Pm and M columns; limits give exact zeros
                e = np.zeros(4)
                e[j] = eps
                plus = integrate(_SYS, phase, x0, p + e, opts).final_state
                minus = integrate(_SYS, phase, x0, p - e, opts).final_state
                fd = (plus - minus) / (2 * eps)
                err = np.linalg.norm(bundle.final_phi_p[:, j] - fd) / max(np.linalg.norm(fd), 1.0)
                assert err <= 1e-3, f"phi_p col {j} off by {err:.2e} in {phase}"


def test_limit_parameters_have_exactly_zero_sensitivity():
    _, bundle = integrate_with_sensitivities(
        _SYS, Phase.POST_FAULT, np.array([0.6, 0.2]), _P0, IntegrationOptions(t_max=0.5)
    )
    assert np.all(bundle.phi_p[:, :, 2:] == 0.0)


def test_flow_composition_identity():
    """Phi_x over [0, t2] equals the product of the pieces over [0, t1], [t1, t2]."""
    opts = IntegrationOptions(rel_tol=1e-12, abs_tol=1e-14, t_max=0.6)
    x0 = np.array([0.8, -0.2])
    whole, bundle_whole = integrate_with_sensitivities(_SYS, Phase.POST_FAULT, x0, _P0, opts)
    opts1 = IntegrationOptions(rel_tol=1e-12, abs_tol=1e-14, t_max=0.25)
    leg1, bundle1 = integrate_with_sensitivities(_SYS, Phase.POST_FAULT, x0, _P0, opts1)
    opts2 = IntegrationOptions(rel_tol=1e-12, abs_tol=1e-14, t_max=0.35)
    _, bundle2 = integrate_with_sensitivities(
        _SYS, Phase.POST_FAULT, leg1.final_state, _P0, opts2
    )
    composed = bundle2.final_phi_x @ bundle1.final_phi_x
    rel = np.max(np.abs(composed - bundle_whole.final_phi_x)) / np.max(np.abs(composed))
    assert rel <= 1e-6, f"composition identity off by {rel:.2e}"


# ── events ────────────────────────────────────────────────────────────────────


def _product_guard(p):
    def guard(x):
        return (p[2] - x[0]) * (p[3] - x[1])

    return guard


def test_crossing_event_matches_closed_form_hit_time():
    p = np.array([0.5, 0.1, 2.0, 0.7])
    x0 = np.array([math.asin(0.5), 0.0])
    ev = EventConfig(boundary=_product_guard(p), terminal_on_crossing=True)
    traj = integrate(_SYS, Phase.FAULT_ON, x0, p, IntegrationOptions(t_max=5.0), ev)
    hit = traj.first_event(EventKind.CONSTRAINT_CROSSING)
    t_exact = -(0.1 / 0.5) * math.log(1.0 - 0.5 * 0.7 / 0.5)
    assert hit is not None
    assert abs(hit.time - t_exact) <= 1e-8
    assert abs(_product_guard(p)(hit.state)) <= 1e-8, "guard not zero at the refined event"
    assert traj.final_time == hit.time, "terminal crossing must truncate the run"


def test_crossing_label_names_the_constraint():
    p = np.array([0.5, 0.1, 2.0, 0.7])
    constraints = _SYS.phases[Phase.FAULT_ON].constraints

    def label(x):
        return min(constraints, key=lambda c: abs(c.value(x, p))).name

    ev = EventConfig(boundary=_product_guard(p), terminal_on_crossing=True, label_crossing=label)
    traj = integrate(
        _SYS, Phase.FAULT_ON, np.array([math.asin(0.5), 0.0]), p, IntegrationOptions(t_max=5.0), ev
    )
    assert traj.events[0].info["constraint"] == "speed_limit"


def test_infeasible_start_is_an_immediate_crossing():
    p = np.array([0.5, 0.1, 2.0, 0.7])
    ev = EventConfig(boundary=_product_guard(p), terminal_on_crossing=True)
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.5, 0.9]), p, IntegrationOptions(t_max=5.0), ev)
    assert traj.events[0].kind is EventKind.CONSTRAINT_CROSSING
    assert traj.events[0].time == 0.0
    assert len(traj.times) == 1


def test_converged_to_sep_event():
    eq = find_equilibrium(_SYS, Phase.POST_FAULT, _P0, np.zeros(2))
    ev = EventConfig(sep_target=eq.x, sep_radius=1e-3, terminal_on_sep=True)
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.9, 0.3]), _P0, IntegrationOptions(t_max=20.0), ev)
    conv = traj.first_event(EventKind.CONVERGED_TO_SEP)
    assert conv is not None
    assert np.linalg.norm(conv.state - eq.x) <= 1e-3
    assert traj.final_time == conv.time


def test_sep_start_inside_ball_converges_at_zero():
    eq = find_equilibrium(_SYS, Phase.POST_FAULT, _P0, np.zeros(2))
    ev = EventConfig(sep_target=eq.x, sep_radius=1e-3, terminal_on_sep=True)
    traj = integrate(_SYS, Phase.POST_FAULT, eq.x + 1e-5, _P0, IntegrationOptions(t_max=5.0), ev)
    assert traj.events[0].kind is EventKind.CONVERGED_TO_SEP
    assert traj.events[0].time == 0.0


def test_field_norm_minimum_near_unstable_equilibrium():
    # Launch just above the separatrix speed so the trajectory creeps past
    # the unstable equilibrium before escaping.
    uep = np.array([math.pi - math.asin(0.5), 0.0])
    ev = EventConfig(track_norm_minima=True)
    traj = integrate(
        _SYS, Phase.POST_FAULT, np.array([uep[0] - 0.3, 1.89051]), _P0,
        IntegrationOptions(t_max=6.0), ev,
    )
    mins = [e for e in traj.events if e.kind is EventKind.FIELD_NORM_LOCAL_MIN]
    assert mins, "no field-norm minima recorded"
    # Every interior discrete minimum must be matched by a refined event
    # that is at least as deep as the raw sample suggested.
    norms = np.array(
        [np.linalg.norm(np.asarray(_SYS.phases[Phase.POST_FAULT].f(x, _P0))) for x in traj.states]
    )
    for i in range(1, len(norms) - 1):
        if norms[i] < norms[i - 1] and norms[i] < norms[i + 1]:
            near = [
                e for e in mins if traj.times[i - 1] <= e.time <= traj.times[i + 1]
            ]
            assert near, f"discrete minimum at t = {traj.times[i]:.4f} has no event"
            assert min(e.info["f_norm"] for e in near) <= norms[i] + 1e-12
    best = min(mins, key=lambda e: e.info["f_norm"])
    assert np.linalg.norm(best.state - uep) < 0.1, "deepest minimum not near the other equilibrium"


def test_norm_min_threshold_filters_events():
    uep = np.array([math.pi - math.asin(0.5), 0.0])
    ev = EventConfig(track_norm_minima=True, norm_min_threshold=1e-2)
    traj = integrate(
        _SYS, Phase.POST_FAULT, uep + np.array([-0.35, 0.28]), _P0,
        IntegrationOptions(t_max=6.0), ev,
    )
    mins = [e for e in traj.events if e.kind is EventKind.FIELD_NORM_LOCAL_MIN]
    assert all(e.info["f_norm"] <= 1e-2 for e in mins)


def test_horizon_event_when_nothing_fires():
    ev = EventConfig(boundary=_product_guard(_P0), terminal_on_crossing=True)
    traj = integrate(_SYS, Phase.POST_FAULT, np.array([0.6, 0.1]), _P0, IntegrationOptions(t_max=0.2), ev)
    assert traj.events[-1].kind is EventKind.HORIZON_REACHED
    assert traj.events[-1].time == 0.2


# ── failure modes ─────────────────────────────────────────────────────────────

_GROW = system_from_expressions(
    ["x"], ["a"], {ph: {"f": ["a * x**2"]} for ph in ("pre", "fault", "post")}
)


def test_finite_time_escape_raises_stiffness_failure():
    with pytest.raises(StiffnessFailure):
        integrate(_GROW, Phase.PRE_FAULT, np.array([1.0]), np.array([1.0]), IntegrationOptions(t_max=2.0))


def test_nonfinite_field_raises_blowup():
    with np.errstate(over="ignore"), pytest.raises(NumericalBlowup):
        integrate(_GROW, Phase.PRE_FAULT, np.array([1e200]), np.array([1.0]), IntegrationOptions(t_max=1.0))


def test_options_validation():
    with pytest.raises(ValueError):
        IntegrationOptions(rel_tol=-1e-8)
    with pytest.raises(ValueError):
        IntegrationOptions(t_max=0.0)
    with pytest.raises(ValueError):
        IntegrationOptions(sample_stride=0)
    with pytest.raises(ValueError):
        IntegrationOptions(first_step=1.0, max_step=0.5)
