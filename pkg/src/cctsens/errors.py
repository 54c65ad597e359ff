"""Exception types raised by the cctsens package.

Everything derives from CctError so callers can catch computation
failures with a single except clause while configuration mistakes
(ConfigError) stay distinguishable for exit-code purposes.
"""


class CctError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CctError):
    """Malformed or inconsistent run configuration."""


class DimensionMismatch(CctError):
    """State or parameter vector does not match the system's dimensions."""


class NoEquilibriumFound(CctError):
    """Newton iteration failed to locate an equilibrium."""


class SingularJacobian(CctError):
    """A required Jacobian factorization failed (matrix singular to working precision)."""


class StiffnessFailure(CctError):
    """Adaptive step size underflowed without meeting the error tolerance."""


class NumericalBlowup(CctError):
    """The integrated state left the range of finite floating point numbers."""


class OutOfRange(CctError):
    """Interpolation requested outside the time span covered by a trajectory."""


class EmptyCombinedBoundary(CctError):
    """Neither the fault nor the post-fault phase declares any constraint."""


class NoFiniteCct(CctError):
    """Every tested clearing time is stable; no finite critical clearing time exists."""


class InconclusiveRun(CctError):
    """Classification could not be decided within the configured horizon or iteration cap."""


class BracketCollapse(CctError):
    """Stable and unstable classifications are inconsistent under re-verification."""


class TangentialIntersection(CctError):
    """The fault trajectory meets the boundary tangentially; the mode-1 pivot vanishes."""


class DegenerateGeometry(CctError):
    """The mode-2 sensitivity system is singular or hopelessly ill conditioned."""


class UnsupportedMode(CctError):
    """Sensitivity formulas are not available for the detected instability mode."""


class ModeChangedAcrossStep(CctError):
    """A finite-difference step crossed an instability-mode switch; the slope is meaningless."""
