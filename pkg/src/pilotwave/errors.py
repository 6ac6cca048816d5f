"""Exception hierarchy.

Numerical failures derive from :class:`NumericalError` so the CLI can map
them onto a single exit code.
"""


class PilotWaveError(Exception):
    """Base class for all package errors."""


class NumericalError(PilotWaveError):
    pass


class DomainError(PilotWaveError, ValueError):
    """Position outside the basis domain."""


class NodeError(NumericalError):
    """Density at or below the node threshold; velocity undefined."""


class NodeTrapError(NumericalError):
    """Step size collapsed near a node.

    ``last`` holds the last accepted point (time, position) of the trajectory.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class EnvelopeError(NumericalError):
    """Rejection-sampling envelope underestimated the target density."""


class InfiniteHError(NumericalError):
    """Coarse density positive in a cell where the Born density vanishes."""


class FitDomainError(NumericalError):
    """Exponential fit requested over non-positive or too few values."""


class QuadratureError(NumericalError):
    """Quadrature did not converge under order refinement."""


class TruncationError(NumericalError):
    """A truncated expansion lost more norm than its budget allows."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class InvalidRunError(NumericalError):
    """Ensemble run has too many trapped trajectories."""


class BasisError(PilotWaveError, ValueError):
    """Observable or operation incompatible with the basis."""


class ConfigError(PilotWaveError):
    """Scenario configuration rejected.

    ``violations`` is a list of ``(line, message)`` pairs; line is ``None``
    when the problem is not tied to a line (missing required key).
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = []
        for line, msg in self.violations:
            lines.append(f"line {line}: {msg}" if line is not None else msg)
        super().__init__("; ".join(lines))
