"""Exception types raised across the package."""


class PRNError(Exception):
    """Base class for all package errors."""


class DegenerateShape(PRNError):
    """Alignment is not unique (e.g. co-linear points)."""


class NoConvergence(PRNError):
    """Generalized Procrustes alignment hit ``max_iter`` before converging."""


class NotConverged(PRNError):
    """Jacobian blocks were requested for a non-stationary alignment."""


class SingularSystem(PRNError):
    """The rotation-derivative system is rank deficient beyond the gauge."""


class DimensionMismatch(PRNError, ValueError):
    pass


class BatchTooSmall(PRNError, ValueError):
    pass


class TraceMismatch(PRNError, ValueError):
    pass


class InvalidSpec(PRNError, ValueError):
    pass


class SchemaError(PRNError, ValueError):
    pass


class InsufficientData(PRNError, ValueError):
    pass


class ZeroGroundTruth(PRNError, ValueError):
    pass


class MissingGroundTruth(PRNError, ValueError):
    pass


class NonFiniteLoss(PRNError, FloatingPointError):
    pass
