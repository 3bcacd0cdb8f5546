"""Exception taxonomy shared by every module."""


class PerfedsimError(Exception):
    """Base class for all library errors."""


class InvalidSpec(PerfedsimError):
    """A population / client / config description violates its invariants."""


class ZeroVector(PerfedsimError):
    """An operation that needs a direction received the zero vector."""


class NonFiniteInput(PerfedsimError):
    """An input array contains NaN or infinity."""


class SingularGlobalGram(PerfedsimError):
    """Pooled weighted Gram matrix is numerically singular; the shared model
    is not identified by the combined data."""


class SingularMetaGram(PerfedsimError):
    """The one-step-lookahead meta Gram matrix is numerically singular."""


class SingularCoupling(PerfedsimError):
    """The proximal coupling matrix is numerically singular."""


class NonPositiveLambda(PerfedsimError):
    """Ridge penalty must be strictly positive."""


class NumericalInconsistency(PerfedsimError):
    """A quantity that is nonnegative in exact arithmetic came out negative
    beyond the cancellation tolerance, or a solve failed its residual check."""


class DomainError(PerfedsimError):
    """Parameter outside the domain of an asymptotic formula (e.g. gamma <= 1)."""


class NoRoot(PerfedsimError):
    """A bracketing root search failed to locate a root."""


class NonConvergence(PerfedsimError):
    """A fixed-point iteration did not converge within its iteration budget."""


class InternalInconsistency(PerfedsimError):
    """Two independent evaluations of the same quantity disagree; indicates a
    bug rather than bad input."""


class DegenerateHomogeneity(PerfedsimError):
    """Optimal ridge tuning is undefined at zero heterogeneity radius."""


class Diverged(PerfedsimError):
    """An iterative trainer exceeded the divergence threshold (step size too
    large)."""


class IoError(PerfedsimError):
    """Failed to read or write an artifact file."""


class ParseError(PerfedsimError):
    """A config document or results file does not match the expected schema."""
