"""Exception taxonomy shared by all ttpar modules."""


class TTError(Exception):
    """Base class for everything raised on purpose by this package."""


class ShapeError(TTError, ValueError):
    """Array arguments with inconsistent or illegal shapes."""


class BoundsError(TTError, IndexError):
    """Multi-index or mode index outside the tensor's extent."""


class CapacityError(TTError, RuntimeError):
    """Request would materialize more data than the configured guard allows."""


class ContractError(TTError, RuntimeError):
    """API misuse: mismatched collectives, bad peers, unknown variants, ..."""


class NumericError(TTError, ArithmeticError):
    """Non-finite inputs or LAPACK failures (non-convergence, illegal values)."""


class CapabilityError(TTError, RuntimeError):
    """Feature not available on this backend (e.g. message traces under MPI)."""


class DeadlockError(ContractError):
    """Simulated rendezvous or collective timed out waiting for a peer."""
