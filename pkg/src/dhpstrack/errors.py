"""Exception hierarchy shared by the simulator, server and analysis code."""


class DhpsError(Exception):
    pass


class PortExhausted(DhpsError):
    """No suitable source port left for a 3-tuple."""


class PoolExhausted(DhpsError):
    """The server cannot hand out more destination ports."""


class UnknownDestination(DhpsError):
    pass


class AmbiguousOrder(DhpsError):
    pass


class InsufficientData(DhpsError):
    pass


class DecodeError(DhpsError):
    pass


class DecodeConflict(DecodeError):
    """A loopback tuple was claimed by two attacker tuples."""


class MissingHigh(DecodeError):
    """No unique attacker tuple carries the largest loopback of a group."""


class AttackError(DhpsError):
    pass


class NoConvergence(AttackError):
    pass


class IterationLimit(NoConvergence):
    """Phase 1 exceeded its iteration cap."""


class StateTooLarge(DhpsError):
    pass


class NoSolution(DhpsError):
    """The termination table does not exist for this (T, p*)."""
