"""Exception hierarchy shared by every amcr module."""

from __future__ import annotations


class AmcrError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(AmcrError, ValueError):
    """A precondition of an operation was not met by the caller."""


class ZeroNormError(ContractViolation):
    pass


class EmptyPromptError(ContractViolation):
    pass


class DegeneratePoolError(AmcrError):
    """Mask-weighted patch sum cancelled to the zero vector."""


class AlignmentError(AmcrError):
    """Generation and reference trajectories do not share timesteps."""


class ConsistencyError(AmcrError):
    """Corpus, encoder or fixture data disagree with each other."""


class ValidationError(AmcrError):
    """An on-disk artifact failed its type invariants."""


class NumericError(AmcrError, ArithmeticError):
    pass


class CalibrationError(AmcrError):
    pass


class ProviderError(AmcrError):
    """An external provider (encoder, slot or candidate service) failed."""


class ProviderTimeout(ProviderError):
    pass


class ProviderUnavailable(ProviderError):
    pass


class ProtocolError(ProviderError):
    """The provider answered, but not in the documented wire format."""


class DimensionDriftError(ProtocolError):
    pass
