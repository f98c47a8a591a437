"""Exception types raised across the package."""


class HyperGibbsError(Exception):
    """Base class for all package errors."""


class InvalidOwnerMap(HyperGibbsError, ValueError):
    """An owner array has the wrong length or references a worker outside [0, K)."""


class EmptyHyperedgeIntersection(HyperGibbsError, ValueError):
    """A hyperedge shares no vertex with the worker that owns it."""


class DimensionMismatch(HyperGibbsError, ValueError):
    """A vector does not match the dimension an operator expects."""


class MissingHalo(HyperGibbsError, ValueError):
    """A local operator was applied without the halo values it needs."""


class NonFiniteState(HyperGibbsError, FloatingPointError):
    """The chain produced NaN or Inf, usually a sign of a step size above its bound."""


class TransportFailure(HyperGibbsError, RuntimeError):
    """A peer disconnected, timed out, or the run was aborted."""


class ProtocolViolation(HyperGibbsError, RuntimeError):
    """A received frame is malformed or out of sequence."""


class EmptyBuffer(HyperGibbsError, ValueError):
    """Quantiles were requested from an empty sample buffer."""


class TileTooSmall(HyperGibbsError, ValueError):
    """A worker tile is narrower than the halo the operators need."""


class BadImageFormat(HyperGibbsError, ValueError):
    """An image file could not be decoded."""


class ConfigError(HyperGibbsError, ValueError):
    """An experiment configuration is invalid."""
