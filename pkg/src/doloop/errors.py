"""Exception types raised across the library."""


class DoloopError(Exception):
    """Base class for all library errors."""


class CycleDetected(DoloopError):
    pass


class InvalidIndex(DoloopError):
    pass


class SelfLoop(DoloopError):
    pass


class ValueOutOfRange(DoloopError):
    pass


class NonFiniteState(DoloopError):
    pass


class ParseError(DoloopError):
    pass


class MissingColumn(DoloopError):
    pass


class EmptyRegime(DoloopError):
    pass


class RootHasNoPredictor(DoloopError):
    pass


class EmptyBatch(DoloopError):
    pass


class LedgerUninitialized(DoloopError):
    pass


class ValueNotOnGrid(DoloopError):
    pass


class UnscoredCandidate(DoloopError):
    pass


class LengthMismatch(DoloopError):
    pass


class DegenerateVariance(DoloopError):
    pass


class UnknownEnvironment(DoloopError):
    pass


class UnknownPolicy(DoloopError):
    pass


class MissingLogs(DoloopError):
    pass


class ProbeModeUnavailable(DoloopError):
    pass


class ConfigError(DoloopError):
    pass
