"""Exception types raised across the package."""


class SCRError(Exception):
    """Base class for all package errors."""


class ParseError(SCRError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class EmptyDataset(SCRError, ValueError):
    pass


class AlreadyAugmented(SCRError, ValueError):
    pass


class InvalidDimension(SCRError, ValueError):
    pass


class NoLabels(SCRError, ValueError):
    pass


class EmptyGraph(SCRError, ValueError):
    pass


class NonFiniteFeatures(SCRError, ValueError):
    pass


class ShapeError(SCRError, ValueError):
    pass


class NotScalar(SCRError, ValueError):
    pass


class MissingRelation(SCRError, KeyError):
    pass


class NoNegatives(SCRError, ValueError):
    pass


class ContractViolation(SCRError, ValueError):
    pass


class EmptyEvaluation(SCRError, ValueError):
    pass


class FormatError(SCRError, ValueError):
    pass


class ConfigError(SCRError, ValueError):
    pass


class TrainingDiverged(SCRError, RuntimeError):
    """Loss became non-finite; ``dump`` holds the offending batch."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class AssumptionViolated(SCRError, RuntimeError):
    """The shared semantic-neighbor vector lost its non-zero property."""
