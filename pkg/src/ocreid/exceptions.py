"""Exception types raised across the package."""


class OCReIDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OCReIDError, ValueError):
    pass


class IntegrityError(OCReIDError, ValueError):
    """Dataset labels violate a structural invariant (e.g. clothes shared by two identities)."""


class ShapeError(OCReIDError, ValueError):
    pass


class LabelError(OCReIDError, ValueError):
    pass


class NumericError(OCReIDError, FloatingPointError):
    pass


class ContractViolationError(OCReIDError, ValueError):
    pass


class NoComponentError(OCReIDError, LookupError):
    """A parsing map holds no body component to occlude."""


class VocabularyMismatchError(OCReIDError, ValueError):
    pass


class ParseError(OCReIDError, ValueError):
    pass


class TrainingDivergedError(OCReIDError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
