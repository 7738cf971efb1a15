"""Exception hierarchy for the package.

Everything raised on purpose derives from SemcodecError so callers can
catch one base class at the CLI boundary.
"""


class SemcodecError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SemcodecError):
    """A scalar argument is outside its allowed range."""


class SampleRateError(SemcodecError):
    """Waveform sample rate differs from the rate the system is built for."""


class LengthError(SemcodecError):
    """A sequence input is empty or too short to process."""


class ShapeError(SemcodecError):
    """Tensor dimensions do not match what an operation requires."""


class ConsistencyError(SemcodecError):
    """Paired inputs that must belong together do not."""


class DomainError(SemcodecError):
    """A numeric value lies outside the mathematical domain of an operation."""


class DegenerateInputError(SemcodecError):
    """An input is structurally valid but has no usable content."""


class BatchError(SemcodecError):
    """A training batch is malformed or missing a required component."""


class DivergenceError(SemcodecError):
    """Training produced a non-finite loss."""


class FileAccessError(SemcodecError):
    """A file the operation needs could not be read or written."""


class CheckpointFormatError(SemcodecError):
    """A checkpoint file is not in the expected format, or does not match
    the configuration it is being loaded into."""


class CheckpointIntegrityError(SemcodecError):
    """A checkpoint file is truncated or its payload digest does not match."""


class StateError(SemcodecError):
    """An operation needs a component that has not been trained or loaded."""
