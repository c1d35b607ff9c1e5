"""Exception hierarchy shared by every ravenforge module.

The CLI maps each class to an exit status and a one-word category
(see `ravenforge.entrypoints.cli`).
"""

from pathlib import Path


class RavenforgeError(Exception):
    """Base class for all errors raised by ravenforge."""

    category = "error"


class ShapeError(RavenforgeError, ValueError):
    """Tensor shapes or image resolutions do not agree."""

    category = "shape"


class ParameterError(RavenforgeError, ValueError):
    """A scalar parameter is outside its admissible range."""

    category = "parameter"


class ContractError(RavenforgeError):
    """A caller broke an operation's precondition (or a freeze audit failed)."""

    category = "contract"


class NumericError(RavenforgeError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""

    category = "numeric"


class GenerationError(RavenforgeError):
    """Problem generation exhausted its retry budget."""

    category = "generation"


class FormatError(RavenforgeError):
    """A binary file has the wrong magic, version or checksum."""

    category = "io"


class TrainingAborted(NumericError):
    """Training stopped on a non-finite loss.

    Attributes:
        step: Optimizer step at which the loss became non-finite
        dump_path: Checkpoint written with the state at the time of the abort, if any
    """

    def __init__(self, message: str, step: int, dump_path: Path | None = None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path
