"""Exception types shared across the package."""


class PmglabError(Exception):
    """Base class for all package errors."""


class ConfigError(PmglabError, ValueError):
    """Invalid configuration value, file, or serialized document."""


class ShapeError(PmglabError, ValueError):
    """Array shape or dimension mismatch."""


class FirstStepSigmaError(PmglabError, ValueError):
    """DDIM sigma requested at the first step, which has no predecessor."""


class CheckpointError(ConfigError):
    """Malformed checkpoint bytes or unsupported format version."""


class UnfinalizedTapeError(PmglabError, RuntimeError):
    """Backward pass requested on a tape without a finalized output."""


class NumericalAbort(PmglabError, RuntimeError):
    """Computation aborted on non-finite or divergent values.

    `diagnostics` carries a small dict describing where the abort happened.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDiverged(NumericalAbort):
    """Training loss exceeded the divergence threshold."""
