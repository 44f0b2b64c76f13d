"""Exception types shared across the package."""


class FlowSuffError(Exception):
    """Base class for all library errors."""


class ContractViolation(FlowSuffError):
    """A caller broke an operation precondition (shape/dimension mismatch)."""


class ConfigError(FlowSuffError):
    """Invalid or inconsistent configuration."""


class DataError(FlowSuffError):
    """Corrupt, misaligned, or non-finite input data."""


class DivergenceError(FlowSuffError):
    """A forward pass produced non-finite activations."""


class TrainingFailure(FlowSuffError):
    """Training diverged; carries diagnostics about the failing run."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DensityError(FlowSuffError):
    """Non-finite intermediate during density evaluation; carries layer index."""

    def __init__(self, message: str, layer_index: int):
        super().__init__(f"{message} (layer {layer_index})")
        self.layer_index = layer_index


class InvertibilityError(FlowSuffError):
    """Round-trip residual of an inverse pass exceeded tolerance."""
