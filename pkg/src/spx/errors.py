"""Exception types shared across the package."""


class CodecError(Exception):
    """Base class for tensor-file codec failures."""


class BadMagicError(CodecError):
    pass


class UnsupportedFormatError(CodecError):
    """Known magic but unreadable version/dtype/ndim."""


class TruncatedPayloadError(CodecError):
    pass


class ShapeOverflowError(CodecError):
    pass


class NotPositiveDefiniteError(ValueError):
    """Matrix stayed non-PD through the full jitter escalation."""


class DegenerateDistributionError(ValueError):
    """Zero-variance sample set where a distribution shape is required."""


class DegeneratePairsError(ValueError):
    """All sampled input or output pairs coincide; normalizers undefined."""


class InfeasibleAllocationError(ValueError):
    """Keep-dense budget pushes the remaining rows past 100% sparsity."""


class PropagationError(RuntimeError):
    """Non-finite activations while propagating calibration data."""

    def __init__(self, layer_name: str, message: str = "non-finite activations"):
        self.layer_name = layer_name
        super().__init__(f"{message} at layer {layer_name}")
