"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2 and
numerical failures exit 3.
"""


class InfforError(Exception):
    pass


class ConfigError(InfforError, ValueError):
    """Invalid or incomplete configuration; the message names the field."""


class DimensionError(InfforError, ValueError):
    pass


class NumericalError(InfforError, ArithmeticError):
    pass


class LissaDivergenceError(NumericalError):
    def __init__(self, damp, scale, norm):
        super().__init__(
            f"LiSSA iterate diverged (norm={norm:.3g}); damp={damp!r}, scale={scale!r} "
            "are misconfigured for this Hessian (try a larger scale)"
        )
        self.damp = damp
        self.scale = scale


class TrainingDivergenceError(NumericalError):
    pass


class DegenerateScaleError(NumericalError):
    def __init__(self, subset, message=None):
        super().__init__(message or f"robust scale Q is zero on subset {subset!r}")
        self.subset = subset


class CheckpointFormatError(InfforError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass
