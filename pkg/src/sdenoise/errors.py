"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid run configuration or missing/inconsistent inputs."""


class DataFormatError(ValueError):
    """Unparseable or out-of-contract data file; message carries location."""


class NumericError(RuntimeError):
    """Non-finite values or failed numerical subroutine."""


class TrainingDivergedError(NumericError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged (non-finite loss) at step {step}")


class SamplingDivergedError(NumericError):
    """Sampler state blew up; carries the step index and diagnostics so far."""

    def __init__(self, step, diagnostics=None, message=None):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(message or f"sampler state diverged at step {step}")
