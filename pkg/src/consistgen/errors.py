"""Exception types shared across the package."""


class ConsistGenError(Exception):
    pass


class ConfigError(ConsistGenError, ValueError):
    """Invalid configuration value or incompatible extents."""


class PromptFormatError(ConfigError):
    """Prompt lacks the background | foreground [| action] layout."""


class InputError(ConsistGenError, ValueError):
    """Array argument with the wrong shape, range or content."""


class PipelineOrderError(ConsistGenError, RuntimeError):
    """A pass was run before the data it depends on exists."""


class SamplingError(ConsistGenError, FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite latent"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class HookError(ConsistGenError, RuntimeError):
    def __init__(self, step, layer: int, cause: BaseException):
        super().__init__(f"hook failed at step {step}, single layer {layer}: {cause!r}")
        self.step = step
        self.layer = layer


class FormatError(ConsistGenError, ValueError):
    """Malformed CCTF file. ``defect`` names what is wrong."""

    def __init__(self, defect: str, message: str):
        super().__init__(f"{defect} error: {message}")
        self.defect = defect
