"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad dims, inconsistent relabel spec, unknown preset...)."""


class ShapeError(ValueError):
    """Array shapes do not match what a network or stack expects."""


class LayoutError(ValueError):
    """Malformed or disconnected maze layout."""


class StateError(ValueError):
    """A point state lies outside the open region of a maze."""


class FormatError(ValueError):
    """A binary file failed validation. The message names the byte offset or field."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss, gradient or parameter."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


class PlanningError(RuntimeError):
    """Sub-goal planning produced a non-finite prediction."""
