"""Exception hierarchy shared by all soc_kit modules.

The CLI maps these onto exit codes: ConfigError -> 1, I/O problems -> 2,
numerical failures (DivergenceError, SynthesisError, StallError,
UnderdeterminedError) -> 3.
"""


class SocKitError(Exception):
    """Base class for all soc_kit errors."""


class ContractViolationError(SocKitError, ValueError):
    """An argument violates an operation's preconditions (shape, range, ...)."""


class DivergenceError(SocKitError, RuntimeError):
    """A simulation produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)
        self.step = step


class SynthesisError(SocKitError, RuntimeError):
    """Controller synthesis failed (singular Riccati term, bad weights, ...)."""


class UnderdeterminedError(SocKitError, RuntimeError):
    """A least-squares identification problem is rank deficient."""

    def __init__(self, message: str, blocks: list[tuple[int, int]] | None = None):
        super().__init__(message)
        self.blocks = blocks or []


class StallError(SocKitError, RuntimeError):
    """Backtracking line search could not find a decrease."""


class ConfigError(SocKitError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, violations: list[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        super().__init__("; ".join(violations))
        self.violations = violations
