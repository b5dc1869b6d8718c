from typing import Optional


class PoodleError(Exception):
    """
    Base class for every error raised by the library. The CLI maps subclasses to
    exit codes through `config/error_codes.json`.
    """

    error_code = "X01"


class DimensionError(PoodleError):
    error_code = "C02"

    def __init__(self, axis: str, expected, provided, hint: Optional[str] = None) -> None:
        self.axis = axis
        self.expected = expected
        self.provided = provided

        message = f"Dimension mismatch on axis '{axis}': expected {expected} but got {provided}."
        if hint:
            message = f"{message} {hint}"

        super().__init__(message)


class ParameterError(PoodleError):
    error_code = "C02"


class InversionError(PoodleError):
    error_code = "V01"


class DegenerateStatisticsError(PoodleError):
    error_code = "V01"


class CropError(PoodleError):
    error_code = "C02"


class FormatError(PoodleError):
    error_code = "D01"

    def __init__(self, message: str, offset: int = 0) -> None:
        self.offset = offset

        super().__init__(f"{message} (at byte offset {offset})")


class CheckpointDigestError(PoodleError):
    error_code = "D02"

    def __init__(self, expected: str, provided: str) -> None:
        self.expected = expected
        self.provided = provided

        super().__init__(
            f"Checkpoint config digest '{provided}' does not match the resolved config '{expected}'."
        )


class NonFiniteLossError(PoodleError):
    error_code = "V02"

    def __init__(self, step: int, stats: dict) -> None:
        self.step = step
        self.stats = stats

        super().__init__(f"Non-finite loss at step {step}. Mask statistics: {stats}")


class StopException(Exception):
    ...
