"""Exception taxonomy shared across the package.

The CLI maps these onto its machine-parseable error categories.
"""


class PatchforgeError(Exception):
    category = "internal"


class InputError(PatchforgeError, ValueError):
    """Caller-supplied data or arguments violate a precondition."""

    category = "input"


class ConfigError(InputError):
    category = "config"


class ParseError(InputError):
    """Malformed text input; carries the byte offset of the problem."""

    category = "parse"

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte {offset})"
        super().__init__(message)


class EvaluationError(PatchforgeError):
    category = "evaluation"
