"""Error taxonomy shared by the whole engine.

Invalid arguments raise plain ValueError.  The classes below exist so the
CLI can map failures onto distinct exit codes: schema/format problems are
user-input errors (exit 2), numeric failures are engine errors (exit 3).
"""


class SchemaError(ValueError):
    """A bench-case or job description violates the schema; names the field."""


class FormatError(ValueError):
    """A binary file (latent container, PPM, PGM) is malformed.

    Carries the byte offset of the first offending byte when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A gradient or latent became non-finite during optimization."""
