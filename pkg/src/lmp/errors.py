"""Exception types shared by every module.

Errors may carry the denoising step ``t`` and ``block`` index they occurred
in; the pipeline attaches both before re-raising so a single line of
diagnostics is enough to locate the failure.
"""


class LMPError(Exception):
    def __init__(self, message, t=None, block=None):
        super().__init__(message)
        self.message = message
        self.t = t
        self.block = block

    def with_context(self, t=None, block=None):
        if self.t is None:
            self.t = t
        if self.block is None:
            self.block = block
        return self

    def __str__(self):
        where = []
        if self.t is not None:
            where.append(f"t={self.t}")
        if self.block is not None:
            where.append(f"block={self.block}")
        if where:
            return f"{self.message} [{', '.join(where)}]"
        return self.message


class ShapeError(LMPError, ValueError):
    pass


class NumericError(LMPError, ArithmeticError):
    pass


class ConfigError(LMPError, ValueError):
    pass


class FormatError(LMPError, OSError):
    """Malformed or unsupported tensor file."""
