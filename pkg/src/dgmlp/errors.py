"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """Input violates a precondition (shape mismatch, out-of-range index, ...)."""


class UnsupportedOperation(ValueError):
    """Operation is not defined for the given gate kind."""


class ModeSkip(Exception):
    """An adaptation mode cannot run for this model.

    ``reason`` uses the status vocabulary of the results table, e.g.
    ``"mode=theta_only"`` or ``"no trainable params"``.
    """

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason

    @property
    def status(self):
        return f"SKIP({self.reason})"


class IdxParseError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, kind, path, offset, detail=""):
        msg = f"{kind} at byte offset {offset} in {path}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.kind = kind
        self.path = str(path)
        self.offset = offset


class ServiceUnavailable(RuntimeError):
    """No snapshot has been published yet."""


class InsufficientData(ValueError):
    """Too few usable rows for a statistic."""
