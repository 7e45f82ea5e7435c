class ValidationError(ValueError):
    """Bad user input: out-of-range labels, malformed position ids, bad config."""


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid model/parallel/run configuration.

    ``path`` names the offending config field (e.g. ``parallel.sp_degree``).
    """

    def __init__(self, message: str, path: str | None = None, hint: str | None = None):
        self.path = path
        self.hint = hint
        text = f"{path}: {message}" if path else message
        if hint:
            text = f"{text} ({hint})"
        super().__init__(text)


class ShardingError(ValidationError):
    pass


class DeterminismError(RuntimeError):
    """A recomputed region produced different values than its first run."""


class ContractViolation(RuntimeError):
    """A tiled function depends on tokens outside its own tile."""


class CollectiveError(RuntimeError):
    pass


class SPMDDivergenceError(CollectiveError):
    pass


class CollectiveTimeoutError(CollectiveError):
    pass
