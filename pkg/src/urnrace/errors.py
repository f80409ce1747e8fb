"""Exception types shared across the package."""


class NumericRangeError(OverflowError):
    """A weight or rate left the representable floating-point range."""


class UnsupportedFamilyError(ValueError):
    """The requested operation has no implementation for this distribution family."""


class NotYetReachedError(ValueError):
    """A hitting time was requested beyond the level the trajectory reached.

    Carries ``highest_reached``, the largest value the agent attained.
    """

    def __init__(self, agent, requested, highest_reached):
        self.agent = agent
        self.requested = requested
        self.highest_reached = highest_reached
        super().__init__(
            f"agent {agent} only reached value {highest_reached}, "
            f"cannot report the hitting time of {requested}"
        )


class SchemaVersionError(RuntimeError):
    """A persisted results file declares an unsupported schema version."""

    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"results schema version {found!r} not supported (expected {supported!r})")


class ResultPersistenceError(RuntimeError):
    """Writing results to disk failed after the computation completed.

    The finished result set is retained on the ``result`` attribute.
    """

    def __init__(self, result, cause):
        self.result = result
        super().__init__(f"failed to persist results: {cause}")
