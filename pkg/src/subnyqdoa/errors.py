"""Exception types shared across the package."""


class OutOfRangeError(ValueError):
    """A derived quantity left its physically meaningful range."""


class RankDeficientScenarioError(ValueError):
    """The scenario does not support the requested bound or estimate."""


class InsufficientDataError(ValueError):
    """Too few snapshots for the requested operation."""


class ConfigError(ValueError):
    """Experiment configuration failed validation.

    ``path`` locates the offending field, e.g. ``sampling.C[2]``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
