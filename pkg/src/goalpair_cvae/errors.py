class ConfigError(ValueError):
    """Invalid configuration or input ranges."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact (dataset, checkpoint) is not where it should be."""
