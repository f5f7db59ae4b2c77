"""Exception types shared across the package."""


class AdvSiamError(Exception):
    """Base class for all package errors."""


class InputSpecError(AdvSiamError):
    """Input tensor does not match the encoder's expected shape or range."""


class ConfigError(AdvSiamError):
    """Invalid attack/train/run configuration. Collects every violation."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnsupportedObjectiveError(AdvSiamError):
    """Objective cannot be applied to this problem (e.g. DLR with K < 4)."""


class DegenerateEmbeddingError(AdvSiamError):
    """A zero-norm embedding row reached a cosine-based loss."""


class CollapseError(AdvSiamError):
    """Training halted because the embedding batch collapsed to a constant."""

    def __init__(self, step, metric_value, loss_history, collapse_history):
        self.step = step
        self.metric_value = metric_value
        self.loss_history = list(loss_history)
        self.collapse_history = list(collapse_history)
        super().__init__(
            f"embedding collapse detected at step {step} "
            f"(batch std {metric_value:.2e})"
        )


class CheckpointError(AdvSiamError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint file has an unknown format version."""


class CheckpointDigestError(CheckpointError):
    """Checkpoint tensor blob does not match its recorded digest."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file is shorter than its header promises."""
