"""Exception types shared across the package."""


class AtPairError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AtPairError):
    """A config value, architecture id, or threat-model setup is invalid."""


class InputError(AtPairError):
    """An input array violates a shape, range, or pairing contract."""


class DatasetError(AtPairError):
    """A dataset or mask file is missing, corrupt, or inconsistent."""


class CheckpointError(AtPairError):
    """A checkpoint file is unreadable or has an incompatible format version."""


class TrainingDivergedError(AtPairError):
    """Training hit a non-finite loss; carries the step and loss components."""

    def __init__(self, step: int, ce: float, alp: float, at: float, total: float):
        self.step = step
        self.ce = ce
        self.alp = alp
        self.at = at
        self.total = total
        super().__init__(
            f"non-finite loss at step {step}: "
            f"ce={ce!r} alp={alp!r} at={at!r} total={total!r}"
        )
