"""Exception hierarchy shared across the package."""


class BdlabError(Exception):
    """Base class for all package errors."""


class ConfigError(BdlabError):
    """Invalid or inconsistent experiment configuration."""


class DatasetError(BdlabError):
    """Dataset files missing/corrupt or batch invariants violated."""


class PartitionError(BdlabError):
    """Partitioner fitting or assignment failure."""


class TriggerError(BdlabError):
    """Invalid trigger geometry, placement, or combination mask."""


class PoisonError(BdlabError):
    """Poison plan or sample construction failure."""


class TrainingError(BdlabError):
    """Training diverged or was invoked with invalid inputs."""


class CheckpointError(BdlabError):
    """Checkpoint file unreadable or incompatible."""


class DefenseError(BdlabError):
    """Defense harness failure (inversion divergence, bad inputs)."""
