"""Exception hierarchy. Every failure carries a machine-readable category
string that the CLI prints as its one-line error report."""


class MoeError(Exception):
    category = "internal"


class DimensionError(MoeError):
    """Tensor shapes do not line up; the message names both shapes."""

    category = "dimension"


class ConfigError(MoeError):
    """Invalid or inconsistent configuration; the message names the key."""

    category = "config"


class StateError(MoeError):
    """An operation was called out of order (e.g. backward without a cache)."""

    category = "state"


class NumericError(MoeError):
    """A non-finite value appeared where a finite one is required."""

    category = "numeric"


class LabelError(MoeError):
    """A class/grapheme id is outside its valid range."""

    category = "label"


class EmptySequenceError(DimensionError):
    category = "empty-sequence"


class DegenerateDistributionError(NumericError):
    category = "degenerate-distribution"


class InfeasibleAlignmentError(MoeError):
    """The label sequence cannot be aligned within the given frame count."""

    category = "infeasible-alignment"


class PartitionError(MoeError):
    """Expert ranges across workers do not partition the expert set."""

    category = "partition"


class TransportError(MoeError):
    """A dispatched frame was lost or duplicated in the worker exchange."""

    category = "transport"


class SyncError(MoeError):
    """A worker was consulted before it reached the required phase."""

    category = "sync"


class DataFormatError(MoeError):
    """A corpus or checkpoint file is malformed."""

    category = "data-format"
