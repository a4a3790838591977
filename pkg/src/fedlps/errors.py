"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
data problems (format, partition) exit 3, anything raised mid-run exits 4.
"""


class FedLPSError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedLPSError):
    """Invalid configuration: bad hyperparameter, impossible split, missing parameter."""


class StructuralError(FedLPSError):
    """Tensor/layer shape mismatch; the message names the offending layer."""


class UsageError(FedLPSError):
    """API misuse: consumed tape reused, mismatched parameter trees, bad arguments."""


class InputError(FedLPSError):
    """Invalid data fed to an operation, e.g. a label outside the class range."""


class DataFormatError(FedLPSError):
    """Malformed on-disk data (IDX codec, container files); includes a byte offset where known."""


class PartitionError(FedLPSError):
    """A partition plan could not be built under the requested constraints."""


class ProtocolError(FedLPSError):
    """A federation-round payload does not match the registered client state."""


class AggregationError(FedLPSError):
    """Aggregation cannot proceed, e.g. zero total shard size."""
