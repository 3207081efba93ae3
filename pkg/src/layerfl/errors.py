"""Exception hierarchy shared across the package."""


class LayerFLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(LayerFLError):
    """Invalid shapes, dimensions, options or config fields."""


class NumericError(LayerFLError):
    """Non-finite values produced where finite ones are required."""


class AggregationError(LayerFLError):
    """Model blending or server aggregation received unusable inputs."""


class PartitionError(LayerFLError):
    """Client partitioning could not satisfy its constraints."""


class IngestionError(LayerFLError):
    """A data file is malformed or truncated."""
