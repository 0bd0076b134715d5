"""Exception types shared across the simulator."""


class FogsimError(ValueError):
    """Base class for all simulator errors."""


class ConfigError(FogsimError):
    """Invalid configuration. Carries every violation found, not just the first."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TopologyError(FogsimError):
    """Structurally invalid tree, cluster, or mobility event."""


class DataError(FogsimError):
    """Invalid dataset operation (empty batch, stale indices, shape mismatch)."""


class AggregationError(FogsimError):
    """Invalid aggregation input (weights, dimensions, disconnected graphs)."""
