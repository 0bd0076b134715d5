"""fogsim: deterministic simulator for hierarchical federated learning over
fog topologies with device-to-device consensus clusters."""

__version__ = "0.1.0"
