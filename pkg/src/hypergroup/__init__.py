"""Dynamic spectral grouping and hypergraph attention for cooperative multi-agent learning."""

__version__ = "0.1.0"
