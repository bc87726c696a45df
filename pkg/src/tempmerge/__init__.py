"""Time-specifier model merging for dense retrieval, at desk scale."""

__version__ = "0.1.0"
