"""Site-specific radio propagation: scene reconstruction, ray tracing and validation."""

__version__ = "0.1.0"
