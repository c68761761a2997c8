"""Value-driven reordering scan network for underwater image enhancement."""

__version__ = "0.1.0"
