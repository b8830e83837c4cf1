"""Multi-modal collaborative brake decisions with cross-modal distillation."""

__version__ = "0.1.0"
