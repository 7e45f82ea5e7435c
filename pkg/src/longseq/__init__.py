"""Long-sequence training techniques on a deterministic CPU mini training stack."""

__version__ = "0.1.0"
