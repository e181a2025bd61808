"""Doctor/pharmacist retrieval-augmented consultation engine."""

__version__ = "0.1.0"
