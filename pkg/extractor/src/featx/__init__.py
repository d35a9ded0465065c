"""featx: frozen-backbone feature extraction into portable binary archives."""

__version__ = "0.1.0"
