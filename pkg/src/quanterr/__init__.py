"""Per-example analysis of weight-only quantization error on small transformers."""

__version__ = "0.1.0"
