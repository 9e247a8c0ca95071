"""Speaker-disentangled codec and code language model on a synthetic corpus."""

__version__ = "0.1.0"
