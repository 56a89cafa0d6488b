"""Graph-conditioned transducers for adapting frozen seq2seq code models."""

__version__ = "0.1.0"
