"""Parameter-free adaptation of a multilingual translation model by
magnitude pruning and per-pair weight ownership."""

__version__ = "0.1.0"
