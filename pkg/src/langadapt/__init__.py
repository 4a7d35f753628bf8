"""Toolkit for adapting language models to underrepresented languages at the
data level: subword vocabulary training, embedding remapping by subword
averaging, token-efficiency benchmarking, instruction corpus compilation, and
output scoring."""

__version__ = "0.1.0"
