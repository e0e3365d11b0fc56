"""Tensor-decomposition compression of Transformer weight stacks."""
__version__ = "0.1.0"
