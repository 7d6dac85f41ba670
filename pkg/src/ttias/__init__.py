"""Sparse heat-source reconstruction with IGA, tensor trains and hybrid IAS."""

__version__ = "0.1.0"
