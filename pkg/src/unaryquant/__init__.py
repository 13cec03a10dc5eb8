"""Shuffled unary/quantized federated learning simulator.

Subpackages:

- ``codec``: decimal decomposition, unary encoding, stochastic quantization
- ``nn``: flat-parameter MLP with exact backprop
- ``data``: IDX ingestion, synthetic corpora, Dirichlet partitioning
- ``federation``: the client/shuffler/server round protocol
- ``attack``: source-inference attacks and their evaluation
- ``cli``: experiment harness (``unaryquant`` entry point)
"""

from . import attack, codec, data, federation, nn

__all__ = ["attack", "codec", "data", "federation", "nn"]
__version__ = "0.1.0"
