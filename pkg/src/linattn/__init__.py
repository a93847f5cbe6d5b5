"""Linear attention mechanisms with constant-time lookups.

Softmax attention, covariance-sketch linear attention and gated linear
attention with reversible backpropagation, plus GRU encoders, a cloze-QA
training pipeline, an on-disk sketch store and a benchmark harness.
"""

from linattn.linalg import ContractViolation

__version__ = "0.1.0"

__all__ = ["ContractViolation", "__version__"]
