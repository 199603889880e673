"""fedseed: desk-scale federated averaging with pluggable initialization.

The package simulates a small cross-silo federation on a procedurally
generated binary-segmentation corpus and compares how the starting
point of the global model (random weights, proxy pre-training, or
distillation from a frozen prompt-conditioned teacher) changes
convergence and robustness to non-IID client data.
"""

__version__ = "0.1.0"
