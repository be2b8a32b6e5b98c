"""loopkit: set networks that map optimization inputs to optimal parameters.

Subpackages
-----------
tensor     float64 tensors with tape-based reverse-mode differentiation
networks   permutation-invariant set architectures (Deep Sets, Set Transformer)
solvers    classical reference solvers and transport distances
problems   losses and evaluation metrics for the four problem families
datagen    seeded dataset generators and container I/O
training   first-order training loops and checkpointing
cli        command-line pipelines (``loopkit`` entry point)
"""

__version__ = "0.1.0"
