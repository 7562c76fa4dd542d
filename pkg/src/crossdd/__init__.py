"""Multimodal domain generalization on synthetic deception-style data.

Subpackages are plain numpy: a tape-based autodiff engine, a deterministic
synthetic benchmark, batch schedulers for multi-source training, fusion
models, ERM and gradient-matching trainers, and an evaluation harness.
"""

__version__ = "0.1.0"
