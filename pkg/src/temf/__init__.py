"""Temporal- and emotion-assisted multitask note classifier, desk scale.

A self-contained stack: a float64 reverse-mode autodiff engine, the
hierarchical attention model built on it, a statistics-matched synthetic
corpus generator, and the cross-validation / agreement-metric evaluation
harness, wired together by the ``temf`` command-line tool.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, ShapeError, ContractError, grad_check

__all__ = ["Tensor", "Tape", "ShapeError", "ContractError", "grad_check", "__version__"]
