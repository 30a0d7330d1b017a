"""Multi-level feature merging over toy vision transformers.

Subpackages: tensor (autodiff kernel), encoder (toy ViT + pretraining),
merge (multi-level merging strategies), fusion (dual-branch fusion),
probe (synthetic tasks and sweeps), cli (experiment runner).
"""

from .tensor import (
    GradTape,
    NumericalError,
    Parameter,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    finite_diff_grad,
    precision,
    precision_bits,
    set_precision,
)

__version__ = "0.1.0"
