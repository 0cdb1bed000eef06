"""kdlab: a desk-scale knowledge distillation laboratory.

Differentiable tensor core, teacher/student model zoo, a distillation loss
zoo, gap-based sample weighting schemes, an uncertainty-weighted adaptive
loss, and a config-driven experiment harness that emits reproducible CSV
reports.
"""

from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    sgd_step,
    zero_grads,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "backward",
    "no_grad",
    "sgd_step",
    "zero_grads",
    "__version__",
]
