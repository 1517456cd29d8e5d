from .autodiff import Tensor, Parameter
from .optim import Adam

__all__ = ["Tensor", "Parameter", "Adam"]
