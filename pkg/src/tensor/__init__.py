"""テンソル演算と逆伝播"""
from src.tensor.core import ComputationTape, Function, Tensor, backward

__all__ = ["ComputationTape", "Function", "Tensor", "backward"]
