"""Transformer層（pre-norm, GELU MLP）"""
import numpy as np

from src.nn.module import Module, ModuleList, Parameter
from src.tensor import functional as F
from src.tensor.core import Tensor


class Linear(Module):
    """y = x W + b"""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        std: float | None = None,
    ):
        std = std if std is not None else 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, std, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.weight)
        return F.add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.q_proj = Linear(width, width, rng)
        self.k_proj = Linear(width, width, rng)
        self.v_proj = Linear(width, width, rng)
        self.out_proj = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: [B, T, d] → (出力 [B, T, d], 注意重み [B, heads, T, T])"""
        q, k, v = (
            F.rearrange(proj(x), "b t (h e) -> b h t e", h=self.n_heads)
            for proj in (self.q_proj, self.k_proj, self.v_proj)
        )
        attended, weights = F.scaled_dot_product_attention(q, k, v)
        merged = F.rearrange(attended, "b h t e -> b t (h e)")
        return self.out_proj(merged), weights


class MLP(Module):
    def __init__(self, width: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(width, width * ratio, rng)
        self.fc2 = Linear(width * ratio, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """pre-norm Transformer層"""

    def __init__(self, width: int, n_heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln_1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(width, n_heads, rng)
        self.ln_2 = LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        attended, weights = self.attn(self.ln_1(x))
        h = F.add(x, attended)
        return F.add(h, self.mlp(self.ln_2(h))), weights


def build_blocks(
    count: int, width: int, n_heads: int, mlp_ratio: int, rng: np.random.Generator
) -> ModuleList:
    return ModuleList([TransformerBlock(width, n_heads, mlp_ratio, rng) for _ in range(count)])
