"""軽量マスクデコーダ（Transformer 2層 + パッチごとの線形ヘッド）"""
import numpy as np
from pydantic import Field, model_validator

from src.config import VisualConfig
from src.models import ArrayModel
from src.nn.layers import LayerNorm, Linear, build_blocks
from src.nn.module import Module
from src.tensor import functional as F
from src.tensor.core import Tensor
from src.utils.error_handler import ShapeMismatchError


class MaskLogits(ArrayModel):
    """画素ごとのロジット"""

    logits: np.ndarray = Field(..., description="[H, W]")
    threshold: float = 0.0

    @model_validator(mode="after")
    def _two_dimensional(self) -> "MaskLogits":
        if self.logits.ndim != 2:
            raise ValueError(f"MaskLogits must be [H, W], got {self.logits.shape}")
        return self


def binarize(mask_logits: MaskLogits) -> np.ndarray:
    """ロジット > threshold の画素を前景とするブールマスク"""
    return mask_logits.logits > mask_logits.threshold


class MaskDecoder(Module):
    """E_N → H×W ロジットマップ

    エンコーダの位置埋め込みを再利用して各トークンに加える。ヘッドは全トークンで共有され、
    1トークンあたり patch_size² 個のロジットをピクセルシャッフルで並べ直す。
    """

    def __init__(self, cfg: VisualConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = build_blocks(cfg.decoder_layers, cfg.width, cfg.n_heads, cfg.mlp_ratio, rng)
        self.ln = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.patch_size**2, rng)

    def __call__(self, patch_tokens: Tensor, position: Tensor | None = None) -> Tensor:
        """patch_tokens [B, m, d] → ロジット [B, H, W]"""
        m, grid = self.cfg.token_count, self.cfg.grid_size
        if patch_tokens.ndim == 2:
            patch_tokens = F.rearrange(patch_tokens, "m d -> 1 m d")
        if patch_tokens.ndim != 3 or patch_tokens.shape[1:] != (m, self.cfg.width):
            raise ShapeMismatchError(
                f"Decoder expects [B, {m}, {self.cfg.width}] tokens, got {patch_tokens.shape}",
                shapes=(patch_tokens.shape, (m, self.cfg.width)),
            )

        x = patch_tokens
        if position is not None:
            x = F.add(x, F.repeat(position, "m d -> b m d", b=patch_tokens.shape[0]))
        for block in self.blocks:
            x, _ = block(x)
        pixels = self.head(self.ln(x))
        return F.rearrange(
            pixels,
            "b (gh gw) (ph pw) -> b (gh ph) (gw pw)",
            gh=grid,
            ph=self.cfg.patch_size,
        )

    def decode_mask(
        self, patch_tokens: Tensor, position: Tensor | None = None, threshold: float = 0.0
    ) -> list[MaskLogits]:
        """バッチの各要素を MaskLogits にする"""
        logits = self(patch_tokens, position)
        return [MaskLogits(logits=row.copy(), threshold=threshold) for row in logits.data]
