"""比較用の条件付け機構（チャネル注意 / 空間注意 / VPT）"""
import numpy as np

from src.config import VisualConfig
from src.nn.layers import Linear
from src.nn.module import Module, ModuleList, Parameter
from src.tensor import functional as F
from src.tensor.core import Tensor
from src.utils.error_handler import ShapeMismatchError


def _check_pair(patch_tokens: Tensor, text_cls: Tensor) -> tuple[int, int, int]:
    if patch_tokens.ndim != 3 or text_cls.ndim != 2 or text_cls.shape[0] != patch_tokens.shape[0]:
        raise ShapeMismatchError(
            f"Expected E_N [B, m, d] and text [CLS] [B, d], got {patch_tokens.shape} and {text_cls.shape}",
            shapes=(patch_tokens.shape, text_cls.shape),
        )
    batch, m, width = patch_tokens.shape
    return batch, m, width


class ChannelAttention(Module):
    """チャネルごとのゲート sigmoid(W T^cls + b) を全トークンに掛ける"""

    def __init__(self, width: int, rng: np.random.Generator):
        self.gate = Linear(width, width, rng)

    def gate_values(self, text_cls: Tensor) -> Tensor:
        return F.sigmoid(self.gate(text_cls))

    def __call__(self, patch_tokens: Tensor, text_cls: Tensor) -> Tensor:
        _, m, _ = _check_pair(patch_tokens, text_cls)
        gate = F.repeat(self.gate_values(text_cls), "b d -> b m d", m=m)
        return F.mul(patch_tokens, gate)


class SpatialAttention(Module):
    """トークンごとの重み softmax_m(E_N · W T^cls) を m 倍して掛ける（平均保存）"""

    def __init__(self, width: int, rng: np.random.Generator):
        self.query = Linear(width, width, rng)

    def token_weights(self, patch_tokens: Tensor, text_cls: Tensor) -> Tensor:
        """[B, m] の softmax 重み"""
        _check_pair(patch_tokens, text_cls)
        query = F.rearrange(self.query(text_cls), "b d -> b d 1")
        scores = F.rearrange(F.matmul(patch_tokens, query), "b m 1 -> b m")
        return F.softmax(scores, axis=-1)

    def __call__(self, patch_tokens: Tensor, text_cls: Tensor) -> Tensor:
        _, m, width = _check_pair(patch_tokens, text_cls)
        weights = F.scale(self.token_weights(patch_tokens, text_cls), float(m))
        return F.mul(patch_tokens, F.repeat(weights, "b m -> b m d", d=width))


class PromptBank(Module):
    """1層分の学習可能プロンプト [P, d]"""

    def __init__(self, count: int, width: int, rng: np.random.Generator):
        self.prompts = Parameter(rng.normal(0.0, 0.02, size=(count, width)))


class VisualPromptTuning(Module):
    """deep-VPT: 各層の入力にプロンプトを前置する

    プロンプトは層ごとに独立する。学習されるのはプロンプトだけで、
    vpt_text_shift=True のときに限りテキスト [CLS] の共有射影を加えてカテゴリ条件付けする。
    """

    def __init__(self, cfg: VisualConfig, rng: np.random.Generator):
        self.prompt_count = cfg.vpt_prompt_count
        self.banks = ModuleList(
            [PromptBank(cfg.vpt_prompt_count, cfg.width, rng) for _ in range(cfg.n_layers)]
            if cfg.vpt_prompt_count > 0
            else []
        )
        self.condition = Linear(cfg.width, cfg.width, rng, std=0.02) if cfg.vpt_text_shift else None

    def deep_prompts(self, text_cls: Tensor) -> dict[int, Tensor] | None:
        """層番号 → [B, P, d]（プロンプト数0なら None）"""
        if self.prompt_count == 0:
            return None
        batch = text_cls.shape[0]
        prompts = {layer: F.repeat(bank.prompts, "p d -> b p d", b=batch) for layer, bank in enumerate(self.banks)}
        if self.condition is None:
            return prompts
        shift = F.repeat(self.condition(text_cls), "b d -> b p d", p=self.prompt_count)
        return {layer: F.add(prompt, shift) for layer, prompt in prompts.items()}
