"""ビジュアルエンコーダ（ViT）と一方向 [CLS] ナビゲーション

層 i への入力 [CLS] スロットは、窓 [N1, N2) の内側では L^i(T^cls) で上書きされ、
直前の層の [CLS] 出力は捨てられる。窓の外では通常どおり伝播する。
"""
import einops
import numpy as np
from pydantic import Field

from src.config import VisualConfig
from src.models import ArrayModel
from src.nn.layers import LayerNorm, Linear, build_blocks
from src.nn.module import Module, ModuleList, Parameter
from src.tensor import functional as F
from src.tensor.core import Tensor
from src.utils.error_handler import DegenerateInputError, ModelConfigError, ShapeMismatchError


class EncoderOutput(ArrayModel):
    """エンコーダ出力"""

    patch_tokens: Tensor = Field(..., description="E_N [B, m, d]")
    cls_out: Tensor = Field(..., description="I^cls_N [B, d]")
    attention: list[Tensor] = Field(default_factory=list, description="層ごとの [B, heads, T, T]")
    layer_outputs: list[Tensor] = Field(default_factory=list, description="層ごとの出力系列")
    prompt_count: int = 0


def image_batch(images: np.ndarray) -> np.ndarray:
    """[3, H, W] または [B, 3, H, W] を [B, 3, H, W] にそろえる"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeMismatchError(f"Expected image of shape [B, 3, H, W], got {images.shape}", shapes=(images.shape,))
    return images


class VisualEncoder(Module):
    """学習可能な視覚 [CLS] を持つ pre-norm ViT"""

    def __init__(self, cfg: VisualConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch_dim = 3 * cfg.patch_size**2
        self.patch_embed = Linear(patch_dim, cfg.width, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(cfg.token_count, cfg.width)))
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(cfg.width,)))
        self.blocks = build_blocks(cfg.n_layers, cfg.width, cfg.n_heads, cfg.mlp_ratio, rng)
        self.ln_post = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.embed_dim, rng)

    def patchify(self, images: np.ndarray, with_position: bool = True) -> Tensor:
        """画像 → パッチトークン [B, m, d]（行優先のパッチ順）"""
        images = image_batch(images)
        _, _, height, width = images.shape
        size, patch = self.cfg.image_size, self.cfg.patch_size
        if height != width:
            raise ShapeMismatchError(f"Image must be square, got {height}x{width}", shapes=(images.shape,))
        if height != size or height % patch != 0:
            raise ShapeMismatchError(
                f"Image size {height} does not match image_size {size} / patch {patch}",
                shapes=(images.shape,),
            )

        patches = einops.rearrange(
            images, "b c (gh ph) (gw pw) -> b (gh gw) (c ph pw)", ph=patch, pw=patch
        )
        tokens = self.patch_embed(Tensor(patches))
        if with_position:
            tokens = F.add(tokens, F.repeat(self.pos_embed, "m d -> b m d", b=images.shape[0]))
        return tokens

    def __call__(
        self,
        images: np.ndarray,
        cls_injections: dict[int, Tensor] | None = None,
        deep_prompts: dict[int, Tensor] | None = None,
    ) -> EncoderOutput:
        """エンコード

        Args:
            cls_injections: 層番号 → その層の入力 [CLS] として使う [B, d]
            deep_prompts: 層番号 → その層の入力に前置するプロンプト [B, P, d]
        """
        cls_injections = cls_injections or {}
        deep_prompts = deep_prompts or {}
        for layer in (*cls_injections, *deep_prompts):
            if not 0 <= layer < self.cfg.n_layers:
                raise ModelConfigError(f"Layer index {layer} out of range for {self.cfg.n_layers} layers")

        patches = self.patchify(images)
        batch, m = patches.shape[0], patches.shape[1]
        cls = F.repeat(self.cls_token, "d -> b 1 d", b=batch)

        attention: list[Tensor] = []
        layer_outputs: list[Tensor] = []
        prompt_count = 0
        for index, block in enumerate(self.blocks):
            if index in cls_injections:
                cls = F.rearrange(cls_injections[index], "b d -> b 1 d")
            parts = [cls]
            prompt_count = 0
            if index in deep_prompts:
                parts.append(deep_prompts[index])
                prompt_count = deep_prompts[index].shape[1]
            parts.append(patches)

            out, weights = block(F.concat(parts, axis=1))
            attention.append(weights)
            layer_outputs.append(out)
            cls = F.slice_tokens(out, 0, 1, axis=1)
            patches = F.slice_tokens(out, 1 + prompt_count, 1 + prompt_count + m, axis=1)

        return EncoderOutput(
            patch_tokens=patches,
            cls_out=F.rearrange(cls, "b 1 d -> b d"),
            attention=attention,
            layer_outputs=layer_outputs,
            prompt_count=prompt_count,
        )

    def embed_head(self, cls_out: Tensor) -> Tensor:
        """y = Head(I^cls_N) をL2正規化（対照学習専用）"""
        return F.l2_normalize(self.head(self.ln_post(cls_out)))


class ClsNavigator(Module):
    """窓内の各層に固有の射影 L^i"""

    def __init__(self, cfg: VisualConfig, rng: np.random.Generator, init_noise: float = 1e-3):
        self.window = cfg.window_layers
        projections = []
        for _ in self.window:
            projection = Linear(cfg.width, cfg.width, rng)
            # 恒等に近い初期化: 初期ステップで注入トークン ≈ T^cls
            projection.weight.data = np.eye(cfg.width) + rng.normal(0.0, init_noise, size=(cfg.width, cfg.width))
            projections.append(projection)
        self.projections = ModuleList(projections)

    def injections(self, text_cls: Tensor) -> dict[int, Tensor]:
        """text_cls [B, d] → {層: L^i(T^cls)}"""
        return {layer: proj(text_cls) for layer, proj in zip(self.window, self.projections, strict=True)}


def encode_visual(
    encoder: VisualEncoder,
    images: np.ndarray,
    navigator: ClsNavigator | None = None,
    text_cls: Tensor | None = None,
) -> EncoderOutput:
    """replace_cls 機構でのエンコード（navigator が None なら素のViT）"""
    if navigator is None:
        return encoder(images)
    if navigator.window and text_cls is None:
        raise ModelConfigError("replace_cls requires a text [CLS] token")
    injections = navigator.injections(text_cls) if navigator.window and text_cls is not None else {}
    return encoder(images, cls_injections=injections)


def attention_mass_in_mask(attention: Tensor | np.ndarray, mask: np.ndarray, patch_size: int) -> float:
    """[CLS] 行の注意のうち、マスク被覆率 > 0.5 のパッチに落ちる割合

    attention は1画像分 [heads, T, T]（ヘッド平均する）または [T, T]。
    T = 1 + プロンプト数 + m のとき、パッチは末尾 m トークン。
    """
    weights = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    if weights.ndim == 3:
        weights = weights.mean(axis=0)
    grid = mask.shape[0] // patch_size
    coverage = einops.reduce(
        np.asarray(mask, dtype=np.float64), "(gh ph) (gw pw) -> (gh gw)", "mean", ph=patch_size, pw=patch_size
    )
    inside = coverage > 0.5
    if not inside.any():
        raise DegenerateInputError("Mask covers no patch; attention mass is undefined", step="attention")

    m = grid * grid
    cls_row = weights[0, -m:]
    total = cls_row.sum()
    return float(cls_row[inside].sum() / total)
