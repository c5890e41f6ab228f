"""ゼロショットセグメンタ（テキスト/ビジュアルエンコーダ + 条件付け機構 + デコーダ）"""
import numpy as np

from src.config import ExperimentConfig
from src.model.decoder import MaskDecoder, binarize
from src.model.mechanisms import ChannelAttention, SpatialAttention, VisualPromptTuning
from src.model.text_encoder import TextEncoder, Vocabulary
from src.model.visual_encoder import ClsNavigator, EncoderOutput, VisualEncoder, encode_visual
from src.nn.module import Module
from src.tensor.core import Tensor
from src.utils.error_handler import ModelConfigError
from src.utils.logger import get_logger
from src.utils.seeding import make_rng

logger = get_logger(__name__)


class DualEncoder(Module):
    """対照事前学習で学習するテキスト/ビジュアルエンコーダの組"""

    def __init__(self, config: ExperimentConfig, vocabulary: Vocabulary):
        self.config = config
        self.vocabulary = vocabulary
        self.text_encoder = TextEncoder(
            vocabulary, config.text, config.visual, make_rng(config.seed, "init", "text_encoder")
        )
        self.visual_encoder = VisualEncoder(config.visual, make_rng(config.seed, "init", "visual_encoder"))

    def image_embeddings(self, images: np.ndarray) -> Tensor:
        """画像のL2正規化埋め込み [B, d']"""
        output = self.visual_encoder(images)
        return self.visual_encoder.embed_head(output.cls_out)

    def text_embeddings(self, category_ids: list[int]) -> Tensor:
        return self.text_encoder.embed_text(category_ids)


class ClsSegmenter(Module):
    """(画像, カテゴリ) クエリ → 前景ロジット"""

    def __init__(self, config: ExperimentConfig, vocabulary: Vocabulary):
        self.config = config
        visual = config.visual
        self.text_encoder = TextEncoder(
            vocabulary, config.text, visual, make_rng(config.seed, "init", "text_encoder")
        )
        self.visual_encoder = VisualEncoder(visual, make_rng(config.seed, "init", "visual_encoder"))

        mechanism_rng = make_rng(config.seed, "init", "mechanism", visual.mechanism)
        self.navigator = ClsNavigator(visual, mechanism_rng) if visual.mechanism == "replace_cls" else None
        self.channel_attention = (
            ChannelAttention(visual.width, mechanism_rng) if visual.mechanism == "channel_attention" else None
        )
        self.spatial_attention = (
            SpatialAttention(visual.width, mechanism_rng) if visual.mechanism == "spatial_attention" else None
        )
        self.prompt_tuning = VisualPromptTuning(visual, mechanism_rng) if visual.mechanism == "vpt" else None
        self.decoder = MaskDecoder(visual, make_rng(config.seed, "init", "decoder"))

        logger.debug(
            f"ClsSegmenter built: mechanism={visual.mechanism}, window={visual.window_layers}, "
            f"parameters={self.num_parameters()}"
        )

    @property
    def mechanism(self) -> str:
        return self.config.visual.mechanism

    @property
    def vocabulary(self) -> Vocabulary:
        return self.text_encoder.vocabulary

    def load_pretrained(self, state: dict[str, np.ndarray]) -> None:
        """事前学習済みエンコーダの重みを読み込む（DualEncoder の state_dict）"""
        own = {name for name, _ in self.named_parameters()}
        missing = sorted(
            name for name in own if name.startswith(("text_encoder.", "visual_encoder.")) and name not in state
        )
        if missing:
            raise ModelConfigError(f"Pretrained checkpoint is missing encoder tensors: {missing[:5]}")
        self.load_state_dict({name: value for name, value in state.items() if name in own}, strict=False)

    def freeze_backbone(self) -> list[str]:
        """エンコーダを凍結し、凍結したパラメータ名を返す"""
        self.text_encoder.freeze()
        self.visual_encoder.freeze()
        return [name for name, p in self.named_parameters() if not p.requires_grad]

    def encode(
        self, images: np.ndarray, category_ids: list[int], navigate: bool = True
    ) -> tuple[EncoderOutput, Tensor]:
        """機構を適用したエンコード

        Returns:
            tuple: (エンコーダ出力, デコーダ入力の E_N)
        """
        if images.ndim == 3:
            images = images[None]
        if len(category_ids) != images.shape[0]:
            raise ModelConfigError(
                f"Got {images.shape[0]} images but {len(category_ids)} category queries"
            )
        if not navigate or self.mechanism == "none":
            output = self.visual_encoder(images)
            return output, output.patch_tokens

        text_cls = self.text_encoder.encode_categories(category_ids)
        if self.navigator is not None:
            output = encode_visual(self.visual_encoder, images, self.navigator, text_cls)
            return output, output.patch_tokens
        if self.prompt_tuning is not None:
            output = self.visual_encoder(images, deep_prompts=self.prompt_tuning.deep_prompts(text_cls))
            return output, output.patch_tokens

        output = self.visual_encoder(images)
        if self.channel_attention is not None:
            return output, self.channel_attention(output.patch_tokens, text_cls)
        if self.spatial_attention is not None:
            return output, self.spatial_attention(output.patch_tokens, text_cls)
        raise ModelConfigError(f"Mechanism '{self.mechanism}' has no module")

    def __call__(self, images: np.ndarray, category_ids: list[int]) -> Tensor:
        """ロジット [B, H, W]"""
        _, patch_tokens = self.encode(images, category_ids)
        return self.decoder(patch_tokens, self.visual_encoder.pos_embed)

    def predict_masks(self, images: np.ndarray, category_ids: list[int]) -> list[np.ndarray]:
        """二値マスク（ロジット > 0）"""
        _, patch_tokens = self.encode(images, category_ids)
        return [binarize(m) for m in self.decoder.decode_mask(patch_tokens, self.visual_encoder.pos_embed)]


def build_segmenter(
    config: ExperimentConfig,
    vocabulary: Vocabulary,
    pretrained: dict[str, np.ndarray] | None = None,
) -> ClsSegmenter:
    """セグメンタを構築し、事前学習済み重みがあれば読み込む"""
    if config.mechanism == "replace_cls" and not config.visual.window_layers:
        raise ModelConfigError("replace_cls requires a non-empty replacement window")
    segmenter = ClsSegmenter(config, vocabulary)
    if pretrained is not None:
        segmenter.load_pretrained(pretrained)
    return segmenter
