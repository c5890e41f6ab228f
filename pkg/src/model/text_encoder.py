"""テキストエンコーダ（カテゴリ語 → テキスト側 [CLS] トークン）"""
import json
from pathlib import Path

import numpy as np
from pydantic import Field, model_validator

from src.config import TextConfig, VisualConfig
from src.models import ArrayModel
from src.nn.layers import LayerNorm, Linear, build_blocks
from src.nn.module import Module, Parameter
from src.tensor import functional as F
from src.tensor.core import Tensor
from src.utils.error_handler import DatasetFormatError, ModelConfigError, OutOfVocabularyError
from src.utils.logger import get_logger

logger = get_logger(__name__)

PROMPT_TEMPLATE = ("a", "photo", "of")


class Vocabulary:
    """カテゴリ語彙

    カテゴリ語は 0..C-1、テンプレート語はその後ろに続く。
    """

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise DatasetFormatError("Vocabulary words must be unique")
        self.words = list(words)
        self.template_words = [w for w in dict.fromkeys(PROMPT_TEMPLATE) if w not in words]
        self._ids = {word: i for i, word in enumerate(self.words + self.template_words)}

    def __len__(self) -> int:
        """カテゴリ語の数"""
        return len(self.words)

    @property
    def size(self) -> int:
        """テンプレート語を含む全トークン数"""
        return len(self._ids)

    def lookup(self, word: str) -> int:
        if word not in self._ids:
            raise OutOfVocabularyError(f"Word '{word}' is not in the vocabulary")
        return self._ids[word]

    def word(self, category_id: int) -> str:
        return self.words[category_id]

    def prompt_ids(self, category_id: int, use_template: bool = True) -> list[int]:
        """カテゴリのトークン列（テンプレート付きなら 'a photo of <word>'）"""
        if not 0 <= category_id < len(self.words):
            raise OutOfVocabularyError(f"Category id {category_id} is not in the vocabulary")
        prefix = [self._ids[w] for w in PROMPT_TEMPLATE] if use_template else []
        return prefix + [category_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.words, ensure_ascii=False, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            words = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"Cannot read vocabulary file {path}: {e}", path=str(path)) from e
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise DatasetFormatError(f"Vocabulary file {path} must be a JSON list of words", path=str(path))
        return cls(words)


class TextCls(ArrayModel):
    """カテゴリの [CLS] トークン"""

    vector: Tensor
    category_id: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _one_dimensional(self) -> "TextCls":
        if self.vector.ndim != 1:
            raise ValueError(f"TextCls vector must be 1-d, got {self.vector.shape}")
        return self


class TextEncoder(Module):
    """[CLS] + 語埋め込み + 位置埋め込みの標準Transformer"""

    def __init__(
        self,
        vocabulary: Vocabulary,
        text_cfg: TextConfig,
        visual_cfg: VisualConfig,
        rng: np.random.Generator,
    ):
        width = visual_cfg.width
        if text_cfg.cls_source == "post_projection" and visual_cfg.embed_dim != width:
            raise ModelConfigError(
                "post_projection text [CLS] requires embed_dim == width "
                f"({visual_cfg.embed_dim} != {width})"
            )
        if width % text_cfg.n_heads != 0:
            raise ModelConfigError("width must be divisible by text n_heads")

        self.vocabulary = vocabulary
        self.cfg = text_cfg
        max_len = len(PROMPT_TEMPLATE) + 1

        self.token_embedding = Parameter(rng.normal(0.0, 0.02, size=(vocabulary.size, width)))
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(width,)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.01, size=(max_len + 1, width)))
        self.blocks = build_blocks(text_cfg.n_layers, width, text_cfg.n_heads, visual_cfg.mlp_ratio, rng)
        self.ln_final = LayerNorm(width)
        self.projection = Linear(width, visual_cfg.embed_dim, rng, bias=False)

    def _cls_states(self, token_ids: np.ndarray) -> Tensor:
        """token_ids [B, L] → 最終層 [CLS] 状態 [B, d]"""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim != 2:
            raise ModelConfigError(f"token_ids must be [batch, length], got {token_ids.shape}")
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.vocabulary.size):
            raise OutOfVocabularyError(
                f"Token id out of vocabulary range [0, {self.vocabulary.size})"
            )
        batch, length = token_ids.shape
        words = F.embedding(self.token_embedding, token_ids)
        cls = F.repeat(self.cls_token, "d -> b 1 d", b=batch)
        x = F.concat([cls, words], axis=1)
        positions = F.slice_tokens(self.pos_embed, 0, length + 1, axis=0)
        x = F.add(x, F.repeat(positions, "t d -> b t d", b=batch))
        for block in self.blocks:
            x, _ = block(x)
        x = self.ln_final(x)
        return F.rearrange(F.slice_tokens(x, 0, 1, axis=1), "b 1 d -> b d")

    def _batch_ids(self, category_ids: list[int]) -> np.ndarray:
        return np.array(
            [self.vocabulary.prompt_ids(c, self.cfg.use_template) for c in category_ids],
            dtype=np.int64,
        )

    def encode_categories(self, category_ids: list[int]) -> Tensor:
        """カテゴリ列の [CLS] トークン [B, d]（cls_source に従う）"""
        states = self._cls_states(self._batch_ids(category_ids))
        if self.cfg.cls_source == "post_projection":
            return self.projection(states)
        return states

    def encode_text(self, word_ids: list[int], category_id: int) -> TextCls:
        """トークン列1本から TextCls を作る"""
        states = self._cls_states(np.asarray([word_ids], dtype=np.int64))
        if self.cfg.cls_source == "post_projection":
            states = self.projection(states)
        return TextCls(vector=F.rearrange(states, "1 d -> d"), category_id=category_id)

    def encode_category(self, category_id: int) -> TextCls:
        return self.encode_text(self.vocabulary.prompt_ids(category_id, self.cfg.use_template), category_id)

    def embed_text(self, category_ids: list[int]) -> Tensor:
        """対照学習用のL2正規化埋め込み [B, d']"""
        states = self._cls_states(self._batch_ids(category_ids))
        return F.l2_normalize(self.projection(states))
