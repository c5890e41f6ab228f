"""データモデル定義（pydantic v2対応）"""
from datetime import datetime, timezone
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

UTC = timezone.utc

ProposalSource = Literal["oracle", "oracle_jittered", "blob"]


def _utcnow() -> datetime:
    return datetime.now(UTC)


class BaseAppModel(BaseModel):
    """アプリケーション共通のベースモデル"""

    model_config = ConfigDict(from_attributes=True)


class ArrayModel(BaseModel):
    """numpy配列を保持するモデル"""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class ObjectParams(BaseAppModel):
    """合成物体1個の生成パラメータ"""

    category_id: int = Field(..., ge=0)
    x0: int = Field(..., ge=0)
    y0: int = Field(..., ge=0)
    size: int = Field(..., ge=1, description="外接正方形の一辺（px）")
    texture_phase: int = Field(default=0, ge=0)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x0 + self.size, self.y0 + self.size)


class SynthSample(ArrayModel):
    """合成サンプル（画像・カテゴリ別マスク・存在カテゴリ）"""

    index: int = 0
    image: np.ndarray = Field(..., description="3×H×W, [0,1]")
    masks: dict[int, np.ndarray] = Field(default_factory=dict, description="category_id -> H×W bool")
    objects: list[ObjectParams] = Field(default_factory=list)
    seed: int = 0

    @property
    def categories(self) -> set[int]:
        return set(self.masks)

    @property
    def image_size(self) -> int:
        return int(self.image.shape[-1])


class FoldSplit(BaseAppModel):
    """seen / unseen カテゴリ分割"""

    fold_id: int = Field(..., ge=0)
    seen: list[int]
    unseen: list[int]

    @model_validator(mode="after")
    def _disjoint(self) -> "FoldSplit":
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen categories must not intersect")
        return self


class SampleRecord(BaseAppModel):
    """マニフェスト内のサンプル記録"""

    index: int
    seed: int
    image_file: str
    mask_files: dict[str, str] = Field(default_factory=dict, description="category word -> path")
    objects: list[ObjectParams] = Field(default_factory=list)


class CorpusManifest(BaseAppModel):
    """コーパスマニフェスト（manifest.json）"""

    spec: dict[str, Any]
    categories: list[str]
    hue_map: dict[str, list[int]]
    folds: list[FoldSplit]
    splits: dict[str, list[SampleRecord]] = Field(default_factory=dict)


class RegionProposal(BaseAppModel):
    """領域候補（半開区間のbbox・カテゴリ・スコア）"""

    bbox: tuple[int, int, int, int]
    category_id: int = Field(..., ge=0)
    score: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> "RegionProposal":
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 and 0 <= y0 < y1):
            raise ValueError(f"invalid bbox {self.bbox}")
        return self

    def fits(self, width: int, height: int) -> bool:
        """画像範囲内かどうか"""
        _, _, x1, y1 = self.bbox
        return x1 <= width and y1 <= height


class RegionSet(BaseAppModel):
    """領域候補集合"""

    proposals: list[RegionProposal] = Field(default_factory=list)
    source: ProposalSource

    def to_json_dict(self, vocabulary: list[str]) -> dict[str, Any]:
        """JSONシリアライズ（カテゴリはword表記）"""
        return {
            "source": self.source,
            "proposals": [
                {
                    "bbox": list(p.bbox),
                    "category": vocabulary[p.category_id],
                    "score": p.score,
                }
                for p in self.proposals
            ],
        }


class EvalReport(BaseAppModel):
    """評価レポート"""

    per_class_iou: dict[str, float] = Field(default_factory=dict)
    miou: float = Field(..., ge=0.0, le=1.0)
    fb_iou: float = Field(..., ge=0.0, le=1.0)
    sample_count: int = Field(..., ge=0)
    fold_id: int = Field(..., ge=0)
    mechanism: str
    split: str = "unseen"
    config_hash: str | None = None

    @model_validator(mode="after")
    def _range(self) -> "EvalReport":
        for name, value in self.per_class_iou.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"IoU out of range for {name}: {value}")
        return self


class TensorEntry(BaseAppModel):
    """チェックポイント内テンソルの位置"""

    offset: int = Field(..., ge=0)
    nbytes: int = Field(..., ge=0)
    shape: list[int]


class CheckpointMeta(BaseAppModel):
    """チェックポイントのJSONマニフェスト"""

    stage: Literal["pretrain", "segment"]
    config: dict[str, Any]
    tensors: dict[str, TensorEntry] = Field(default_factory=dict)
    frozen: list[str] = Field(default_factory=list)
    metrics: dict[str, Any] = Field(default_factory=dict)
    provenance: dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseAppModel):
    """CLI実行記録（設定スナップショット・シード・入力ハッシュ）"""

    command: str
    seed: int
    config_hash: str
    config: dict[str, Any]
    input_hashes: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)


class ProcessingError(BaseAppModel):
    """処理エラー情報"""

    step: str
    error_type: str
    message: str
    timestamp: datetime = Field(default_factory=_utcnow)
    run_id: str | None = None
    stack_trace: str | None = None
