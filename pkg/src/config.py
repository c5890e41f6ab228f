"""設定管理"""

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings

Mechanism = Literal[
    "replace_cls", "channel_attention", "spatial_attention", "vpt", "none"
]
ClsSource = Literal["pre_projection", "post_projection"]
ZoominMode = Literal["plain", "oracle", "oracle_jittered", "blob"]

# 合成コーパスの基本形状（8カテゴリ）
BASE_SHAPES = [
    "circle",
    "square",
    "triangle",
    "ring",
    "cross",
    "bar",
    "diamond",
    "dot_cluster",
]


class StrictModel(BaseModel):
    """未知キーを拒否する設定ベースモデル"""

    model_config = ConfigDict(extra="forbid")


class SynthConfig(StrictModel):
    """合成データ設定（SynthSpec）"""

    image_size: int = Field(default=32, ge=8, description="画像サイズ（正方形）")
    category_count: Literal[8, 16] = Field(default=8, description="カテゴリ数")
    n_folds: int = Field(default=4, ge=1, description="fold数")
    min_objects: int = Field(default=1, ge=1)
    max_objects: int = Field(default=3, ge=1)
    tiny_objects: bool = Field(default=False, description="微小物体フラグ")
    noise_level: float = Field(default=0.05, ge=0.0, le=0.5, description="背景ノイズ")
    train_size: int = Field(default=2000, ge=0)
    eval_size: int = Field(default=400, ge=0)
    tiny_eval_size: int = Field(default=200, ge=0)

    @property
    def categories(self) -> list[str]:
        """カテゴリ名一覧"""
        if self.category_count == 8:
            return list(BASE_SHAPES)
        return [f"{shape}_{family}" for family in ("a", "b") for shape in BASE_SHAPES]

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.category_count < self.n_folds * 2:
            raise ValueError("category_count must be at least 2 * n_folds")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        return self


class TextConfig(StrictModel):
    """テキストエンコーダ設定"""

    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    use_template: bool = Field(default=True, description="'a photo of a <word>' テンプレート")
    cls_source: ClsSource = Field(default="pre_projection")


class VisualConfig(StrictModel):
    """ビジュアルエンコーダ設定"""

    image_size: int = Field(default=32, ge=2)
    patch_size: int = Field(default=8, ge=1)
    n_layers: int = Field(default=12, ge=1)
    width: int = Field(default=64, ge=2, description="共有潜在幅 d")
    n_heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    embed_dim: int = Field(default=64, ge=2, description="対照学習ヘッドの出力幅 d'")
    replace_window: tuple[int, int] = Field(default=(2, 5), description="[N1, N2)")
    replace_layers: list[int] | None = Field(
        default=None, description="置換する層の明示指定（指定時は replace_window より優先）"
    )
    mechanism: Mechanism = Field(default="replace_cls")
    vpt_prompt_count: int = Field(default=8, ge=0, le=50)
    vpt_text_shift: bool = Field(default=False, description="VPT プロンプトにテキスト [CLS] の射影を加える")
    decoder_layers: int = Field(default=2, ge=1)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        """パッチトークン数 m"""
        return self.grid_size**2

    @property
    def window_layers(self) -> list[int]:
        if self.replace_layers is not None:
            return list(self.replace_layers)
        start, stop = self.replace_window
        return list(range(start, stop))

    @property
    def last_window_layer(self) -> int | None:
        """注入が最後に行われる層（N2-1）"""
        layers = self.window_layers
        return layers[-1] if layers else None

    @model_validator(mode="after")
    def _check(self) -> "VisualConfig":
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.width % self.n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        start, stop = self.replace_window
        if start < 0 or stop > self.n_layers or start > stop:
            raise ValueError("replace_window must satisfy 0 <= N1 <= N2 <= n_layers")
        if self.replace_layers is not None:
            if sorted(set(self.replace_layers)) != self.replace_layers:
                raise ValueError("replace_layers must be strictly increasing")
            if any(not 0 <= layer < self.n_layers for layer in self.replace_layers):
                raise ValueError("replace_layers must lie in [0, n_layers)")
        if self.mechanism == "replace_cls" and not self.window_layers:
            raise ValueError("replace_cls requires a non-empty replace_window")
        if self.mechanism == "vpt" and self.vpt_prompt_count <= 0:
            raise ValueError("vpt requires vpt_prompt_count > 0")
        return self


class TrainConfig(StrictModel):
    """学習設定"""

    stage: Literal["pretrain", "segment"] = "segment"
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.001, gt=0.0)
    min_learning_rate: float = Field(default=0.0, ge=0.0)
    restart_period: int = Field(default=50, ge=1, description="warm restart 周期（epoch）")
    restart_mult: int = Field(default=1, ge=1)
    weight_decay: float = Field(default=0.01, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    temperature: float = Field(default=0.07, gt=0.0)
    eval_every: int = Field(default=10, ge=1, description="評価間隔（epoch）")


def default_pretrain_config() -> TrainConfig:
    return TrainConfig(stage="pretrain", epochs=50, batch_size=8)


def default_segment_config() -> TrainConfig:
    return TrainConfig(stage="segment", epochs=200, batch_size=64)


class ZoominConfig(StrictModel):
    """ズームイン設定"""

    mode: ZoominMode = "oracle"
    jitter: float = Field(default=0.2, ge=0.0, le=0.5)
    blob_tolerance: float = Field(default=0.12, gt=0.0)
    min_blob_area: int = Field(default=2, ge=1)


class ExperimentConfig(StrictModel):
    """実験設定（CLIに渡すJSONドキュメント）"""

    seed: int = Field(default=0, ge=0)
    fold: int = Field(default=0, ge=0)
    output_dir: str = Field(default="runs")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    text: TextConfig = Field(default_factory=TextConfig)
    visual: VisualConfig = Field(default_factory=VisualConfig)
    pretrain: TrainConfig = Field(default_factory=default_pretrain_config)
    segment: TrainConfig = Field(default_factory=default_segment_config)
    zoomin: ZoominConfig = Field(default_factory=ZoominConfig)

    @property
    def mechanism(self) -> Mechanism:
        return self.visual.mechanism

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.fold >= self.synth.n_folds:
            raise ValueError("fold must be smaller than synth.n_folds")
        if self.visual.image_size != self.synth.image_size:
            raise ValueError("visual.image_size must equal synth.image_size")
        if self.pretrain.stage != "pretrain" or self.segment.stage != "segment":
            raise ValueError("stage fields must match their section")
        return self

    def with_overrides(self, **updates: Any) -> "ExperimentConfig":
        """一部を書き換えた設定を再検証して返す"""
        data = self.model_dump(mode="json")
        for dotted, value in updates.items():
            target = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                target = target[key]
            target[leaf] = value
        return load_experiment_config(data)


def json_pointer(loc: tuple[int | str, ...]) -> str:
    """pydanticのlocをJSON Pointerに変換"""
    parts = [str(part).replace("~", "~0").replace("/", "~1") for part in loc]
    return "/" + "/".join(parts) if parts else ""


def experiment_schema() -> dict[str, Any]:
    """公開スキーマ"""
    return ExperimentConfig.model_json_schema()


def load_experiment_config(
    source: str | Path | dict[str, Any] | None = None,
) -> ExperimentConfig:
    """実験設定を読み込んで検証"""
    from src.utils.error_handler import ArtifactNotFoundError, ConfigValidationError

    if source is None:
        return ExperimentConfig()

    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if not path.exists():
            raise ArtifactNotFoundError(f"Config file not found: {path}", path=str(path))
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"Config is not valid JSON: {e}", pointer="") from e

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        pointer = json_pointer(tuple(first["loc"]))
        raise ConfigValidationError(
            f"Config schema violation at {pointer or '/'}: {first['msg']}",
            pointer=pointer,
        ) from e


class AppConfig(BaseSettings):
    """アプリケーション設定（環境変数 / .env）"""

    environment: str = Field(default="development")
    log_level: str = Field(default="INFO")
    timezone: str = Field(default="Asia/Tokyo")
    output_dir: str = Field(default="runs")
    root_seed: int = Field(default=0, ge=0)

    # テスト設定
    test_mode: bool = Field(default=False)

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "extra": "ignore",
    }

    def is_production(self) -> bool:
        """本番環境かどうか"""
        return self.environment.lower() == "production"

    def is_development(self) -> bool:
        """開発環境かどうか"""
        return self.environment.lower() == "development"

    def is_test(self) -> bool:
        """テスト環境かどうか"""
        return self.test_mode or self.environment.lower() == "test"


# グローバル設定インスタンス
def _create_config() -> AppConfig:
    """設定インスタンスを作成"""
    return AppConfig()


def get_config() -> AppConfig:
    """設定を取得"""
    return _create_config()


def reload_config() -> AppConfig:
    """設定を再読み込み"""
    return _create_config()
