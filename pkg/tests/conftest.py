"""共通テスト設定とフィクスチャ"""
import copy
import os
from collections.abc import Generator
from datetime import datetime
from typing import Any

import numpy as np
import pytest
from freezegun import freeze_time

from src.config import ExperimentConfig
from src.data.synth import SynthCorpus, generate_corpus
from src.model.text_encoder import Vocabulary

# テスト用の固定時刻（JST 08:00）
TEST_DATETIME = datetime(2025, 7, 9, 8, 0, 0)

# 数秒で回る最小構成（16px 画像、2×2 パッチ、4層）
TINY_CONFIG: dict[str, Any] = {
    "seed": 7,
    "fold": 0,
    "synth": {
        "image_size": 16,
        "category_count": 8,
        "n_folds": 4,
        "min_objects": 1,
        "max_objects": 2,
        "noise_level": 0.02,
        "train_size": 24,
        "eval_size": 12,
        "tiny_eval_size": 8,
    },
    "text": {"n_layers": 1, "n_heads": 2},
    "visual": {
        "image_size": 16,
        "patch_size": 8,
        "n_layers": 4,
        "width": 16,
        "n_heads": 2,
        "mlp_ratio": 2,
        "embed_dim": 8,
        "replace_window": [1, 3],
        "mechanism": "replace_cls",
        "vpt_prompt_count": 2,
        "decoder_layers": 1,
    },
    "pretrain": {"stage": "pretrain", "epochs": 2, "batch_size": 4, "restart_period": 1, "eval_every": 1},
    "segment": {"stage": "segment", "epochs": 2, "batch_size": 4, "restart_period": 1, "eval_every": 1},
}


@pytest.fixture
def mock_env_vars() -> Generator[dict[str, str], None, None]:
    """テスト用環境変数を設定"""
    test_env = {
        "ENVIRONMENT": "test",
        "LOG_LEVEL": "DEBUG",
        "TIMEZONE": "Asia/Tokyo",
        "ROOT_SEED": "7",
    }

    original_env = {}
    for key, value in test_env.items():
        original_env[key] = os.getenv(key)
        os.environ[key] = value

    yield test_env

    # 環境変数を元に戻す
    for key, original_value in original_env.items():
        if original_value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = original_value


@pytest.fixture
def frozen_time() -> Generator[None, None, None]:
    """時刻をJST 08:00に固定"""
    with freeze_time(TEST_DATETIME):
        yield


@pytest.fixture
def tiny_config_dict() -> dict[str, Any]:
    """最小構成の設定ドキュメント（書き換え可能なコピー）"""
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_dict: dict[str, Any]) -> ExperimentConfig:
    """最小構成の ExperimentConfig"""
    return ExperimentConfig.model_validate(tiny_config_dict)


@pytest.fixture
def rng() -> np.random.Generator:
    """固定シードの乱数生成器"""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus() -> SynthCorpus:
    """最小構成の合成コーパス（セッション内で共有）"""
    config = ExperimentConfig.model_validate(TINY_CONFIG)
    return generate_corpus(config.synth, config.seed)


@pytest.fixture
def vocabulary(tiny_corpus: SynthCorpus) -> Vocabulary:
    """8カテゴリ語彙"""
    return Vocabulary(tiny_corpus.categories)
