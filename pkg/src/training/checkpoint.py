"""チェックポイント（テンソルバイナリ + JSONマニフェスト）"""
import json
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import ValidationError

from src.models import CheckpointMeta
from src.nn.module import Module
from src.tensor.serialization import read_tensors, write_tensors
from src.utils.error_handler import ArtifactNotFoundError, CheckpointError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TENSOR_FILE = "tensors.bin"
META_FILE = "checkpoint.json"


def save_checkpoint(
    directory: str | Path,
    model: Module,
    stage: Literal["pretrain", "segment"],
    config: dict[str, Any],
    frozen: list[str] | None = None,
    metrics: dict[str, Any] | None = None,
    provenance: dict[str, Any] | None = None,
) -> Path:
    """モデルの全パラメータを書き出す（タイムスタンプは含めない）"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = write_tensors(directory / TENSOR_FILE, model.state_dict())
    meta = CheckpointMeta(
        stage=stage,
        config=config,
        tensors=entries,
        frozen=sorted(frozen or []),
        metrics=metrics or {},
        provenance=provenance or {},
    )
    meta_path = directory / META_FILE
    meta_path.write_text(
        json.dumps(meta.model_dump(mode="json"), sort_keys=True, indent=2), encoding="utf-8"
    )
    logger.info(f"Checkpoint ({stage}) written to {directory} ({len(entries)} tensors)")
    return meta_path


def load_checkpoint(directory: str | Path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    """(メタ情報, 名前→配列)"""
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise ArtifactNotFoundError(f"Checkpoint not found: {meta_path}", path=str(meta_path))
    try:
        meta = CheckpointMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(f"Malformed checkpoint manifest {meta_path}: {e}", path=str(meta_path)) from e
    return meta, read_tensors(directory / TENSOR_FILE, meta.tensors)
