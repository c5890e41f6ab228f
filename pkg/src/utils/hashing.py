"""コンテンツハッシュ"""
import hashlib
import json
from pathlib import Path
from typing import Any

from pydantic import BaseModel


def git_blob_hash(content: bytes) -> str:
    """git形式のblobハッシュ（sha1("blob <len>\\0" + content)）"""
    header = f"blob {len(content)}\0".encode()
    return hashlib.sha1(header + content).hexdigest()


def canonical_json(data: Any) -> bytes:
    """キー順固定のJSONバイト列"""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(config: Any) -> str:
    """設定のハッシュ（短縮形）"""
    return git_blob_hash(canonical_json(config))[:12]


def file_hash(path: str | Path) -> str:
    """ファイル内容のハッシュ"""
    return git_blob_hash(Path(path).read_bytes())


def tree_hash(paths: list[Path]) -> str:
    """複数ファイルの内容ハッシュ（パス順で結合）"""
    entries = [f"{path.name}:{file_hash(path)}" for path in sorted(paths)]
    return git_blob_hash("\n".join(entries).encode("utf-8"))
