"""テンソルのバイナリ直列化

レコード形式（リトルエンディアン）: u32 rank, u64 extents × rank, f64 payload。
オフセットは呼び出し側のJSONマニフェストに記録する。
"""
import struct
from pathlib import Path

import numpy as np

from src.models import TensorEntry
from src.utils.error_handler import CheckpointError


def encode_tensor(array: np.ndarray) -> bytes:
    """1テンソルをレコードに変換"""
    array = np.asarray(array, dtype=np.float64)
    header = struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array).astype("<f8").tobytes()


def decode_tensor(buffer: bytes, offset: int) -> tuple[np.ndarray, int]:
    """offset位置のレコードを読み出し、(配列, 次のoffset) を返す"""
    try:
        (rank,) = struct.unpack_from("<I", buffer, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", buffer, offset)
        offset += 8 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(buffer, dtype="<f8", count=count, offset=offset)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"Truncated tensor record at offset {offset}: {e}") from e
    offset += 8 * count
    return payload.astype(np.float64).reshape(shape), offset


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> dict[str, TensorEntry]:
    """名前順にテンソルを書き出し、名前→位置の表を返す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries: dict[str, TensorEntry] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        record = encode_tensor(tensors[name])
        entries[name] = TensorEntry(
            offset=offset, nbytes=len(record), shape=list(np.shape(tensors[name]))
        )
        chunks.append(record)
        offset += len(record)

    path.write_bytes(b"".join(chunks))
    return entries


def read_tensors(path: str | Path, entries: dict[str, TensorEntry]) -> dict[str, np.ndarray]:
    """位置表に従ってテンソルを読み出す"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Tensor file not found: {path}", path=str(path))

    buffer = path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for name, entry in entries.items():
        array, end = decode_tensor(buffer, entry.offset)
        if list(array.shape) != entry.shape or end - entry.offset != entry.nbytes:
            raise CheckpointError(
                f"Tensor '{name}' in {path} does not match its manifest entry", path=str(path)
            )
        tensors[name] = array
    return tensors
