"""乱数シード管理

全ての乱数は設定のルートシードから決定的に派生させる。
"""
import hashlib

import numpy as np


def _label_entropy(label: str | int) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root: int, *labels: str | int) -> int:
    """ルートシードとラベル列から派生シードを作る"""
    sequence = np.random.SeedSequence([root, *(_label_entropy(label) for label in labels)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_rng(root: int, *labels: str | int) -> np.random.Generator:
    """派生シードのGeneratorを作る"""
    return np.random.default_rng(derive_seed(root, *labels))
