"""学習・評価用のクエリサンプラ"""
from collections import defaultdict
from collections.abc import Iterator

import numpy as np
from pydantic import Field

from src.models import ArrayModel, FoldSplit, SynthSample
from src.utils.error_handler import ModelConfigError, ProtocolViolationError
from src.utils.logger import get_logger

logger = get_logger(__name__)


class QueryBatch(ArrayModel):
    """(画像, カテゴリ) クエリのバッチ"""

    images: np.ndarray = Field(..., description="[B, 3, H, W]")
    category_ids: list[int]
    targets: np.ndarray = Field(..., description="[B, H, W] 0/1")
    sample_indices: list[int] = Field(default_factory=list)


class FoldQuerySampler:
    """fold の seen カテゴリだけを問い合わせる学習ストリーム

    unseen カテゴリを1つでも含む画像は除外する（厳密な帰納設定）。
    yield したクエリは audit_log に記録され、unseen クエリは ProtocolViolationError。
    """

    def __init__(
        self,
        samples: list[SynthSample],
        fold: FoldSplit,
        batch_size: int,
        rng: np.random.Generator,
    ):
        self.fold = fold
        self.batch_size = batch_size
        self.rng = rng
        self.unseen = set(fold.unseen)
        self.samples = [s for s in samples if not s.categories & self.unseen]
        self.audit_log: list[tuple[int, int]] = []
        if not self.samples:
            raise ModelConfigError(f"Fold {fold.fold_id} has no training image free of unseen categories")
        skipped = len(samples) - len(self.samples)
        if skipped:
            logger.debug(f"Fold {fold.fold_id}: excluded {skipped} images containing unseen categories")

    def __len__(self) -> int:
        """1 epoch のバッチ数"""
        return -(-len(self.samples) // self.batch_size)

    def _query(self, sample: SynthSample) -> int:
        present = sorted(sample.categories)
        return int(present[self.rng.integers(0, len(present))])

    def epoch(self) -> Iterator[QueryBatch]:
        """シャッフルした1 epoch 分のバッチ"""
        order = self.rng.permutation(len(self.samples))
        for start in range(0, len(order), self.batch_size):
            chosen = [self.samples[i] for i in order[start : start + self.batch_size]]
            category_ids = [self._query(sample) for sample in chosen]
            for sample, category_id in zip(chosen, category_ids, strict=True):
                if category_id in self.unseen:
                    raise ProtocolViolationError(
                        f"Unseen category {category_id} queried in fold {self.fold.fold_id} training stream"
                    )
                self.audit_log.append((sample.index, category_id))
            yield QueryBatch(
                images=np.stack([s.image for s in chosen]),
                category_ids=category_ids,
                targets=np.stack([s.masks[c] for s, c in zip(chosen, category_ids, strict=True)]).astype(
                    np.float64
                ),
                sample_indices=[s.index for s in chosen],
            )


def evaluation_queries(samples: list[SynthSample], categories: list[int]) -> list[tuple[SynthSample, int]]:
    """指定カテゴリのうち画像に存在するものだけをクエリにする"""
    wanted = set(categories)
    return [(sample, c) for sample in samples for c in sorted(sample.categories & wanted)]


def single_object_samples(samples: list[SynthSample]) -> list[SynthSample]:
    """物体がちょうど1つの画像（対照事前学習の正例）"""
    return [s for s in samples if len(s.objects) == 1]


def contrastive_batches(
    samples: list[SynthSample], batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, list[int]]]:
    """カテゴリが重複しないバッチ（画像 [B, 3, H, W], カテゴリ列）

    カテゴリごとにシャッフルした列をラウンドロビンで消費する。大きさ1のバッチは捨てる。
    """
    by_category: dict[int, list[SynthSample]] = defaultdict(list)
    for sample in single_object_samples(samples):
        by_category[sample.objects[0].category_id].append(sample)
    queues = {c: [items[i] for i in rng.permutation(len(items))] for c, items in sorted(by_category.items())}

    depth = max((len(q) for q in queues.values()), default=0)
    for round_index in range(depth):
        available = [c for c, queue in queues.items() if round_index < len(queue)]
        available = [available[i] for i in rng.permutation(len(available))]
        for start in range(0, len(available), batch_size):
            group = available[start : start + batch_size]
            if len(group) < 2:
                continue
            yield np.stack([queues[c][round_index].image for c in group]), group
