"""セグメンテーション評価指標（IoU / mIoU / FB-IoU）と評価ループ"""
import csv
from collections.abc import Callable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from src.models import EvalReport, SynthSample
from src.utils.error_handler import DegenerateInputError, ShapeMismatchError
from src.utils.logger import get_logger

logger = get_logger(__name__)

# (サンプル列, カテゴリ列) → 二値マスク列
BatchPredictor = Callable[[Sequence[SynthSample], list[int]], list[np.ndarray]]


def _same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"Prediction shape {pred.shape} does not match ground truth {gt.shape}",
            shapes=(pred.shape, gt.shape),
        )


def _ratio(intersection: float, union: float) -> float:
    # 両方空なら 1.0
    return 1.0 if union == 0 else intersection / union


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred ∧ gt| / |pred ∨ gt|"""
    _same_shape(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    return _ratio(float(np.logical_and(pred, gt).sum()), float(np.logical_or(pred, gt).sum()))


def miou(per_class: Mapping[Any, float], classes: Sequence[Any] | None = None) -> float:
    """クラスIoUの非加重平均"""
    classes = list(per_class) if classes is None else list(classes)
    missing = [c for c in classes if c not in per_class]
    if missing:
        raise DegenerateInputError(f"IoU missing for classes {missing}", step="metrics")
    if not classes:
        raise DegenerateInputError("mIoU over an empty class set", step="metrics")
    return float(np.mean([per_class[c] for c in classes]))


def fb_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """前景IoUと背景IoUの平均"""
    _same_shape(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    return 0.5 * (iou(pred, gt) + iou(~pred, ~gt))


class IoUAccumulator:
    """クラス別の交差/和集合画素数を全サンプルで累積する"""

    def __init__(self) -> None:
        self.intersection: dict[int, float] = {}
        self.union: dict[int, float] = {}
        self.foreground = [0.0, 0.0]
        self.background = [0.0, 0.0]
        self.count = 0

    def update(self, category_id: int, pred: np.ndarray, gt: np.ndarray) -> None:
        _same_shape(pred, gt)
        pred, gt = pred.astype(bool), gt.astype(bool)
        self.intersection[category_id] = self.intersection.get(category_id, 0.0) + float((pred & gt).sum())
        self.union[category_id] = self.union.get(category_id, 0.0) + float((pred | gt).sum())
        self.foreground[0] += float((pred & gt).sum())
        self.foreground[1] += float((pred | gt).sum())
        self.background[0] += float((~pred & ~gt).sum())
        self.background[1] += float((~pred | ~gt).sum())
        self.count += 1

    def per_class(self) -> dict[int, float]:
        return {c: _ratio(self.intersection[c], self.union[c]) for c in sorted(self.intersection)}

    def fb_iou(self) -> float:
        return 0.5 * (_ratio(*self.foreground) + _ratio(*self.background))


def evaluate(
    predictor: BatchPredictor,
    queries: Sequence[tuple[SynthSample, int]],
    classes: Sequence[int],
    categories: Sequence[str],
    fold_id: int,
    mechanism: str,
    split: str = "unseen",
    batch_size: int = 64,
    config_hash: str | None = None,
) -> EvalReport:
    """クエリ列を推論して EvalReport を作る"""
    accumulator = IoUAccumulator()
    for start in range(0, len(queries), batch_size):
        chunk = queries[start : start + batch_size]
        samples = [sample for sample, _ in chunk]
        category_ids = [c for _, c in chunk]
        for (sample, category_id), pred in zip(chunk, predictor(samples, category_ids), strict=True):
            accumulator.update(category_id, pred, sample.masks[category_id])

    per_class = accumulator.per_class()
    present = [c for c in classes if c in per_class]
    if len(present) < len(classes):
        logger.warning(
            f"Fold {fold_id} {split}: no queries for classes "
            f"{[categories[c] for c in classes if c not in per_class]}; mIoU over {len(present)} classes"
        )
    return EvalReport(
        per_class_iou={categories[c]: per_class[c] for c in present},
        miou=miou(per_class, present),
        fb_iou=accumulator.fb_iou(),
        sample_count=accumulator.count,
        fold_id=fold_id,
        mechanism=mechanism,
        split=split,
        config_hash=config_hash,
    )


def oracle_predictor(queries: Sequence[tuple[SynthSample, int]]) -> BatchPredictor:
    """正解マスクをそのまま返す予測器（配線検査用）"""
    lookup = {(sample.index, c): sample.masks[c] for sample, c in queries}

    def predict(samples: Sequence[SynthSample], category_ids: list[int]) -> list[np.ndarray]:
        return [
            lookup.get((sample.index, c), np.zeros(sample.image.shape[1:], dtype=bool))
            for sample, c in zip(samples, category_ids, strict=True)
        ]

    return predict


def write_csv(path: str | Path, rows: Sequence[Mapping[str, Any]]) -> Path:
    """行の辞書列をCSVに書き出す（列は最初の行の順）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames: list[str] = []
    for row in rows:
        fieldnames.extend(k for k in row if k not in fieldnames)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(v) for k, v in row.items()})
    return path


def _format(value: Any) -> Any:
    return f"{value:.6f}" if isinstance(value, float) else value


def fold_table(
    reports: Mapping[str, Sequence[EvalReport]],
    config_hash: str,
    arm_hashes: Mapping[str, str] | None = None,
) -> list[dict[str, Any]]:
    """fold 行 × アーム列の表（mean 行つき）

    reports: アーム名 → fold ごとの EvalReport
    arm_hashes: アーム名 → そのアームの設定ハッシュ（指定時は config_hash_<arm> 列を加える）
    """
    folds = sorted({r.fold_id for rs in reports.values() for r in rs})
    arm_columns = {f"config_hash_{arm}": value for arm, value in (arm_hashes or {}).items()}
    rows: list[dict[str, Any]] = []
    for fold_id in folds:
        row: dict[str, Any] = {"fold": str(fold_id)}
        for arm, arm_reports in reports.items():
            report = next((r for r in arm_reports if r.fold_id == fold_id), None)
            row[f"miou_{arm}"] = report.miou if report else float("nan")
            row[f"fbiou_{arm}"] = report.fb_iou if report else float("nan")
        row["config_hash"] = config_hash
        row.update(arm_columns)
        rows.append(row)

    if rows:
        mean_row: dict[str, Any] = {"fold": "mean"}
        for key in rows[0]:
            if key.startswith(("miou_", "fbiou_")):
                mean_row[key] = float(np.nanmean([row[key] for row in rows]))
        mean_row["config_hash"] = config_hash
        mean_row.update(arm_columns)
        rows.append(mean_row)
    return rows
