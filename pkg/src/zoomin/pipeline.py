"""ズームイン: 領域ごとのセグメンテーションと OR 集約"""
from collections.abc import Callable, Sequence

import numpy as np
from PIL import Image

from src.data.synth import BACKGROUND_LEVEL
from src.models import RegionSet
from src.utils.error_handler import DegenerateInputError
from src.zoomin.proposals import Box, filter_regions

# (画像 [3, S, S], カテゴリ) → 二値マスク [S, S]
Predictor = Callable[[np.ndarray, int], np.ndarray]

MIN_REGION_SIDE = 2


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """[3, h, w] をバイリニアで [3, size, size] に（同サイズなら無変換）"""
    if image.shape[1:] == (size, size):
        return image
    pixels = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    resized = Image.fromarray(pixels).resize((size, size), Image.Resampling.BILINEAR)
    return np.transpose(np.asarray(resized), (2, 0, 1)).astype(np.float64) / 255.0


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """二値マスクを最近傍で (height, width) に"""
    if mask.shape == (height, width):
        return mask.astype(bool)
    resized = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).resize(
        (width, height), Image.Resampling.NEAREST
    )
    return np.asarray(resized) > 127


def crop_to_square(image: np.ndarray, bbox: Box) -> np.ndarray:
    """bbox を切り出し、右下を背景色で埋めて正方形にする"""
    x0, y0, x1, y1 = bbox
    crop = image[:, y0:y1, x0:x1]
    side = max(crop.shape[1], crop.shape[2])
    square = np.full((3, side, side), BACKGROUND_LEVEL)
    square[:, : crop.shape[1], : crop.shape[2]] = crop
    return square


def segment_region(
    image: np.ndarray, bbox: Box, category_id: int, predictor: Predictor, image_size: int
) -> np.ndarray:
    """bbox 内を拡大して推論し、bbox ローカル座標のマスク [y1-y0, x1-x0] を返す"""
    x0, y0, x1, y1 = bbox
    height, width = y1 - y0, x1 - x0
    if height < MIN_REGION_SIDE or width < MIN_REGION_SIDE:
        raise DegenerateInputError(f"Region {bbox} is smaller than {MIN_REGION_SIDE}px", step="zoomin")
    if x0 < 0 or y0 < 0 or x1 > image.shape[2] or y1 > image.shape[1]:
        raise DegenerateInputError(f"Region {bbox} exceeds the image bounds", step="zoomin")

    square = crop_to_square(image, bbox)
    side = square.shape[1]
    prediction = predictor(resize_image(square, image_size), category_id)
    restored = resize_mask(prediction, side, side)
    return restored[:height, :width]


def aggregate_masks(region_masks: Sequence[tuple[Box, np.ndarray]], image_size: int) -> np.ndarray:
    """領域マスクの和集合（bbox 外は背景）"""
    canvas = np.zeros((image_size, image_size), dtype=bool)
    for (x0, y0, x1, y1), mask in region_masks:
        canvas[y0:y1, x0:x1] |= mask.astype(bool)
    return canvas


def boxes_as_masks(bboxes: Sequence[Box], image_size: int) -> np.ndarray:
    """候補矩形そのものをマスクとみなす（検出器のみのベースライン）"""
    return aggregate_masks(
        [(box, np.ones((box[3] - box[1], box[2] - box[0]), dtype=bool)) for box in bboxes],
        image_size,
    )


def zoom_in_segment(
    image: np.ndarray,
    regions: RegionSet,
    category_id: int,
    predictor: Predictor,
    image_size: int,
) -> np.ndarray:
    """候補のフィルタ → 領域ごとの推論 → OR 集約"""
    region_masks = []
    for bbox in filter_regions(regions, category_id):
        x0, y0, x1, y1 = bbox
        if x1 - x0 < MIN_REGION_SIDE or y1 - y0 < MIN_REGION_SIDE:
            # 小さすぎる候補は矩形のまま採用
            region_masks.append((bbox, np.ones((y1 - y0, x1 - x0), dtype=bool)))
            continue
        region_masks.append((bbox, segment_region(image, bbox, category_id, predictor, image_size)))
    return aggregate_masks(region_masks, image_size)
