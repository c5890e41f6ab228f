"""領域候補の生成とカテゴリフィルタ"""
import numpy as np
from scipy import ndimage

from src.config import ZoominConfig
from src.data.synth import render_object
from src.models import ProposalSource, RegionProposal, RegionSet, SynthSample
from src.utils.error_handler import ModelConfigError
from src.utils.logger import get_logger

logger = get_logger(__name__)

Box = tuple[int, int, int, int]


def mask_bbox(mask: np.ndarray) -> Box | None:
    """マスクの外接矩形（半開区間）。空なら None"""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def oracle_regions(sample: SynthSample) -> list[RegionProposal]:
    """正解物体ごとの外接矩形（スコア1.0）"""
    proposals = []
    for obj in sample.objects:
        bbox = mask_bbox(render_object(obj, sample.image_size))
        if bbox is not None:
            proposals.append(RegionProposal(bbox=bbox, category_id=obj.category_id, score=1.0))
    return proposals


def jitter_box(bbox: Box, jitter: float, size: int, rng: np.random.Generator) -> Box:
    """各辺を箱の大きさの ±jitter 倍までずらす（画像内にクリップ）"""
    x0, y0, x1, y1 = bbox
    width, height = x1 - x0, y1 - y0
    offsets = rng.uniform(-jitter, jitter, size=4) * np.array([width, height, width, height])
    nx0, ny0, nx1, ny1 = (int(round(v)) for v in np.array(bbox) + offsets)
    nx0, ny0 = max(0, nx0), max(0, ny0)
    nx1, ny1 = min(size, nx1), min(size, ny1)
    if nx1 - nx0 < 1 or ny1 - ny0 < 1:
        return bbox
    return nx0, ny0, nx1, ny1


def _chromaticity(pixels: np.ndarray) -> np.ndarray:
    """[3, ...] → 明度に依存しない色度（和で正規化）"""
    total = pixels.sum(axis=0, keepdims=True)
    return pixels / np.maximum(total, 1e-9)


def blob_regions(
    sample: SynthSample,
    hue_map: dict[str, list[int]],
    categories: list[str],
    cfg: ZoominConfig,
) -> list[RegionProposal]:
    """色度しきい値 + 連結成分によるブロブ検出

    各画素を色度が最も近いカテゴリ色に割り当て（距離 < blob_tolerance）、カテゴリごとに
    ラベリングした連結成分を候補にする。
    """
    chroma = _chromaticity(sample.image)
    references = _chromaticity(
        np.array([hue_map[word] for word in categories], dtype=np.float64).T / 255.0
    )
    distance = np.linalg.norm(chroma[:, None] - references[:, :, None, None], axis=0)
    nearest = distance.argmin(axis=0)
    nearest_distance = distance.min(axis=0)
    assigned = np.where(nearest_distance < cfg.blob_tolerance, nearest, -1)

    proposals = []
    for category_id in np.unique(assigned[assigned >= 0]):
        labels, _ = ndimage.label(assigned == category_id)
        for index, region in enumerate(ndimage.find_objects(labels), start=1):
            if region is None:
                continue
            component = labels[region] == index
            if component.sum() < cfg.min_blob_area:
                continue
            ys, xs = region
            confidence = 1.0 - nearest_distance[region][component].mean() / cfg.blob_tolerance
            proposals.append(
                RegionProposal(
                    bbox=(xs.start, ys.start, xs.stop, ys.stop),
                    category_id=int(category_id),
                    score=float(np.clip(confidence, 0.0, 1.0)),
                )
            )
    return proposals


def propose_regions(
    sample: SynthSample,
    mode: ProposalSource,
    rng: np.random.Generator,
    cfg: ZoominConfig | None = None,
    hue_map: dict[str, list[int]] | None = None,
    categories: list[str] | None = None,
) -> RegionSet:
    """モードに応じた領域候補集合"""
    cfg = cfg or ZoominConfig()
    if mode == "oracle":
        proposals = oracle_regions(sample)
    elif mode == "oracle_jittered":
        proposals = [
            RegionProposal(
                bbox=jitter_box(p.bbox, cfg.jitter, sample.image_size, rng),
                category_id=p.category_id,
                score=p.score,
            )
            for p in oracle_regions(sample)
        ]
    else:
        if hue_map is None or categories is None:
            raise ModelConfigError("blob proposals require the corpus hue map and categories")
        proposals = blob_regions(sample, hue_map, categories, cfg)

    if not proposals:
        logger.warning(f"No region proposals for sample {sample.index} (mode={mode})")
    return RegionSet(proposals=proposals, source=mode)


def filter_regions(regions: RegionSet, category_id: int) -> list[Box]:
    """カテゴリが一致する候補のbbox（順序保存）"""
    return [p.bbox for p in regions.proposals if p.category_id == category_id]
