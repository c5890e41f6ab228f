"""合成セグメンテーションコーパスの生成

物体は外接正方形 (x0, y0, size) と形状カテゴリで表され、マスクは画素中心での解析的な
判定で描画する。各カテゴリは固有の色相とテクスチャを持つ。
"""
import numpy as np
from PIL import ImageColor
from pydantic import Field

from src.config import BASE_SHAPES, SynthConfig
from src.data.folds import build_folds
from src.models import ArrayModel, FoldSplit, ObjectParams, SynthSample
from src.utils.error_handler import SynthesisError
from src.utils.logger import get_logger
from src.utils.seeding import derive_seed

logger = get_logger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
BACKGROUND_LEVEL = 0.25
SPLITS = ("train", "eval", "tiny_eval")


class SynthCorpus(ArrayModel):
    """メモリ上のコーパス（分割ごとのサンプル列）"""

    spec: SynthConfig
    root_seed: int = 0
    hue_map: dict[str, list[int]]
    folds: list[FoldSplit]
    splits: dict[str, list[SynthSample]] = Field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return self.spec.categories

    def split(self, name: str) -> list[SynthSample]:
        return self.splits.get(name, [])


def build_hue_map(categories: list[str]) -> dict[str, list[int]]:
    """カテゴリごとに等間隔の色相を割り当てる（RGB 0-255）"""
    count = len(categories)
    return {
        word: list(ImageColor.getrgb(f"hsv({round(360 * i / count)},90%,90%)"))
        for i, word in enumerate(categories)
    }


def _pixel_grid(obj: ObjectParams, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """物体外接正方形内の正規化座標（画素中心, [0,1]）"""
    centers = np.arange(image_size) + 0.5
    u = (centers[None, :] - obj.x0) / obj.size
    v = (centers[:, None] - obj.y0) / obj.size
    return np.broadcast_to(u, (image_size, image_size)), np.broadcast_to(v, (image_size, image_size))


def render_object(obj: ObjectParams, image_size: int) -> np.ndarray:
    """1物体のマスク [H, W] bool"""
    u, v = _pixel_grid(obj, image_size)
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    du, dv = u - 0.5, v - 0.5
    radius = np.hypot(du, dv)
    shape = BASE_SHAPES[obj.category_id % len(BASE_SHAPES)]

    if shape == "circle":
        region = radius <= 0.5
    elif shape == "square":
        region = np.ones_like(inside)
    elif shape == "triangle":
        region = np.abs(du) <= v / 2
    elif shape == "ring":
        region = (radius <= 0.5) & (radius >= 0.25)
    elif shape == "cross":
        region = (np.abs(du) <= 1 / 6) | (np.abs(dv) <= 1 / 6)
    elif shape == "bar":
        region = np.abs(dv) <= 0.2
    elif shape == "diamond":
        region = np.abs(du) + np.abs(dv) <= 0.5
    else:
        # dot_cluster: 4分割中心の小円
        region = np.zeros_like(inside)
        for cu in (0.25, 0.75):
            for cv in (0.25, 0.75):
                region |= np.hypot(u - cu, v - cv) <= 0.2
    return inside & region


def render_masks(objects: list[ObjectParams], image_size: int) -> dict[int, np.ndarray]:
    """生成パラメータからカテゴリ別（同カテゴリは統合）マスクを再構成"""
    masks: dict[int, np.ndarray] = {}
    for obj in objects:
        mask = render_object(obj, image_size)
        masks[obj.category_id] = masks[obj.category_id] | mask if obj.category_id in masks else mask
    return masks


def _texture(obj: ObjectParams, image_size: int) -> np.ndarray:
    """カテゴリ固有の明度テクスチャ（0.75-1.0）"""
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    period = 2 + obj.category_id % 3
    if obj.category_id < len(BASE_SHAPES):
        # 縞（family a）
        pattern = ((xs + ys * (obj.category_id % 2) + obj.texture_phase) // period) % 2
    else:
        # 市松（family b）
        pattern = ((xs + obj.texture_phase) // period + ys // period) % 2
    return 0.75 + 0.25 * pattern


def _size_range(spec: SynthConfig) -> tuple[int, int]:
    if spec.tiny_objects:
        top = max(1, spec.image_size // 8)
        return min(3, top), top
    return max(4, spec.image_size // 4), max(5, spec.image_size * 7 // 16)


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place_objects(spec: SynthConfig, rng: np.random.Generator) -> list[ObjectParams]:
    """重ならない配置をリジェクションサンプリングで得る"""
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    low, high = _size_range(spec)
    if high > spec.image_size:
        raise SynthesisError(f"Object size {high} does not fit in image {spec.image_size}")

    objects: list[ObjectParams] = []
    attempts = 0
    while len(objects) < count:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise SynthesisError(
                f"Could not place {count} objects after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        size = int(rng.integers(low, high + 1))
        candidate = ObjectParams(
            category_id=int(rng.integers(0, spec.category_count)),
            x0=int(rng.integers(0, spec.image_size - size + 1)),
            y0=int(rng.integers(0, spec.image_size - size + 1)),
            size=size,
            texture_phase=int(rng.integers(0, 4)),
        )
        if any(_overlaps(candidate.bbox, other.bbox) for other in objects):
            continue
        if not render_object(candidate, spec.image_size).any():
            continue
        objects.append(candidate)
    return objects


def quantize(image: np.ndarray) -> np.ndarray:
    """k/255 に量子化（8bit画像と無損失で往復できる）"""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def render_image(
    objects: list[ObjectParams],
    spec: SynthConfig,
    hue_map: dict[str, list[int]],
    rng: np.random.Generator,
) -> np.ndarray:
    """物体パラメータ + ノイズ → 画像 [3, H, W]"""
    size = spec.image_size
    categories = spec.categories
    image = np.full((3, size, size), BACKGROUND_LEVEL)
    for obj in objects:
        mask = render_object(obj, size)
        color = np.asarray(hue_map[categories[obj.category_id]], dtype=np.float64) / 255.0
        shaded = color[:, None, None] * _texture(obj, size)[None]
        image = np.where(mask[None], shaded, image)
    if spec.noise_level > 0:
        image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
    return quantize(image)


def generate_sample(
    spec: SynthConfig,
    rng: np.random.Generator,
    index: int = 0,
    seed: int = 0,
    hue_map: dict[str, list[int]] | None = None,
) -> SynthSample:
    """合成サンプル1枚を生成（rng に対して決定的）"""
    hue_map = hue_map or build_hue_map(spec.categories)
    objects = _place_objects(spec, rng)
    image = render_image(objects, spec, hue_map, rng)
    return SynthSample(
        index=index,
        image=image,
        masks=render_masks(objects, spec.image_size),
        objects=objects,
        seed=seed,
    )


def generate_split(
    spec: SynthConfig,
    root_seed: int,
    split: str,
    count: int,
    hue_map: dict[str, list[int]],
) -> list[SynthSample]:
    """分割1つ分を生成（サンプルごとのシードは (root, split, index) から派生）"""
    samples = []
    for index in range(count):
        seed = derive_seed(root_seed, "synth", split, index)
        samples.append(generate_sample(spec, np.random.default_rng(seed), index, seed, hue_map))
    return samples


def generate_corpus(spec: SynthConfig, root_seed: int) -> SynthCorpus:
    """train / eval / tiny_eval の3分割を生成"""
    hue_map = build_hue_map(spec.categories)
    tiny_spec = spec.model_copy(update={"tiny_objects": True})
    splits = {
        "train": generate_split(spec, root_seed, "train", spec.train_size, hue_map),
        "eval": generate_split(spec, root_seed, "eval", spec.eval_size, hue_map),
        "tiny_eval": generate_split(tiny_spec, root_seed, "tiny_eval", spec.tiny_eval_size, hue_map),
    }
    logger.info(
        "Generated corpus: "
        + ", ".join(f"{name}={len(samples)}" for name, samples in splits.items())
        + f" ({spec.category_count} categories)"
    )
    return SynthCorpus(
        spec=spec,
        root_seed=root_seed,
        hue_map=hue_map,
        folds=build_folds(list(range(spec.category_count)), spec.n_folds),
        splits=splits,
    )
