"""コーパスの読み書き

レイアウト:
    images/<split>_<index>.ppm
    masks/<category>/<split>_<index>.pgm
    manifest.json
"""
import json
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from src.config import SynthConfig
from src.data.synth import SynthCorpus
from src.models import CorpusManifest, SampleRecord, SynthSample
from src.utils.error_handler import ArtifactNotFoundError, DatasetFormatError
from src.utils.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"


def _stem(split: str, index: int) -> str:
    return f"{split}_{index:05d}"


def save_image(image: np.ndarray, path: Path) -> None:
    """[3, H, W] (k/255) → PPM"""
    pixels = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def save_mask(mask: np.ndarray, path: Path) -> None:
    """bool [H, W] → PGM（0 / 255）"""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PPM")


def save_heatmap(values: np.ndarray, path: Path) -> None:
    """非負の [h, w] を最大値で 0..255 に正規化して PGM に"""
    peak = max(float(values.max()), 1e-12)
    Image.fromarray(np.round(255.0 * np.clip(values, 0.0, None) / peak).astype(np.uint8)).save(path, format="PPM")


def _open(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"Missing corpus file: {path}", path=str(path))
    try:
        with Image.open(path) as image:
            if image.mode != mode:
                raise DatasetFormatError(f"Expected mode {mode} in {path}, got {image.mode}", path=str(path))
            return np.asarray(image)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetFormatError(f"Cannot decode image file {path}: {e}", path=str(path)) from e


def load_image(path: Path) -> np.ndarray:
    """PPM → [3, H, W] float64"""
    return np.transpose(_open(path, "RGB"), (2, 0, 1)).astype(np.float64) / 255.0


def load_mask(path: Path) -> np.ndarray:
    """PGM → bool [H, W]"""
    return _open(path, "L") > 127


def write_dataset(corpus: SynthCorpus, path: str | Path) -> Path:
    """コーパスをディレクトリに書き出す"""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    categories = corpus.categories

    splits: dict[str, list[SampleRecord]] = {}
    for split, samples in corpus.splits.items():
        records = []
        for sample in samples:
            stem = _stem(split, sample.index)
            image_file = f"images/{stem}.ppm"
            save_image(sample.image, root / image_file)

            mask_files = {}
            for category_id, mask in sorted(sample.masks.items()):
                word = categories[category_id]
                (root / "masks" / word).mkdir(parents=True, exist_ok=True)
                mask_file = f"masks/{word}/{stem}.pgm"
                save_mask(mask, root / mask_file)
                mask_files[word] = mask_file

            records.append(
                SampleRecord(
                    index=sample.index,
                    seed=sample.seed,
                    image_file=image_file,
                    mask_files=mask_files,
                    objects=sample.objects,
                )
            )
        splits[split] = records

    manifest = CorpusManifest(
        spec={**corpus.spec.model_dump(mode="json"), "root_seed": corpus.root_seed},
        categories=categories,
        hue_map=corpus.hue_map,
        folds=corpus.folds,
        splits=splits,
    )
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest.model_dump(mode="json"), ensure_ascii=False, indent=2),
        encoding="utf-8",
    )
    logger.info(f"Corpus written to {root} ({sum(len(r) for r in splits.values())} samples)")
    return root


def read_manifest(path: str | Path) -> CorpusManifest:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise ArtifactNotFoundError(f"Corpus manifest not found: {manifest_path}", path=str(manifest_path))
    try:
        return CorpusManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetFormatError(f"Malformed manifest {manifest_path}: {e}", path=str(manifest_path)) from e


def read_dataset(path: str | Path) -> SynthCorpus:
    """ディレクトリからコーパスを読み込む"""
    root = Path(path)
    manifest = read_manifest(root)
    raw_spec = dict(manifest.spec)
    root_seed = int(raw_spec.pop("root_seed", 0))
    try:
        spec = SynthConfig.model_validate(raw_spec)
    except ValidationError as e:
        raise DatasetFormatError(f"Invalid corpus spec in {root / MANIFEST_NAME}: {e}", path=str(root)) from e
    if spec.categories != manifest.categories:
        raise DatasetFormatError(
            f"Manifest categories do not match the corpus spec in {root / MANIFEST_NAME}", path=str(root)
        )
    word_ids = {word: i for i, word in enumerate(manifest.categories)}

    splits: dict[str, list[SynthSample]] = {}
    for split, records in manifest.splits.items():
        samples = []
        for record in records:
            masks = {}
            for word, mask_file in record.mask_files.items():
                if word not in word_ids:
                    raise DatasetFormatError(f"Unknown category '{word}' in manifest", path=mask_file)
                masks[word_ids[word]] = load_mask(root / mask_file)
            samples.append(
                SynthSample(
                    index=record.index,
                    image=load_image(root / record.image_file),
                    masks=masks,
                    objects=record.objects,
                    seed=record.seed,
                )
            )
        splits[split] = samples

    return SynthCorpus(
        spec=spec, root_seed=root_seed, hue_map=manifest.hue_map, folds=manifest.folds, splits=splits
    )
