"""凍結バックボーン上でのセグメンテーション学習"""
import time
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import Field

from src.config import ExperimentConfig
from src.data.folds import fold_for
from src.data.sampler import FoldQuerySampler, evaluation_queries
from src.data.synth import SynthCorpus
from src.metrics.segmentation import BatchPredictor, evaluate
from src.model.segmenter import ClsSegmenter, build_segmenter
from src.model.text_encoder import Vocabulary
from src.models import ArrayModel, EvalReport, SynthSample
from src.tensor import functional as F
from src.tensor.core import backward
from src.training.checkpoint import save_checkpoint
from src.training.optimizer import AdamW
from src.utils.error_handler import GradientError, ModelConfigError, ProtocolViolationError
from src.utils.hashing import config_hash
from src.utils.logger import JsonLinesWriter, get_logger
from src.utils.seeding import make_rng
from src.utils.time_utils import format_elapsed

logger = get_logger(__name__)

MONITOR_SAMPLES = 64


class SegmentResult(ArrayModel):
    """セグメンテーション学習の結果"""

    segmenter: ClsSegmenter
    frozen: list[str]
    losses: list[float] = Field(default_factory=list)
    snapshots: list[EvalReport] = Field(default_factory=list, description="学習データ seen mIoU の推移")
    audit_log: list[tuple[int, int]] = Field(default_factory=list)
    checkpoint: Path | None = None


def segmenter_predictor(segmenter: ClsSegmenter, batch_size: int = 64) -> BatchPredictor:
    """ClsSegmenter を評価用のバッチ予測器にする"""

    def predict(samples: Sequence[SynthSample], category_ids: list[int]) -> list[np.ndarray]:
        images = np.stack([sample.image for sample in samples])
        masks: list[np.ndarray] = []
        for start in range(0, len(category_ids), batch_size):
            masks.extend(
                segmenter.predict_masks(images[start : start + batch_size], category_ids[start : start + batch_size])
            )
        return masks

    return predict


def check_compatible(config: ExperimentConfig, pretrained_config: dict) -> None:
    """事前学習時とアーキテクチャ設定が一致するか"""
    pretrained = ExperimentConfig.model_validate(pretrained_config)
    ignore = {"mechanism", "replace_window", "replace_layers", "vpt_prompt_count", "vpt_text_shift", "decoder_layers"}
    ours = config.visual.model_dump(exclude=ignore)
    theirs = pretrained.visual.model_dump(exclude=ignore)
    if ours != theirs or config.text != pretrained.text or config.synth.categories != pretrained.synth.categories:
        raise ModelConfigError("Pretrained checkpoint was built with a different encoder configuration")


def train_segmentation(
    corpus: SynthCorpus,
    config: ExperimentConfig,
    pretrained: dict[str, np.ndarray] | None,
    out_dir: str | Path | None = None,
    log: JsonLinesWriter | None = None,
) -> SegmentResult:
    """L^i・デコーダ・機構パラメータだけを学習する"""
    cfg = config.segment
    fold = fold_for(corpus.folds, config.fold)
    segmenter = build_segmenter(config, Vocabulary(corpus.categories), pretrained)
    frozen = segmenter.freeze_backbone()
    frozen_before = {name: p.data.copy() for name, p in segmenter.named_parameters() if name in set(frozen)}
    params = segmenter.trainable_parameters()
    if not params:
        raise ModelConfigError(f"Mechanism '{config.mechanism}' has no trainable parameters")

    sampler = FoldQuerySampler(
        corpus.split("train"), fold, cfg.batch_size, make_rng(config.seed, "segment", "sampler", fold.fold_id)
    )
    optimizer = AdamW(params, cfg, steps_per_epoch=len(sampler))
    log = log or JsonLinesWriter(None)
    monitor = evaluation_queries(sampler.samples[:MONITOR_SAMPLES], fold.seen)
    predictor = segmenter_predictor(segmenter)

    logger.info(
        f"Segmentation training: fold={fold.fold_id}, mechanism={config.mechanism}, "
        f"{len(sampler.samples)} images, {len(params)} trainable tensors, {len(frozen)} frozen"
    )
    started = time.monotonic()
    losses: list[float] = []
    snapshots: list[EvalReport] = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in sampler.epoch():
            optimizer.zero_grad()
            logits = segmenter(batch.images, batch.category_ids)
            loss = F.binary_cross_entropy_with_logits(logits, batch.targets)
            value = loss.item()
            if not np.isfinite(value):
                raise GradientError(f"Non-finite segmentation loss at epoch {epoch}: {value}")
            backward(loss)
            lr = optimizer.step()
            epoch_losses.append(value)
            log.write(stage="segment", epoch=epoch, step=optimizer.state.step, lr=lr, loss=value)

        losses.append(float(np.mean(epoch_losses)))
        logger.debug(f"Segment epoch {epoch + 1}/{cfg.epochs}: loss={losses[-1]:.4f}")
        if (epoch + 1) % cfg.eval_every == 0 and monitor:
            report = evaluate(
                predictor, monitor, fold.seen, corpus.categories, fold.fold_id, config.mechanism, split="train_seen"
            )
            snapshots.append(report)
            log.write(stage="segment", epoch=epoch, step=optimizer.state.step, seen_miou=report.miou)
            logger.info(f"Segment epoch {epoch + 1}/{cfg.epochs}: loss={losses[-1]:.4f}, seen mIoU={report.miou:.3f}")

    for name, param in segmenter.named_parameters():
        if name in frozen_before and not np.array_equal(frozen_before[name], param.data):
            raise ProtocolViolationError(f"Frozen parameter '{name}' changed during segmentation training")
    logger.info(f"Segmentation training finished in {format_elapsed(time.monotonic() - started)}")

    checkpoint = None
    if out_dir is not None:
        checkpoint = save_checkpoint(
            out_dir,
            segmenter,
            stage="segment",
            config=config.model_dump(mode="json"),
            frozen=frozen,
            metrics={"final_loss": losses[-1], "seen_miou": [r.miou for r in snapshots]},
            provenance={"config_hash": config_hash(config), "fold": fold.fold_id},
        ).parent
    return SegmentResult(
        segmenter=segmenter,
        frozen=frozen,
        losses=losses,
        snapshots=snapshots,
        audit_log=sampler.audit_log,
        checkpoint=checkpoint,
    )
