"""対照学習によるデュアルエンコーダの事前学習"""
import time
from pathlib import Path

import numpy as np
from pydantic import Field

from src.config import ExperimentConfig
from src.data.sampler import contrastive_batches, single_object_samples
from src.data.synth import SynthCorpus
from src.model.segmenter import DualEncoder
from src.model.text_encoder import Vocabulary
from src.models import ArrayModel, SynthSample
from src.tensor import functional as F
from src.tensor.core import Tensor, backward
from src.training.checkpoint import save_checkpoint
from src.training.optimizer import AdamW
from src.utils.error_handler import GradientError, ModelConfigError
from src.utils.hashing import config_hash
from src.utils.logger import JsonLinesWriter, get_logger
from src.utils.seeding import make_rng
from src.utils.time_utils import format_elapsed

logger = get_logger(__name__)


class PretrainResult(ArrayModel):
    """事前学習の結果"""

    model: DualEncoder
    final_loss: float
    retrieval_accuracy: float
    losses: list[float] = Field(default_factory=list)
    checkpoint: Path | None = None


def contrastive_loss(image_embeddings: Tensor, text_embeddings: Tensor, temperature: float) -> Tensor:
    """バッチ内類似度行列の対称交差エントロピー"""
    batch = image_embeddings.shape[0]
    if batch < 2:
        raise GradientError(f"Contrastive loss needs a batch of at least 2, got {batch}")
    logits = F.scale(
        F.matmul(image_embeddings, F.rearrange(text_embeddings, "b d -> d b")), 1.0 / temperature
    )
    targets = np.arange(batch)
    image_to_text = F.cross_entropy(logits, targets)
    text_to_image = F.cross_entropy(F.rearrange(logits, "i j -> j i"), targets)
    return F.scale(F.add(image_to_text, text_to_image), 0.5)


def retrieval_accuracy(model: DualEncoder, samples: list[SynthSample], batch_size: int = 64) -> float:
    """単一物体画像の image→text top-1 正解率（全カテゴリ語から総当たり）"""
    samples = single_object_samples(samples)
    if not samples:
        logger.warning("No single-object samples for retrieval accuracy")
        return 0.0
    text = model.text_embeddings(list(range(len(model.vocabulary)))).data
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = model.image_embeddings(np.stack([s.image for s in chunk])).data
        predicted = (images @ text.T).argmax(axis=1)
        correct += int(sum(p == s.objects[0].category_id for p, s in zip(predicted, chunk, strict=True)))
    return correct / len(samples)


def contrastive_pretrain(
    corpus: SynthCorpus,
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    log: JsonLinesWriter | None = None,
) -> PretrainResult:
    """両エンコーダを対照学習し、チェックポイントを書き出す"""
    cfg = config.pretrain
    if cfg.batch_size < 2:
        raise ModelConfigError("Contrastive pretraining requires batch_size >= 2")
    train = single_object_samples(corpus.split("train"))
    if not train:
        raise ModelConfigError("Pretraining corpus has no single-object training images")

    vocabulary = Vocabulary(corpus.categories)
    model = DualEncoder(config, vocabulary)
    log = log or JsonLinesWriter(None)
    rng = make_rng(config.seed, "pretrain", "batches")

    first_epoch = list(contrastive_batches(train, cfg.batch_size, rng))
    if not first_epoch:
        raise ModelConfigError("Pretraining corpus yields no batch with two distinct categories")
    optimizer = AdamW(model.trainable_parameters(), cfg, steps_per_epoch=len(first_epoch))

    logger.info(
        f"Contrastive pretraining: {len(train)} images, {len(first_epoch)} batches/epoch, "
        f"{cfg.epochs} epochs, {model.num_parameters()} parameters"
    )
    started = time.monotonic()
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        batches = first_epoch if epoch == 0 else list(contrastive_batches(train, cfg.batch_size, rng))
        epoch_losses = []
        for images, category_ids in batches:
            optimizer.zero_grad()
            loss = contrastive_loss(
                model.image_embeddings(images), model.text_embeddings(category_ids), cfg.temperature
            )
            value = loss.item()
            if not np.isfinite(value):
                raise GradientError(f"Non-finite contrastive loss at epoch {epoch}: {value}")
            backward(loss)
            lr = optimizer.step()
            epoch_losses.append(value)
            log.write(stage="pretrain", epoch=epoch, step=optimizer.state.step, lr=lr, loss=value)

        mean_loss = float(np.mean(epoch_losses))
        losses.append(mean_loss)
        logger.info(f"Pretrain epoch {epoch + 1}/{cfg.epochs}: loss={mean_loss:.4f}")
        if (epoch + 1) % cfg.eval_every == 0:
            accuracy = retrieval_accuracy(model, corpus.split("eval"))
            log.write(stage="pretrain", epoch=epoch, step=optimizer.state.step, retrieval_accuracy=accuracy)

    accuracy = retrieval_accuracy(model, corpus.split("eval"))
    log.write(stage="pretrain", epoch=cfg.epochs - 1, step=optimizer.state.step, retrieval_accuracy=accuracy)
    logger.info(
        f"Pretraining finished in {format_elapsed(time.monotonic() - started)}: "
        f"loss={losses[-1]:.4f}, retrieval@1={accuracy:.3f}"
    )

    checkpoint = None
    if out_dir is not None:
        checkpoint = save_checkpoint(
            out_dir,
            model,
            stage="pretrain",
            config=config.model_dump(mode="json"),
            metrics={"final_loss": losses[-1], "retrieval_accuracy": accuracy},
            provenance={"config_hash": config_hash(config), "vocabulary": vocabulary.words},
        ).parent
    return PretrainResult(
        model=model, final_loss=losses[-1], retrieval_accuracy=accuracy, losses=losses, checkpoint=checkpoint
    )
