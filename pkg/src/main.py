"""ClsNav 実験ハーネス - メインプログラム"""

import argparse
import asyncio
import functools
import json
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from src.config import ExperimentConfig, experiment_schema, get_config, load_experiment_config
from src.data.folds import fold_for
from src.data.io import MANIFEST_NAME, read_dataset, save_heatmap, write_dataset
from src.data.sampler import evaluation_queries
from src.data.synth import SynthCorpus, generate_corpus
from src.metrics.segmentation import (
    BatchPredictor,
    evaluate,
    fold_table,
    oracle_predictor,
    write_csv,
)
from src.model.segmenter import ClsSegmenter, build_segmenter
from src.model.text_encoder import Vocabulary
from src.model.visual_encoder import attention_mass_in_mask
from src.models import EvalReport, RegionSet, RunManifest, SynthSample
from src.training.checkpoint import META_FILE, TENSOR_FILE, load_checkpoint
from src.training.pretrain import contrastive_pretrain
from src.training.segment import check_compatible, segmenter_predictor, train_segmentation
from src.utils.error_handler import (
    ArtifactNotFoundError,
    ClsNavError,
    DegenerateInputError,
    ModelConfigError,
    handle_exception,
)
from src.utils.hashing import config_hash, file_hash, tree_hash
from src.utils.logger import JsonLinesWriter, get_logger
from src.utils.seeding import make_rng
from src.utils.time_utils import format_elapsed
from src.zoomin.pipeline import boxes_as_masks, zoom_in_segment
from src.zoomin.proposals import filter_regions, propose_regions

logger = get_logger(__name__)

COMMANDS = (
    "gen-data",
    "pretrain",
    "train-seg",
    "evaluate",
    "ablate-layers",
    "ablate-mechanism",
    "zoomin-eval",
    "attention-dump",
    "schema",
)

# 層の組み合わせアブレーション
LAYER_ARMS: dict[str, list[int]] = {
    "0-1-2": [0, 1, 2],
    "2-5-8": [2, 5, 8],
    "9-10-11": [9, 10, 11],
    "2-3-4": [2, 3, 4],
}
MECHANISM_ARMS = ("replace_cls", "channel_attention", "spatial_attention", "vpt")
ZOOMIN_ARMS = ("plain", "oracle", "oracle_jittered", "blob", "boxes_only")


def _select_arms(names: Sequence[str], arm: str | None) -> list[str]:
    if arm is None:
        return list(names)
    if arm not in names:
        raise ModelConfigError(f"Unknown arm '{arm}'; expected one of {list(names)}")
    return [arm]


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _checkpoint_hash(directory: Path) -> str:
    return tree_hash([directory / META_FILE, directory / TENSOR_FILE])


def _unseen_report(reports: Sequence[EvalReport], key: str) -> EvalReport:
    for report in reports:
        if report.split == "unseen":
            return report
    raise DegenerateInputError(f"Arm {key} produced no unseen evaluation queries", step="evaluate")


class ExperimentRunner:
    """サブコマンドの実行クラス"""

    def __init__(
        self,
        config: ExperimentConfig,
        out_dir: str | Path | None = None,
        corpus_dir: str | Path | None = None,
        pretrained_dir: str | Path | None = None,
        checkpoint_dir: str | Path | None = None,
    ) -> None:
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir)
        self.corpus_dir = Path(corpus_dir) if corpus_dir else self.out_dir / "corpus"
        self.pretrained_dir = Path(pretrained_dir) if pretrained_dir else self.out_dir / "pretrain"
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else self.segment_dir(config)
        self.config_hash = config_hash(config)
        self.input_hashes: dict[str, str] = {}
        self._corpus: SynthCorpus | None = None
        self._pretrained: tuple[dict[str, Any], dict[str, np.ndarray]] | None = None

        logger.info(f"Experiment runner initialized (out={self.out_dir}, config={self.config_hash})")

    def segment_dir(self, config: ExperimentConfig) -> Path:
        return self.out_dir / "segment" / f"fold{config.fold}-{config.mechanism}"

    def _arm_hash(self, overrides: dict[str, Any]) -> str:
        """アームの上書きを適用した設定のハッシュ（fold は基準設定のまま）"""
        return config_hash(self.config.with_overrides(**overrides))

    # ------------------------------------------------------------------
    # 共通ステップ
    # ------------------------------------------------------------------

    async def _step_load_corpus(self) -> SynthCorpus:
        """コーパス読み込み"""
        if self._corpus is None:
            manifest = self.corpus_dir / MANIFEST_NAME
            if not manifest.exists():
                raise ArtifactNotFoundError(
                    f"Corpus not found: {manifest} (run gen-data first)", path=str(manifest)
                )
            self._corpus = await asyncio.to_thread(read_dataset, self.corpus_dir)
            self.input_hashes["corpus"] = file_hash(manifest)
            logger.info(f"Loaded corpus from {self.corpus_dir}")
        return self._corpus

    async def _step_load_pretrained(self, config: ExperimentConfig) -> dict[str, np.ndarray]:
        """事前学習済みエンコーダ読み込み"""
        if self._pretrained is None:
            if not (self.pretrained_dir / META_FILE).exists():
                raise ArtifactNotFoundError(
                    f"Pretrained checkpoint not found: {self.pretrained_dir / META_FILE} (run pretrain first)",
                    path=str(self.pretrained_dir / META_FILE),
                )
            meta, state = await asyncio.to_thread(load_checkpoint, self.pretrained_dir)
            if meta.stage != "pretrain":
                raise ModelConfigError(
                    f"{self.pretrained_dir} is a '{meta.stage}' checkpoint, expected 'pretrain'"
                )
            self._pretrained = (meta.config, state)
            self.input_hashes["pretrained"] = _checkpoint_hash(self.pretrained_dir)
        pretrained_config, state = self._pretrained
        check_compatible(config, pretrained_config)
        return state

    async def _step_load_segmenter(self, corpus: SynthCorpus) -> ClsSegmenter:
        """学習済みセグメンタ読み込み"""
        if not (self.checkpoint_dir / META_FILE).exists():
            raise ArtifactNotFoundError(
                f"Segmentation checkpoint not found: {self.checkpoint_dir / META_FILE} (run train-seg first)",
                path=str(self.checkpoint_dir / META_FILE),
            )
        meta, state = await asyncio.to_thread(load_checkpoint, self.checkpoint_dir)
        if meta.stage != "segment":
            raise ModelConfigError(f"{self.checkpoint_dir} is a '{meta.stage}' checkpoint, expected 'segment'")
        config = load_experiment_config(meta.config)
        segmenter = build_segmenter(config, Vocabulary(corpus.categories))
        segmenter.load_state_dict(state)
        self.input_hashes["checkpoint"] = _checkpoint_hash(self.checkpoint_dir)
        return segmenter

    def _evaluate_segmenter(
        self, segmenter: ClsSegmenter, corpus: SynthCorpus, config: ExperimentConfig, split: str = "eval"
    ) -> list[EvalReport]:
        """unseen（ゼロショット）と seen の評価"""
        fold = fold_for(corpus.folds, config.fold)
        predictor = segmenter_predictor(segmenter)
        reports = []
        for name, classes in (("unseen", fold.unseen), ("seen", fold.seen)):
            queries = evaluation_queries(corpus.split(split), classes)
            if not queries:
                logger.warning(f"No {name} queries in split '{split}' for fold {fold.fold_id}")
                continue
            reports.append(
                evaluate(
                    predictor,
                    queries,
                    classes,
                    corpus.categories,
                    fold.fold_id,
                    config.mechanism,
                    split=name,
                    config_hash=config_hash(config),
                )
            )
        return reports

    def _report_rows(self, reports: Sequence[EvalReport]) -> list[dict[str, Any]]:
        return [
            {
                "fold": r.fold_id,
                "split": r.split,
                "mechanism": r.mechanism,
                "miou": r.miou,
                "fb_iou": r.fb_iou,
                "sample_count": r.sample_count,
                "config_hash": r.config_hash or self.config_hash,
            }
            for r in reports
        ]

    def _step_write_manifest(self, command: str, run_dir: Path, outputs: Sequence[Path]) -> Path:
        """実行記録（設定スナップショット・シード・入力ハッシュ）"""
        manifest = RunManifest(
            command=command,
            seed=self.config.seed,
            config_hash=self.config_hash,
            config=self.config.model_dump(mode="json"),
            input_hashes=dict(sorted(self.input_hashes.items())),
            outputs=sorted(str(p.relative_to(run_dir)) if p.is_relative_to(run_dir) else str(p) for p in outputs),
        )
        return _write_json(run_dir / "run_manifest.json", manifest.model_dump(mode="json"))

    async def _run_arms(
        self, jobs: dict[str, Callable[[], list[EvalReport]]], parallel: int
    ) -> dict[str, list[EvalReport]]:
        """アームを逐次または asyncio.to_thread で並列に実行"""
        if parallel <= 1:
            return {name: await asyncio.to_thread(job) for name, job in jobs.items()}

        semaphore = asyncio.Semaphore(parallel)

        async def run(job: Callable[[], list[EvalReport]]) -> list[EvalReport]:
            async with semaphore:
                return await asyncio.to_thread(job)

        results = await asyncio.gather(*(run(job) for job in jobs.values()))
        return dict(zip(jobs, results, strict=True))

    def _train_and_evaluate(
        self, config: ExperimentConfig, corpus: SynthCorpus, state: dict[str, np.ndarray], run_dir: Path
    ) -> list[EvalReport]:
        """1アーム分の学習と評価（スレッドから呼ばれる）"""
        result = train_segmentation(
            corpus, config, state, out_dir=run_dir, log=JsonLinesWriter(run_dir / "train_log.jsonl")
        )
        reports = self._evaluate_segmenter(result.segmenter, corpus, config)
        _write_json(run_dir / "eval_report.json", [r.model_dump(mode="json") for r in reports])
        return reports

    # ------------------------------------------------------------------
    # サブコマンド
    # ------------------------------------------------------------------

    async def gen_data(self) -> Path:
        """合成コーパス生成"""
        logger.info("Step 1: Generating synthetic corpus")
        corpus = await asyncio.to_thread(generate_corpus, self.config.synth, self.config.seed)
        await asyncio.to_thread(write_dataset, corpus, self.corpus_dir)
        Vocabulary(corpus.categories).save(self.corpus_dir / "vocabulary.json")
        self._step_write_manifest(
            "gen-data", self.corpus_dir, [self.corpus_dir / MANIFEST_NAME, self.corpus_dir / "vocabulary.json"]
        )
        return self.corpus_dir

    async def pretrain(self) -> Path:
        """対照事前学習"""
        corpus = await self._step_load_corpus()
        logger.info("Step 2: Contrastive pretraining")
        run_dir = self.pretrained_dir
        result = await asyncio.to_thread(
            contrastive_pretrain,
            corpus,
            self.config,
            run_dir,
            JsonLinesWriter(run_dir / "train_log.jsonl"),
        )
        self._step_write_manifest(
            "pretrain", run_dir, [run_dir / META_FILE, run_dir / TENSOR_FILE, run_dir / "train_log.jsonl"]
        )
        logger.info(f"Retrieval accuracy: {result.retrieval_accuracy:.3f}")
        return run_dir

    async def train_seg(self) -> Path:
        """セグメンテーション学習 + 評価"""
        corpus = await self._step_load_corpus()
        state = await self._step_load_pretrained(self.config)
        logger.info(f"Step 3: Segmentation training (fold {self.config.fold}, {self.config.mechanism})")
        run_dir = self.segment_dir(self.config)
        reports = await asyncio.to_thread(self._train_and_evaluate, self.config, corpus, state, run_dir)
        csv_path = write_csv(run_dir / "eval.csv", self._report_rows(reports))
        self._step_write_manifest(
            "train-seg",
            run_dir,
            [run_dir / META_FILE, run_dir / TENSOR_FILE, run_dir / "eval_report.json", csv_path],
        )
        return run_dir

    async def evaluate(self, oracle: bool = False) -> Path:
        """評価（--oracle で正解マスクを流す配線検査）"""
        corpus = await self._step_load_corpus()
        fold = fold_for(corpus.folds, self.config.fold)
        run_dir = self.out_dir / "evaluate" / f"fold{fold.fold_id}-{'oracle' if oracle else self.config.mechanism}"
        logger.info(f"Step 4: Evaluating fold {fold.fold_id} ({'oracle' if oracle else 'checkpoint'})")

        if oracle:
            reports = []
            for name, classes in (("unseen", fold.unseen), ("seen", fold.seen)):
                queries = evaluation_queries(corpus.split("eval"), classes)
                if queries:
                    reports.append(
                        evaluate(
                            oracle_predictor(queries),
                            queries,
                            classes,
                            corpus.categories,
                            fold.fold_id,
                            "oracle",
                            split=name,
                            config_hash=self.config_hash,
                        )
                    )
        else:
            segmenter = await self._step_load_segmenter(corpus)
            reports = await asyncio.to_thread(self._evaluate_segmenter, segmenter, corpus, self.config)

        report_path = _write_json(run_dir / "eval_report.json", [r.model_dump(mode="json") for r in reports])
        csv_path = write_csv(run_dir / "eval.csv", self._report_rows(reports))
        for report in reports:
            logger.info(f"{report.split}: mIoU={report.miou:.4f}, FB-IoU={report.fb_iou:.4f}")
        self._step_write_manifest("evaluate", run_dir, [report_path, csv_path])
        return run_dir

    async def ablate_layers(
        self, arm: str | None = None, folds: Sequence[int] | None = None, parallel: int = 1
    ) -> Path:
        """置換層の組み合わせアブレーション"""
        corpus = await self._step_load_corpus()
        folds = list(folds) if folds is not None else [self.config.fold]
        run_root = self.out_dir / "ablate-layers"
        jobs: dict[str, Callable[[], list[EvalReport]]] = {}
        arm_overrides = {
            name: {"visual.mechanism": "replace_cls", "visual.replace_layers": LAYER_ARMS[name]}
            for name in _select_arms(list(LAYER_ARMS), arm)
        }
        for name, overrides in arm_overrides.items():
            for fold_id in folds:
                config = self.config.with_overrides(fold=fold_id, **overrides)
                state = await self._step_load_pretrained(config)
                key = f"{name}/fold{fold_id}"
                jobs[key] = functools.partial(self._train_and_evaluate, config, corpus, state, run_root / key)

        logger.info(f"Step 5: Running {len(jobs)} layer-ablation jobs (parallel={parallel})")
        results = await self._run_arms(jobs, parallel)

        rows = []
        for name, overrides in arm_overrides.items():
            row: dict[str, Any] = {"arm": name, "layers": " ".join(str(i) for i in LAYER_ARMS[name])}
            unseen = []
            for fold_id in folds:
                report = _unseen_report(results[f"{name}/fold{fold_id}"], f"{name}/fold{fold_id}")
                row[f"miou_fold{fold_id}"] = report.miou
                unseen.append(report)
            row["miou_mean"] = float(np.mean([r.miou for r in unseen]))
            row["fbiou_mean"] = float(np.mean([r.fb_iou for r in unseen]))
            row["config_hash"] = self._arm_hash(overrides)
            rows.append(row)
        csv_path = write_csv(run_root / "ablate_layers.csv", rows)
        self._step_write_manifest("ablate-layers", run_root, [csv_path])
        return csv_path

    async def ablate_mechanism(
        self, arm: str | None = None, folds: Sequence[int] | None = None, parallel: int = 1
    ) -> Path:
        """条件付け機構のアブレーション"""
        corpus = await self._step_load_corpus()
        folds = list(folds) if folds is not None else [self.config.fold]
        run_root = self.out_dir / "ablate-mechanism"
        jobs: dict[str, Callable[[], list[EvalReport]]] = {}
        for name in _select_arms(MECHANISM_ARMS, arm):
            for fold_id in folds:
                config = self.config.with_overrides(**{"fold": fold_id, "visual.mechanism": name})
                state = await self._step_load_pretrained(config)
                key = f"{name}/fold{fold_id}"
                jobs[key] = functools.partial(self._train_and_evaluate, config, corpus, state, run_root / key)

        logger.info(f"Step 5: Running {len(jobs)} mechanism-ablation jobs (parallel={parallel})")
        results = await self._run_arms(jobs, parallel)
        reports = {
            name: [
                _unseen_report(results[f"{name}/fold{fold_id}"], f"{name}/fold{fold_id}") for fold_id in folds
            ]
            for name in _select_arms(MECHANISM_ARMS, arm)
        }
        arm_hashes = {name: self._arm_hash({"visual.mechanism": name}) for name in reports}
        csv_path = write_csv(
            run_root / "ablate_mechanism.csv", fold_table(reports, self.config_hash, arm_hashes=arm_hashes)
        )
        self._step_write_manifest("ablate-mechanism", run_root, [csv_path])
        return csv_path

    async def zoomin_eval(self, arm: str | None = None) -> Path:
        """微小物体分割でのズームイン比較"""
        corpus = await self._step_load_corpus()
        segmenter = await self._step_load_segmenter(corpus)
        fold = fold_for(corpus.folds, self.config.fold)
        run_dir = self.out_dir / "zoomin" / f"fold{fold.fold_id}-{segmenter.mechanism}"
        queries = evaluation_queries(corpus.split("tiny_eval"), fold.unseen)
        if not queries:
            raise DegenerateInputError(
                f"No unseen queries in the tiny-object split for fold {fold.fold_id}", step="zoomin"
            )

        logger.info(f"Step 6: Zoom-in evaluation on {len(queries)} tiny-object queries")
        arms = _select_arms(ZOOMIN_ARMS, arm)
        reports = await asyncio.to_thread(self._zoomin_reports, segmenter, corpus, queries, arms, run_dir)
        csv_path = write_csv(run_dir / "zoomin.csv", fold_table({a: [reports[a]] for a in arms}, self.config_hash))
        self._step_write_manifest("zoomin-eval", run_dir, [csv_path, run_dir / "regions.json"])
        return csv_path

    def _zoomin_reports(
        self,
        segmenter: ClsSegmenter,
        corpus: SynthCorpus,
        queries: list[tuple[SynthSample, int]],
        arms: list[str],
        run_dir: Path,
    ) -> dict[str, EvalReport]:
        fold = fold_for(corpus.folds, self.config.fold)
        size = self.config.visual.image_size
        plain = segmenter_predictor(segmenter)

        def single(image: np.ndarray, category_id: int) -> np.ndarray:
            return segmenter.predict_masks(image[None], [category_id])[0]

        samples = list({s.index: s for s, _ in queries}.values())
        region_sets: dict[str, dict[int, RegionSet]] = {}
        for mode in ("oracle", "oracle_jittered", "blob"):
            rng = make_rng(self.config.seed, "zoomin", mode)
            region_sets[mode] = {
                sample.index: propose_regions(
                    sample, mode, rng, self.config.zoomin, corpus.hue_map, corpus.categories
                )
                for sample in samples
            }
        _write_json(
            run_dir / "regions.json",
            {
                mode: [
                    {"index": s.index, **regions[s.index].to_json_dict(corpus.categories)}
                    for s in samples
                ]
                for mode, regions in region_sets.items()
            },
        )

        def zoomed(mode: str) -> BatchPredictor:
            def predict(batch: Sequence[SynthSample], category_ids: list[int]) -> list[np.ndarray]:
                return [
                    zoom_in_segment(sample.image, region_sets[mode][sample.index], c, single, size)
                    for sample, c in zip(batch, category_ids, strict=True)
                ]

            return predict

        def boxes_only(batch: Sequence[SynthSample], category_ids: list[int]) -> list[np.ndarray]:
            return [
                boxes_as_masks(filter_regions(region_sets["oracle"][sample.index], c), size)
                for sample, c in zip(batch, category_ids, strict=True)
            ]

        predictors = {
            "plain": plain,
            "oracle": zoomed("oracle"),
            "oracle_jittered": zoomed("oracle_jittered"),
            "blob": zoomed("blob"),
            "boxes_only": boxes_only,
        }
        reports = {}
        for name in arms:
            reports[name] = evaluate(
                predictors[name],
                queries,
                fold.unseen,
                corpus.categories,
                fold.fold_id,
                name,
                split="tiny_unseen",
                config_hash=self.config_hash,
            )
            logger.info(f"Zoom-in arm {name}: mIoU={reports[name].miou:.4f}")
        _write_json(run_dir / "zoomin_report.json", {k: v.model_dump(mode="json") for k, v in reports.items()})
        return reports

    async def attention_dump(self, layer: int | None = None, image_count: int = 100, dump_count: int = 4) -> Path:
        """置換あり/なしの [CLS] 注意マップ"""
        corpus = await self._step_load_corpus()
        segmenter = await self._step_load_segmenter(corpus)
        if segmenter.navigator is None:
            raise ModelConfigError("attention-dump requires a replace_cls checkpoint")
        visual = segmenter.config.visual
        layer = visual.last_window_layer if layer is None else layer
        if layer is None or not 0 <= layer < visual.n_layers:
            raise ModelConfigError(f"Attention layer {layer} out of range for {visual.n_layers} layers")

        fold = fold_for(corpus.folds, self.config.fold)
        queries = evaluation_queries(corpus.split("eval"), fold.unseen)[:image_count]
        run_dir = self.out_dir / "attention" / f"fold{fold.fold_id}"
        logger.info(f"Step 7: Dumping attention at layer {layer} for {len(queries)} queries")
        summary = await asyncio.to_thread(self._attention_summary, segmenter, queries, layer, dump_count, run_dir)
        summary_path = _write_json(run_dir / "attention_summary.json", summary)
        self._step_write_manifest("attention-dump", run_dir, [summary_path, run_dir / "index.json"])
        return summary_path

    def _attention_summary(
        self,
        segmenter: ClsSegmenter,
        queries: list[tuple[SynthSample, int]],
        layer: int,
        dump_count: int,
        run_dir: Path,
    ) -> dict[str, Any]:
        visual = segmenter.config.visual
        grid = visual.grid_size
        masses: dict[str, list[float]] = {"with_replacement": [], "without_replacement": []}
        index = []
        for position, (sample, category_id) in enumerate(queries):
            for arm, navigate in (("with_replacement", True), ("without_replacement", False)):
                output, _ = segmenter.encode(sample.image, [category_id], navigate=navigate)
                weights = output.attention[layer].data[0]
                try:
                    masses[arm].append(attention_mass_in_mask(weights, sample.masks[category_id], visual.patch_size))
                except DegenerateInputError:
                    logger.debug(f"Sample {sample.index}: mask covers no patch, skipped")
                    break
                if position < dump_count:
                    for head in range(weights.shape[0]):
                        row = weights[head, 0, -grid * grid :].reshape(grid, grid)
                        name = f"{arm}/sample{sample.index:05d}_layer{layer:02d}_head{head}.pgm"
                        path = run_dir / name
                        path.parent.mkdir(parents=True, exist_ok=True)
                        save_heatmap(row, path)
                        index.append(
                            {
                                "file": name,
                                "sample": sample.index,
                                "category": category_id,
                                "layer": layer,
                                "head": head,
                                "arm": arm,
                            }
                        )
        _write_json(run_dir / "index.json", index)
        count = min(len(masses["with_replacement"]), len(masses["without_replacement"]))
        return {
            "layer": layer,
            "count": count,
            "mean_mass_with_replacement": float(np.mean(masses["with_replacement"][:count])) if count else None,
            "mean_mass_without_replacement": float(np.mean(masses["without_replacement"][:count])) if count else None,
        }

    async def schema(self) -> Path:
        """実験設定のJSONスキーマ"""
        path = _write_json(self.out_dir / "experiment.schema.json", experiment_schema())
        logger.info(f"Schema written to {path}")
        return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="ClsNav: [CLS] トークンナビゲーションによるゼロショットセグメンテーション実験"
    )
    parser.add_argument("command", choices=COMMANDS, help="サブコマンド")
    parser.add_argument("--config", help="実験設定JSON")
    parser.add_argument("--seed", type=int, help="ルートシード（設定を上書き）")
    parser.add_argument("--out", help="出力ディレクトリ（設定を上書き）")
    parser.add_argument("--arm", help="アブレーション/ズームインのアームを1つに限定")
    parser.add_argument("--parallel", type=int, default=1, help="アームの並列数")
    parser.add_argument("--folds", type=int, nargs="+", help="アブレーションで回すfold")
    parser.add_argument("--corpus", help="コーパスディレクトリ（既定: <out>/corpus）")
    parser.add_argument("--pretrained", help="事前学習チェックポイント（既定: <out>/pretrain）")
    parser.add_argument("--checkpoint", help="セグメンテーションチェックポイント")
    parser.add_argument("--oracle", action="store_true", help="evaluate: 正解マスクを予測として流す")
    parser.add_argument("--layer", type=int, help="attention-dump: 対象層（既定: 窓の最終層）")
    parser.add_argument("--images", type=int, default=100, help="attention-dump: 集計する画像数")
    return parser


async def main(argv: Sequence[str] | None = None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    app_config = get_config()
    out_dir = Path(args.out or app_config.output_dir)
    started = time.time()

    try:
        config = load_experiment_config(args.config)
        overrides: dict[str, Any] = {}
        # 設定ファイルが無いときは AppConfig（環境変数 / .env）の値
        if args.seed is not None:
            overrides["seed"] = args.seed
        elif args.config is None:
            overrides["seed"] = app_config.root_seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        elif args.config is None:
            overrides["output_dir"] = app_config.output_dir
        if overrides:
            config = config.with_overrides(**overrides)
        out_dir = Path(config.output_dir)
        logger.info(f"Starting '{args.command}' in {app_config.environment} mode (seed={config.seed})")

        runner = ExperimentRunner(config, out_dir, args.corpus, args.pretrained, args.checkpoint)
        command = args.command
        if command == "gen-data":
            await runner.gen_data()
        elif command == "pretrain":
            await runner.pretrain()
        elif command == "train-seg":
            await runner.train_seg()
        elif command == "evaluate":
            await runner.evaluate(oracle=args.oracle)
        elif command == "ablate-layers":
            await runner.ablate_layers(args.arm, args.folds, args.parallel)
        elif command == "ablate-mechanism":
            await runner.ablate_mechanism(args.arm, args.folds, args.parallel)
        elif command == "zoomin-eval":
            await runner.zoomin_eval(args.arm)
        elif command == "attention-dump":
            await runner.attention_dump(args.layer, args.images)
        else:
            await runner.schema()

        logger.info(f"'{command}' completed in {format_elapsed(time.time() - started)}")
        return 0

    except Exception as e:
        processing_error = handle_exception(e, step=args.command)
        _write_json(out_dir / "error.json", processing_error.model_dump(mode="json"))
        if not isinstance(e, ClsNavError):
            logger.error(f"Unexpected error: {e}")
        return 1


def cli_main() -> None:
    """CLI エントリーポイント"""
    exit_code = asyncio.run(main())
    sys.exit(exit_code)


if __name__ == "__main__":
    cli_main()
