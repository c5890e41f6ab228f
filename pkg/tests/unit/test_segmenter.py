"""条件付け機構・デコーダ・セグメンタのテスト"""
import numpy as np
import pytest

from src.config import ExperimentConfig
from src.model.decoder import MaskDecoder, MaskLogits, binarize
from src.model.mechanisms import ChannelAttention, SpatialAttention, VisualPromptTuning
from src.model.segmenter import ClsSegmenter, DualEncoder, build_segmenter
from src.model.text_encoder import Vocabulary
from src.model.visual_encoder import VisualEncoder
from src.tensor import functional as F
from src.tensor.core import Tensor, backward
from src.tensor.gradcheck import check_gradients
from src.utils.error_handler import ModelConfigError, ShapeMismatchError


def _config(tiny_config_dict: dict, **visual: object) -> ExperimentConfig:
    tiny_config_dict["visual"].update(visual)
    return ExperimentConfig.model_validate(tiny_config_dict)


class TestMechanisms:
    """比較用機構のテスト"""

    def test_channel_gate_range(self, rng: np.random.Generator) -> None:
        """チャネルゲートが (0, 1) に入り、全トークンに同じゲートが掛かることを確認"""
        attention = ChannelAttention(4, rng)
        tokens = Tensor(np.ones((2, 3, 4)))
        text = Tensor(rng.normal(size=(2, 4)))
        gate = attention.gate_values(text).data
        assert np.all((gate > 0.0) & (gate < 1.0))
        out = attention(tokens, text).data
        np.testing.assert_allclose(out[:, 0], gate)
        np.testing.assert_allclose(out[:, 2], gate)

    def test_spatial_weights_preserve_mean(self, rng: np.random.Generator) -> None:
        """空間重みが softmax で、m 倍すると平均1になることを確認"""
        attention = SpatialAttention(4, rng)
        tokens = Tensor(rng.normal(size=(2, 3, 4)))
        text = Tensor(rng.normal(size=(2, 4)))
        weights = attention.token_weights(tokens, text).data
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones(2))
        out = attention(tokens, text).data
        np.testing.assert_allclose(out, tokens.data * 3.0 * weights[:, :, None])

    def test_shape_checks(self, rng: np.random.Generator) -> None:
        """E_N とテキスト [CLS] のバッチ不一致を拒否することを確認"""
        with pytest.raises(ShapeMismatchError):
            ChannelAttention(4, rng)(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4))))

    def test_deep_prompts_per_layer(self, tiny_config: ExperimentConfig, rng: np.random.Generator) -> None:
        """層ごとに独立したプロンプトが [B, P, d] で返ることを確認"""
        tuning = VisualPromptTuning(tiny_config.visual, rng)
        prompts = tuning.deep_prompts(Tensor(rng.normal(size=(2, 16))))
        assert prompts is not None
        assert sorted(prompts) == [0, 1, 2, 3]
        assert prompts[0].shape == (2, 2, 16)
        assert not np.allclose(prompts[0].data, prompts[1].data)

    def test_zero_prompts(self, tiny_config_dict: dict, rng: np.random.Generator) -> None:
        """プロンプト数0では前置しないことを確認"""
        config = _config(tiny_config_dict, vpt_prompt_count=0)
        tuning = VisualPromptTuning(config.visual, rng)
        assert tuning.deep_prompts(Tensor(np.ones((1, 16)))) is None
        assert len(tuning.banks) == 0


class TestDecoder:
    """マスクデコーダのテスト"""

    def test_logit_map_shape(self, tiny_config: ExperimentConfig, rng: np.random.Generator) -> None:
        """E_N から H×W ロジットが得られることを確認"""
        decoder = MaskDecoder(tiny_config.visual, rng)
        logits = decoder(Tensor(rng.normal(size=(3, 4, 16))))
        assert logits.shape == (3, 16, 16)

    def test_pixel_shuffle_layout(self, tiny_config_dict: dict, rng: np.random.Generator) -> None:
        """トークン k のロジットがパッチ k の領域に並ぶことを確認"""
        config = _config(tiny_config_dict, decoder_layers=1)
        decoder = MaskDecoder(config.visual, rng)
        tokens = Tensor(rng.normal(size=(1, 4, 16)))
        pixels = decoder.head(decoder.ln(decoder.blocks[0](tokens)[0])).data
        logits = decoder(tokens).data
        np.testing.assert_allclose(logits[0, :8, 8:16], pixels[0, 1].reshape(8, 8))
        np.testing.assert_allclose(logits[0, 8:16, :8], pixels[0, 2].reshape(8, 8))

    def test_wrong_token_count(self, tiny_config: ExperimentConfig, rng: np.random.Generator) -> None:
        """トークン数の不一致が ShapeMismatchError になることを確認"""
        decoder = MaskDecoder(tiny_config.visual, rng)
        with pytest.raises(ShapeMismatchError):
            decoder(Tensor(rng.normal(size=(1, 5, 16))))

    def test_binarize_threshold(self) -> None:
        """ロジット > threshold を前景とすることを確認"""
        mask = binarize(MaskLogits(logits=np.array([[-1.0, 0.0], [0.5, 2.0]])))
        np.testing.assert_array_equal(mask, [[False, False], [True, True]])
        raised = binarize(MaskLogits(logits=np.array([[0.5, 2.0]]), threshold=1.0))
        np.testing.assert_array_equal(raised, [[False, True]])

    @pytest.mark.parametrize("seed", range(10))
    def test_threshold_shift_flips_band(self, seed: int) -> None:
        """閾値を ε 上げると (t, t+ε] のロジットだけが背景に変わり、t ちょうどは背景のままであることを確認"""
        rng = np.random.default_rng(seed)
        threshold = float(rng.normal())
        eps = float(rng.uniform(0.01, 0.5))
        logits = rng.normal(threshold, 0.5, size=(12, 12))
        logits.flat[rng.choice(logits.size, size=6, replace=False)] = [threshold] * 3 + [threshold + eps] * 3
        low = binarize(MaskLogits(logits=logits, threshold=threshold))
        high = binarize(MaskLogits(logits=logits, threshold=threshold + eps))

        expected = np.array([[threshold < v <= threshold + eps for v in row] for row in logits.tolist()])
        np.testing.assert_array_equal(low & ~high, expected)
        assert not np.any(high & ~low)
        assert not np.any(low[logits == threshold])
        assert np.all(low[logits == threshold + eps])
        assert not np.any(high[logits == threshold + eps])

    def test_mask_logits_must_be_2d(self) -> None:
        """MaskLogits が2次元以外を拒否することを確認"""
        with pytest.raises(ValueError):
            MaskLogits(logits=np.zeros(4))


class TestClsSegmenter:
    """セグメンタのテスト"""

    @pytest.mark.parametrize("mechanism", ["replace_cls", "channel_attention", "spatial_attention", "vpt", "none"])
    def test_forward_every_mechanism(
        self, mechanism: str, tiny_config_dict: dict, vocabulary: Vocabulary, rng: np.random.Generator
    ) -> None:
        """全機構でロジット [B, H, W] と二値マスクが得られることを確認"""
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism=mechanism), vocabulary)
        images = rng.random((2, 3, 16, 16))
        assert segmenter(images, [0, 3]).shape == (2, 16, 16)
        masks = segmenter.predict_masks(images, [0, 3])
        assert len(masks) == 2
        assert masks[0].dtype == bool

    def test_only_selected_mechanism_built(self, tiny_config_dict: dict, vocabulary: Vocabulary) -> None:
        """選択した機構のモジュールだけが作られることを確認"""
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism="spatial_attention"), vocabulary)
        assert segmenter.spatial_attention is not None
        assert segmenter.navigator is None
        assert segmenter.channel_attention is None
        assert segmenter.prompt_tuning is None

    def test_category_changes_prediction(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """同じ画像でもカテゴリによってロジットが変わることを確認"""
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        image = np.random.default_rng(0).random((3, 16, 16))
        a = segmenter(image[None], [0]).data
        b = segmenter(image[None], [5]).data
        assert not np.allclose(a, b)

    def test_navigate_false_ignores_category(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """navigate=False では素のエンコーダ出力になることを確認"""
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        image = np.random.default_rng(0).random((3, 16, 16))
        _, a = segmenter.encode(image, [0], navigate=False)
        _, b = segmenter.encode(image, [5], navigate=False)
        np.testing.assert_allclose(a.data, b.data)

    def test_query_count_mismatch(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """画像数とクエリ数の不一致が ModelConfigError になることを確認"""
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        with pytest.raises(ModelConfigError):
            segmenter.encode(np.zeros((2, 3, 16, 16)), [0])

    def test_freeze_backbone(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """凍結後の学習対象が L^i とデコーダだけになることを確認"""
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        frozen = segmenter.freeze_backbone()
        assert all(name.startswith(("text_encoder.", "visual_encoder.")) for name in frozen)
        trainable = segmenter.trainable_parameters()
        assert trainable
        assert all(name.startswith(("navigator.", "decoder.")) for name in trainable)

    def test_training_step_leaves_backbone(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """逆伝播で凍結パラメータに勾配が入らないことを確認"""
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        segmenter.freeze_backbone()
        logits = segmenter(np.random.default_rng(1).random((2, 3, 16, 16)), [1, 2])
        backward(F.binary_cross_entropy_with_logits(logits, np.zeros((2, 16, 16))))
        assert all(p.grad is None for p in segmenter.visual_encoder.parameters())
        assert all(p.grad is not None for p in segmenter.trainable_parameters().values())

    def test_load_pretrained_from_dual_encoder(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """DualEncoder の state_dict をエンコーダに読み込めることを確認"""
        dual = DualEncoder(tiny_config, vocabulary)
        state = dual.state_dict()
        state["visual_encoder.cls_token"] = state["visual_encoder.cls_token"] + 1.0
        segmenter = build_segmenter(tiny_config, vocabulary, state)
        np.testing.assert_array_equal(segmenter.visual_encoder.cls_token.data, state["visual_encoder.cls_token"])

    def test_load_pretrained_missing_tensors(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """エンコーダの重みが欠けていると ModelConfigError になることを確認"""
        state = DualEncoder(tiny_config, vocabulary).state_dict()
        del state["text_encoder.cls_token"]
        with pytest.raises(ModelConfigError):
            build_segmenter(tiny_config, vocabulary, state)

    def test_same_seed_same_initialization(self, tiny_config: ExperimentConfig, vocabulary: Vocabulary) -> None:
        """同じシードのエンコーダ初期値が DualEncoder と一致することを確認"""
        dual = DualEncoder(tiny_config, vocabulary)
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        np.testing.assert_array_equal(dual.visual_encoder.pos_embed.data, segmenter.visual_encoder.pos_embed.data)


class TestComposedGradients:
    """エンコーダ・置換・デコーダ・BCE を通した勾配検査"""

    @pytest.mark.parametrize("seed", range(20))
    def test_full_forward_matches_finite_differences(
        self, seed: int, tiny_config: ExperimentConfig, vocabulary: Vocabulary
    ) -> None:
        """学習対象と凍結前のエンコーダ重みの解析勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        segmenter = ClsSegmenter(tiny_config, vocabulary)
        images = rng.random((2, 3, 16, 16))
        category_ids = [int(c) for c in rng.choice(len(vocabulary), size=2, replace=False)]
        masks = (rng.random((2, 16, 16)) > 0.5).astype(np.float64)
        named = dict(segmenter.named_parameters())
        picks = rng.choice(sorted(named), size=6, replace=False)
        tensors = [named[name] for name in picks]
        error = check_gradients(
            lambda: F.binary_cross_entropy_with_logits(segmenter(images, category_ids), masks),
            tensors,
            max_entries=3,
            rng=rng,
        )
        assert error < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("mechanism", ["channel_attention", "spatial_attention", "vpt", "none"])
    def test_every_mechanism_matches_finite_differences(
        self, mechanism: str, seed: int, tiny_config_dict: dict, vocabulary: Vocabulary
    ) -> None:
        """比較機構ごとに機構パラメータを含めた解析勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism=mechanism), vocabulary)
        images = rng.random((2, 3, 16, 16))
        category_ids = [int(c) for c in rng.choice(len(vocabulary), size=2, replace=False)]
        masks = (rng.random((2, 16, 16)) > 0.5).astype(np.float64)
        named = dict(segmenter.named_parameters())
        own = sorted(name for name in named if not name.startswith(("text_encoder.", "visual_encoder.", "decoder.")))
        rest = rng.choice(sorted(set(named) - set(own)), size=4, replace=False)
        tensors = [named[name] for name in [*own, *rest]]
        error = check_gradients(
            lambda: F.binary_cross_entropy_with_logits(segmenter(images, category_ids), masks),
            tensors,
            max_entries=3,
            rng=rng,
        )
        assert error < 1e-3


class TestMechanismGradients:
    """比較機構単体の勾配検査"""

    @staticmethod
    def _inputs(rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
        tokens = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
        text = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        target = Tensor(rng.normal(size=(2, 4, 8)))
        return tokens, text, target

    @pytest.mark.parametrize("seed", range(5))
    def test_channel_attention(self, seed: int) -> None:
        """チャネル注意のトークン・テキスト [CLS]・重みの勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        attention = ChannelAttention(8, rng)
        tokens, text, target = self._inputs(rng)
        error = check_gradients(
            lambda: F.sum(F.mul(attention(tokens, text), target)),
            [tokens, text, *attention.parameters()],
            max_entries=8,
            rng=rng,
        )
        assert error < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_spatial_attention(self, seed: int) -> None:
        """空間注意のトークン・テキスト [CLS]・重みの勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        attention = SpatialAttention(8, rng)
        tokens, text, target = self._inputs(rng)
        error = check_gradients(
            lambda: F.sum(F.mul(attention(tokens, text), target)),
            [tokens, text, *attention.parameters()],
            max_entries=8,
            rng=rng,
        )
        assert error < 1e-6

    @pytest.mark.parametrize("text_shift", [False, True])
    @pytest.mark.parametrize("seed", range(5))
    def test_deep_prompts_through_encoder(self, seed: int, text_shift: bool, tiny_config_dict: dict) -> None:
        """エンコーダを通したプロンプト（と条件付け射影）の勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        config = _config(tiny_config_dict, mechanism="vpt", vpt_text_shift=text_shift)
        encoder = VisualEncoder(config.visual, rng)
        tuning = VisualPromptTuning(config.visual, rng)
        images = rng.random((2, 3, 16, 16))
        text = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        target = Tensor(rng.normal(size=(2, 4, 16)))
        tensors = [*tuning.parameters(), text] if text_shift else tuning.parameters()
        error = check_gradients(
            lambda: F.sum(F.mul(encoder(images, deep_prompts=tuning.deep_prompts(text)).patch_tokens, target)),
            tensors,
            max_entries=4,
            rng=rng,
        )
        assert error < 1e-5


class TestPromptTuningIsolation:
    """VPT で勾配が届く範囲のテスト"""

    def test_prompts_only_by_default(self, tiny_config_dict: dict, vocabulary: Vocabulary) -> None:
        """既定の VPT ではプロンプトとデコーダだけが学習対象で、凍結側の勾配は None のままであることを確認"""
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism="vpt"), vocabulary)
        assert segmenter.prompt_tuning is not None
        assert segmenter.prompt_tuning.condition is None
        segmenter.freeze_backbone()
        trainable = segmenter.trainable_parameters()
        mechanism = sorted(name for name in trainable if name.startswith("prompt_tuning."))
        assert mechanism == [f"prompt_tuning.banks.{i}.prompts" for i in range(4)]
        assert all(name.startswith(("prompt_tuning.banks.", "decoder.")) for name in trainable)

        logits = segmenter(np.random.default_rng(2).random((2, 3, 16, 16)), [1, 4])
        backward(F.binary_cross_entropy_with_logits(logits, np.ones((2, 16, 16))))
        assert all(p.grad is None for p in segmenter.visual_encoder.parameters())
        assert all(p.grad is None for p in segmenter.text_encoder.parameters())
        assert all(p.grad is not None for p in trainable.values())
        assert all(np.any(segmenter.prompt_tuning.banks[i].prompts.grad != 0.0) for i in range(4))

    def test_text_shift_adds_condition(self, tiny_config_dict: dict, vocabulary: Vocabulary) -> None:
        """vpt_text_shift=True では条件付け射影も学習対象になり、カテゴリで予測が変わることを確認"""
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism="vpt", vpt_text_shift=True), vocabulary)
        segmenter.freeze_backbone()
        trainable = segmenter.trainable_parameters()
        assert {"prompt_tuning.condition.weight", "prompt_tuning.condition.bias"} <= set(trainable)
        assert all(name.startswith(("prompt_tuning.", "decoder.")) for name in trainable)

        image = np.random.default_rng(3).random((1, 3, 16, 16))
        assert not np.allclose(segmenter(image, [0]).data, segmenter(image, [5]).data)
        backward(F.binary_cross_entropy_with_logits(segmenter(image, [0]), np.ones((1, 16, 16))))
        assert all(p.grad is None for p in segmenter.visual_encoder.parameters())
        assert all(p.grad is not None for p in trainable.values())

    def test_pure_prompts_ignore_category(self, tiny_config_dict: dict, vocabulary: Vocabulary) -> None:
        """既定の VPT ではカテゴリを変えてもロジットが変わらないことを確認"""
        segmenter = ClsSegmenter(_config(tiny_config_dict, mechanism="vpt"), vocabulary)
        image = np.random.default_rng(4).random((1, 3, 16, 16))
        np.testing.assert_array_equal(segmenter(image, [0]).data, segmenter(image, [5]).data)
