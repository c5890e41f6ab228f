"""テンソル・自動微分のテスト"""
import numpy as np
import pytest

from src.tensor import functional as F
from src.tensor.core import ComputationTape, Tensor, backward
from src.tensor.gradcheck import check_gradients, max_relative_error
from src.tensor.serialization import decode_tensor, encode_tensor, read_tensors, write_tensors
from src.utils.error_handler import (
    CheckpointError,
    DegenerateInputError,
    GradientError,
    ShapeMismatchError,
)

TOLERANCE = 1e-6


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTensor:
    """Tensor 本体のテスト"""

    def test_float64_storage(self) -> None:
        """整数入力も float64 で保持されることを確認"""
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64
        assert t.shape == (3,)

    def test_zero_extent_rejected(self) -> None:
        """長さ0の軸を持つテンソルが拒否されることを確認"""
        with pytest.raises(ShapeMismatchError):
            Tensor(np.zeros((0, 3)))

    def test_item_requires_single_element(self) -> None:
        """item() が1要素以外で失敗することを確認"""
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(ShapeMismatchError):
            Tensor([1.0, 2.0]).item()

    def test_operators(self) -> None:
        """演算子が functional に委譲されることを確認"""
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).data, [4.0, 7.0])
        np.testing.assert_allclose((b - a).data, [2.0, 3.0])
        np.testing.assert_allclose((a * b).data, [3.0, 10.0])
        np.testing.assert_allclose((2.0 * a).data, [2.0, 4.0])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])

    def test_detach_drops_graph(self) -> None:
        """detach が勾配追跡を切ることを確認"""
        a = Tensor([1.0], requires_grad=True)
        detached = (a * 2.0).detach()
        assert not detached.requires_grad
        assert detached.is_leaf


class TestBackward:
    """逆伝播のテスト"""

    def test_requires_scalar_loss(self) -> None:
        """非スカラー損失で GradientError になることを確認"""
        a = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError):
            backward(a * 2.0)

    def test_requires_grad_path(self) -> None:
        """勾配不要な損失で GradientError になることを確認"""
        with pytest.raises(GradientError):
            backward(F.sum(Tensor([1.0, 2.0])))

    def test_gradients_accumulate(self) -> None:
        """2回の逆伝播で grad が累積されることを確認"""
        a = Tensor([1.0, 2.0], requires_grad=True)
        backward(F.sum(F.scale(a, 3.0)))
        backward(F.sum(F.scale(a, 3.0)))
        np.testing.assert_allclose(a.grad, [6.0, 6.0])

    def test_intermediate_gradients(self) -> None:
        """requires_grad な中間テンソルにも勾配が入ることを確認"""
        a = Tensor([1.0, -2.0], requires_grad=True)
        hidden = F.scale(a, 2.0)
        backward(F.sum(F.mul(hidden, hidden)))
        np.testing.assert_allclose(hidden.grad, 2.0 * hidden.data)
        np.testing.assert_allclose(a.grad, 8.0 * a.data)

    def test_shared_input_summed(self) -> None:
        """同じテンソルを2回使うと勾配が合算されることを確認"""
        a = Tensor([3.0], requires_grad=True)
        backward(F.sum(F.add(a, a)))
        np.testing.assert_allclose(a.grad, [2.0])

    def test_frozen_tensor_untouched(self) -> None:
        """requires_grad=False のテンソルには勾配が入らないことを確認"""
        a = Tensor([1.0, 2.0], requires_grad=True)
        frozen = Tensor([5.0, 7.0])
        backward(F.sum(F.mul(a, frozen)))
        assert frozen.grad is None
        np.testing.assert_allclose(a.grad, [5.0, 7.0])

    def test_tape_topological_order(self) -> None:
        """テープが入力から損失へのトポロジカル順であることを確認"""
        a = Tensor([1.0], requires_grad=True)
        b = F.scale(a, 2.0)
        loss = F.sum(b)
        tape = ComputationTape.trace(loss)
        order = list(tape.tensors())
        assert order.index(a) < order.index(b) < order.index(loss)
        assert len(tape) == 3


class TestShapeRules:
    """形状規則のテスト"""

    def test_bias_broadcast_only(self) -> None:
        """最終軸のバイアス加算以外のブロードキャストを拒否することを確認"""
        x = Tensor(np.ones((2, 3)))
        F.add(x, Tensor(np.ones(3)))
        with pytest.raises(ShapeMismatchError):
            F.add(x, Tensor(np.ones((1, 3))))
        with pytest.raises(ShapeMismatchError):
            F.add(x, Tensor(np.ones(2)))

    def test_matmul_batch_dims(self) -> None:
        """バッチ付き行列積は先頭軸一致か2次元右辺のみ許すことを確認"""
        a = Tensor(np.ones((2, 3, 4)))
        assert F.matmul(a, Tensor(np.ones((4, 5)))).shape == (2, 3, 5)
        assert F.matmul(a, Tensor(np.ones((2, 4, 5)))).shape == (2, 3, 5)
        with pytest.raises(ShapeMismatchError):
            F.matmul(a, Tensor(np.ones((1, 4, 5))))
        with pytest.raises(ShapeMismatchError):
            F.matmul(a, Tensor(np.ones((3, 5))))

    def test_mul_requires_same_shape(self) -> None:
        """要素積は同形状のみを許すことを確認"""
        with pytest.raises(ShapeMismatchError):
            F.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_invalid_slice(self) -> None:
        """範囲外のスライスが拒否されることを確認"""
        with pytest.raises(ShapeMismatchError):
            F.slice_tokens(Tensor(np.ones((1, 4, 2))), 2, 5, axis=1)

    def test_cross_entropy_shapes(self) -> None:
        """交差エントロピーの形状検査を確認"""
        with pytest.raises(ShapeMismatchError):
            F.cross_entropy(Tensor(np.ones((2, 3))), np.array([0, 1, 2]))


class TestForwardValues:
    """順伝播の値のテスト"""

    def test_softmax_rows_sum_to_one(self, rng: np.random.Generator) -> None:
        """softmax の行和が1であることを確認"""
        out = F.softmax(Tensor(rng.normal(size=(3, 5)) * 50.0), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3))

    def test_layer_norm_statistics(self, rng: np.random.Generator) -> None:
        """layer_norm 出力が平均0・分散1になることを確認"""
        out = F.layer_norm(Tensor(rng.normal(size=(4, 8)) * 3.0 + 2.0), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4), atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(4), atol=1e-3)

    def test_layer_norm_eps_must_be_positive(self) -> None:
        """eps <= 0 が退化入力として拒否されることを確認"""
        with pytest.raises(DegenerateInputError):
            F.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_l2_normalize_zero_vector(self) -> None:
        """ゼロベクトルの正規化が拒否されることを確認"""
        with pytest.raises(DegenerateInputError):
            F.l2_normalize(Tensor(np.zeros((1, 3))))

    def test_cross_entropy_uniform(self) -> None:
        """一様ロジットの交差エントロピーが log(C) になることを確認"""
        loss = F.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_bce_matches_formula(self) -> None:
        """BCE が数値的に安定な式と一致することを確認"""
        logits = np.array([[-30.0, 0.0], [2.0, 30.0]])
        targets = np.array([[0.0, 1.0], [1.0, 1.0]])
        expected = np.mean(np.logaddexp(0.0, logits) - logits * targets)
        loss = F.binary_cross_entropy_with_logits(Tensor(logits), targets)
        assert loss.item() == pytest.approx(expected)

    def test_attention_weights_are_distributions(self, rng: np.random.Generator) -> None:
        """注意重みが確率分布になることを確認"""
        q = Tensor(rng.normal(size=(2, 3, 5, 4)))
        out, weights = F.scaled_dot_product_attention(q, q, q)
        assert out.shape == (2, 3, 5, 4)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((2, 3, 5)))


class TestGradients:
    """中心差分による勾配検査"""

    @pytest.mark.parametrize(
        "build",
        [
            pytest.param(lambda a, b, w: F.sum(F.mul(F.add(a, b), a)), id="add_mul"),
            pytest.param(lambda a, b, w: F.mean(F.matmul(a, w)), id="matmul"),
            pytest.param(lambda a, b, w: F.sum(F.mul(F.softmax(a, axis=-1), b)), id="softmax"),
            pytest.param(lambda a, b, w: F.sum(F.mul(F.gelu(a), b)), id="gelu"),
            pytest.param(lambda a, b, w: F.sum(F.mul(F.sigmoid(a), b)), id="sigmoid"),
            pytest.param(lambda a, b, w: F.sum(F.mul(F.l2_normalize(a), b)), id="l2_normalize"),
            pytest.param(
                lambda a, b, w: F.sum(F.mul(F.rearrange(a, "b n d -> b d n"), F.rearrange(b, "b n d -> b d n"))),
                id="rearrange",
            ),
            pytest.param(
                lambda a, b, w: F.sum(F.mul(F.concat([a, b], axis=1), F.concat([b, a], axis=1))),
                id="concat",
            ),
            pytest.param(
                lambda a, b, w: F.sum(F.mul(F.slice_tokens(a, 1, 3, axis=1), F.slice_tokens(b, 0, 2, axis=1))),
                id="slice",
            ),
        ],
    )
    @pytest.mark.parametrize("seed", range(20))
    def test_elementwise_and_structural(self, build, seed: int) -> None:
        """基本演算の解析勾配が中心差分と一致することを確認"""
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 2, 3, 4)
        b = _leaf(rng, 2, 3, 4)
        w = _leaf(rng, 4, 2)
        error = check_gradients(lambda: build(a, b, w), [a, b, w])
        assert error < TOLERANCE

    def test_layer_norm_gradients(self, rng: np.random.Generator) -> None:
        """layer_norm の入力・gamma・beta の勾配を確認"""
        x = _leaf(rng, 2, 3, 5)
        gamma = _leaf(rng, 5)
        beta = _leaf(rng, 5)
        target = rng.normal(size=(2, 3, 5))
        error = check_gradients(
            lambda: F.sum(F.mul(F.layer_norm(x, gamma, beta), Tensor(target))), [x, gamma, beta]
        )
        assert error < TOLERANCE

    def test_bias_add_gradient(self, rng: np.random.Generator) -> None:
        """バイアス加算の勾配が行方向に総和されることを確認"""
        x = _leaf(rng, 2, 3, 4)
        bias = _leaf(rng, 4)
        error = check_gradients(lambda: F.sum(F.mul(F.add(x, bias), F.add(x, bias))), [x, bias])
        assert error < TOLERANCE

    def test_embedding_gradient(self, rng: np.random.Generator) -> None:
        """埋め込み表の重複参照で勾配が合算されることを確認"""
        weight = _leaf(rng, 5, 3)
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        target = Tensor(rng.normal(size=(2, 3, 3)))
        error = check_gradients(lambda: F.sum(F.mul(F.embedding(weight, ids), target)), [weight])
        assert error < TOLERANCE

    def test_loss_gradients(self, rng: np.random.Generator) -> None:
        """交差エントロピーと BCE の勾配を確認"""
        logits = _leaf(rng, 4, 3)
        targets = np.array([0, 2, 1, 2])
        assert check_gradients(lambda: F.cross_entropy(logits, targets), [logits]) < TOLERANCE

        pixel_logits = _leaf(rng, 2, 4, 4)
        masks = (rng.random((2, 4, 4)) > 0.5).astype(np.float64)
        assert (
            check_gradients(lambda: F.binary_cross_entropy_with_logits(pixel_logits, masks), [pixel_logits])
            < TOLERANCE
        )

    def test_repeat_gradient(self, rng: np.random.Generator) -> None:
        """repeat の勾配が複製軸で総和されることを確認"""
        x = _leaf(rng, 3)
        target = Tensor(rng.normal(size=(2, 4, 3)))
        assert check_gradients(lambda: F.sum(F.mul(F.repeat(x, "d -> b n d", b=2, n=4), target)), [x]) < TOLERANCE

    def test_attention_gradient(self, rng: np.random.Generator) -> None:
        """scaled dot-product attention の勾配を確認"""
        q = _leaf(rng, 1, 2, 3, 4)
        k = _leaf(rng, 1, 2, 3, 4)
        v = _leaf(rng, 1, 2, 3, 4)
        error = check_gradients(lambda: F.sum(F.mul(F.scaled_dot_product_attention(q, k, v)[0], v)), [q, k, v])
        assert error < TOLERANCE

    def test_max_relative_error_scale(self) -> None:
        """相対誤差がベクトル全体の最大値で正規化されることを確認"""
        assert max_relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.001])) == pytest.approx(0.001)
        assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestSerialization:
    """テンソルバイナリのテスト"""

    def test_record_layout(self) -> None:
        """レコードが rank・extents・payload の順であることを確認"""
        record = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert len(record) == 4 + 8 * 2 + 8 * 6
        array, end = decode_tensor(record, 0)
        assert end == len(record)
        np.testing.assert_array_equal(array, np.arange(6).reshape(2, 3))

    def test_scalar_record(self) -> None:
        """0次元テンソルも書き出せることを確認"""
        array, end = decode_tensor(encode_tensor(np.asarray(3.5)), 0)
        assert array.shape == ()
        assert float(array) == 3.5
        assert end == 12

    def test_file_round_trip(self, tmp_path, rng: np.random.Generator) -> None:
        """名前順に書き出した表から同じ値が読めることを確認"""
        tensors = {"b": rng.normal(size=(2, 2)), "a": rng.normal(size=(3,))}
        entries = write_tensors(tmp_path / "t.bin", tensors)
        assert list(entries) == ["a", "b"]
        assert entries["a"].offset == 0
        loaded = read_tensors(tmp_path / "t.bin", entries)
        for name, value in tensors.items():
            np.testing.assert_array_equal(loaded[name], value)

    def test_truncated_file(self, tmp_path, rng: np.random.Generator) -> None:
        """途中で切れたファイルが CheckpointError になることを確認"""
        entries = write_tensors(tmp_path / "t.bin", {"w": rng.normal(size=(4, 4))})
        data = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            read_tensors(tmp_path / "t.bin", entries)

    def test_missing_file(self, tmp_path) -> None:
        """ファイル欠落が CheckpointError になることを確認"""
        with pytest.raises(CheckpointError):
            read_tensors(tmp_path / "missing.bin", {})
