"""微分可能なプリミティブ演算

ブロードキャストは最終軸へのバイアス加算のみ許可し、それ以外の形状不一致はエラーにする。
トークン軸方向の複製は repeat で明示的に行う。
"""
import math

import einops
import numpy as np
from scipy.special import expit, log_softmax

from src.tensor.core import Function, Tensor
from src.utils.error_handler import DegenerateInputError, ShapeMismatchError


def _require(condition: bool, message: str, *shapes: tuple[int, ...]) -> None:
    if not condition:
        raise ShapeMismatchError(message, shapes=shapes)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"axis {axis} is invalid for a {ndim}-d tensor")
    return axis % ndim


def _reduce_to_bias(grad: np.ndarray, width: int) -> np.ndarray:
    return grad.reshape(-1, width).sum(axis=0)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.bias = a.shape != b.shape
        if self.bias:
            _require(
                b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1],
                f"Shape mismatch in add: {a.shape} and {b.shape}",
                a.shape,
                b.shape,
            )
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.bias:
            return grad, _reduce_to_bias(grad, grad.shape[-1])
        return grad, grad


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _require(a.shape == b.shape, f"Shape mismatch in mul: {a.shape} and {b.shape}", a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a: np.ndarray, factor: float) -> np.ndarray:
        self.factor = factor
        return a * factor

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.factor,)


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _require(
            a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2],
            f"Shape mismatch in matmul: {a.shape} and {b.shape}",
            a.shape,
            b.shape,
        )
        _require(
            b.ndim == 2 or a.shape[:-2] == b.shape[:-2],
            f"Shape mismatch in matmul batch dims: {a.shape} and {b.shape}",
            a.shape,
            b.shape,
        )
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.a, self.b
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return grad_a, grad_b


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = _normalize_axis(axis, x.ndim)
        shifted = x - x.max(axis=self.axis, keepdims=True)
        exps = np.exp(shifted)
        self.out = exps / exps.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(
        self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
    ) -> np.ndarray:
        _require(
            gamma.shape == (x.shape[-1],) and beta.shape == (x.shape[-1],),
            f"Shape mismatch in layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}",
            x.shape,
            gamma.shape,
            beta.shape,
        )
        if eps <= 0:
            raise DegenerateInputError(f"layer_norm eps must be > 0, got {eps}", step="tensor")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered**2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        width = grad.shape[-1]
        grad_gamma = _reduce_to_bias(grad * self.x_hat, width)
        grad_beta = _reduce_to_bias(grad, width)
        g_hat = grad * self.gamma
        grad_x = self.inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - self.x_hat * (g_hat * self.x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """GELU（tanh近似）"""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        x, t = self.x, self.t
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = expit(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out * (1.0 - self.out),)


class Embedding(Function):
    def forward(self, weight: np.ndarray, ids: np.ndarray) -> np.ndarray:
        if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
            raise ShapeMismatchError(
                f"Embedding ids out of range [0, {weight.shape[0]})", shapes=(weight.shape,)
            )
        self.ids = ids
        self.weight_shape = weight.shape
        return weight[ids]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        grad_weight = np.zeros(self.weight_shape)
        np.add.at(grad_weight, self.ids, grad)
        return (grad_weight,)


class CrossEntropy(Function):
    """softmax交差エントロピー（バッチ平均）"""

    def forward(self, logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
        _require(
            logits.ndim == 2 and targets.shape == (logits.shape[0],),
            f"Shape mismatch in cross_entropy: logits {logits.shape}, targets {targets.shape}",
            logits.shape,
            targets.shape,
        )
        log_probs = log_softmax(logits, axis=-1)
        rows = np.arange(logits.shape[0])
        self.probs = np.exp(log_probs)
        self.targets = targets
        return np.asarray(-log_probs[rows, targets].mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        batch = self.probs.shape[0]
        grad_logits = self.probs.copy()
        grad_logits[np.arange(batch), self.targets] -= 1.0
        return (grad * grad_logits / batch,)


class BinaryCrossEntropyWithLogits(Function):
    """画素ごとのBCE（全要素平均）"""

    def forward(self, logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
        _require(
            logits.shape == targets.shape,
            f"Shape mismatch in bce: logits {logits.shape}, targets {targets.shape}",
            logits.shape,
            targets.shape,
        )
        self.logits, self.targets = logits, targets
        losses = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray(losses.mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (expit(self.logits) - self.targets) / self.logits.size,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = _normalize_axis(axis, arrays[0].ndim)
        reference = arrays[0].shape
        for array in arrays[1:]:
            _require(
                array.ndim == len(reference)
                and all(
                    s == r for i, (s, r) in enumerate(zip(array.shape, reference, strict=True)) if i != self.axis
                ),
                f"Shape mismatch in concat: {reference} and {array.shape}",
                reference,
                array.shape,
            )
        self.sizes = [array.shape[self.axis] for array in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Slice(Function):
    def forward(self, x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
        self.axis = _normalize_axis(axis, x.ndim)
        _require(
            0 <= start < stop <= x.shape[self.axis],
            f"Invalid slice [{start}, {stop}) for axis of length {x.shape[self.axis]}",
            x.shape,
        )
        self.input_shape = x.shape
        self.index = tuple(
            slice(start, stop) if i == self.axis else slice(None) for i in range(x.ndim)
        )
        return x[self.index]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        grad_x = np.zeros(self.input_shape)
        grad_x[self.index] = grad
        return (grad_x,)


class Sum(Function):
    def forward(self, x: np.ndarray, axis: int | None) -> np.ndarray:
        self.input_shape = x.shape
        self.axis = None if axis is None else _normalize_axis(axis, x.ndim)
        return np.asarray(x.sum(axis=self.axis))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.input_shape).copy(),)


class Rearrange(Function):
    """einops.rearrange（逆パターンで勾配を戻す）"""

    def forward(self, x: np.ndarray, pattern: str, sizes: dict[str, int]) -> np.ndarray:
        left, right = pattern.split("->")
        self.inverse = f"{right.strip()} -> {left.strip()}"
        self.sizes = sizes
        return einops.rearrange(x, pattern, **sizes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (einops.rearrange(grad, self.inverse, **self.sizes),)


class Repeat(Function):
    """einops.repeat（勾配は複製軸で総和）"""

    def forward(self, x: np.ndarray, pattern: str, sizes: dict[str, int]) -> np.ndarray:
        left, right = pattern.split("->")
        self.inverse = f"{right.strip()} -> {left.strip()}"
        self.sizes = sizes
        return einops.repeat(x, pattern, **sizes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (einops.reduce(grad, self.inverse, "sum", **self.sizes),)


class L2Normalize(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.norm = np.sqrt((x**2).sum(axis=-1, keepdims=True))
        if np.any(self.norm == 0.0):
            raise DegenerateInputError("Cannot L2-normalize a zero vector", step="tensor")
        self.out = x / self.norm
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.out
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)


# 関数API


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return Embedding.apply(weight, ids=np.asarray(ids, dtype=np.int64))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return CrossEntropy.apply(logits, targets=np.asarray(targets, dtype=np.int64))


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    return BinaryCrossEntropyWithLogits.apply(
        logits, targets=np.asarray(targets, dtype=np.float64)
    )


def concat(tensors: list[Tensor], axis: int = -2) -> Tensor:
    """トークン軸（既定: 後ろから2番目）で連結"""
    return Concat.apply(*tensors, axis=axis)


def slice_tokens(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    """トークン軸で [start, stop) を切り出す"""
    return Slice.apply(x, axis=axis, start=start, stop=stop)


def sum(x: Tensor, axis: int | None = None) -> Tensor:
    return Sum.apply(x, axis=axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[_normalize_axis(axis, x.ndim)]
    return scale(Sum.apply(x, axis=axis), 1.0 / count)


def rearrange(x: Tensor, pattern: str, **sizes: int) -> Tensor:
    return Rearrange.apply(x, pattern=pattern, sizes=sizes)


def repeat(x: Tensor, pattern: str, **sizes: int) -> Tensor:
    return Repeat.apply(x, pattern=pattern, sizes=sizes)


def l2_normalize(x: Tensor) -> Tensor:
    return L2Normalize.apply(x)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor
) -> tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d)) V

    Returns:
        tuple: (出力, 注意重み)
    """
    _require(
        q.shape == k.shape and k.shape[:-1] == v.shape[:-1],
        f"Shape mismatch in attention: q {q.shape}, k {k.shape}, v {v.shape}",
        q.shape,
        k.shape,
        v.shape,
    )
    scores = scale(matmul(q, rearrange(k, "... t e -> ... e t")), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights
