"""中心差分による勾配検査"""
from collections.abc import Callable, Sequence

import numpy as np

from src.tensor.core import Tensor, backward


def analytic_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """逆伝播で得た勾配（各テンソルの grad をゼロ化してから計算）"""
    for tensor in tensors:
        tensor.grad = None
    backward(loss_fn())
    return [
        tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        for tensor in tensors
    ]


def numerical_gradient(
    loss_fn: Callable[[], Tensor],
    tensor: Tensor,
    eps: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> dict[tuple[int, ...], float]:
    """指定要素の中心差分勾配"""
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))

    estimates: dict[tuple[int, ...], float] = {}
    for index in indices:
        original = tensor.data[index]
        tensor.data[index] = original + eps
        plus = loss_fn().item()
        tensor.data[index] = original - eps
        minus = loss_fn().item()
        tensor.data[index] = original
        estimates[tuple(index)] = (plus - minus) / (2.0 * eps)
    return estimates


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(|a|, |n|) をベクトル全体で評価"""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale < 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """解析勾配と中心差分の最大相対誤差（テンソルごとの最大値）

    max_entries を指定すると各テンソルからその数の要素を無作為抽出して検査する。
    """
    rng = rng or np.random.default_rng(0)
    analytic = analytic_gradients(loss_fn, tensors)

    worst = 0.0
    for tensor, grad in zip(tensors, analytic, strict=True):
        all_indices = list(np.ndindex(*tensor.shape))
        if max_entries is not None and len(all_indices) > max_entries:
            picks = rng.choice(len(all_indices), size=max_entries, replace=False)
            indices = [all_indices[i] for i in sorted(picks)]
        else:
            indices = all_indices
        numeric = numerical_gradient(loss_fn, tensor, eps=eps, indices=indices)
        a = np.array([grad[index] for index in indices])
        n = np.array([numeric[tuple(index)] for index in indices])
        worst = max(worst, max_relative_error(a, n))
    return worst
