"""テンソルと逆伝播テープ

全ての数値はfloat64。勾配は grad に累積され、ステップ間で明示的にゼロ化する。
"""
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from src.utils.error_handler import GradientError, ShapeMismatchError

ArrayLike = np.ndarray | float | int | Sequence[Any]


class Function:
    """微分可能な演算の基底クラス

    サブクラスは forward（numpy配列 → numpy配列）と backward（出力勾配 → 入力勾配のタプル）
    を実装する。backward は入力と同じ順序で勾配を返し、不要な入力には None を返してよい。
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)

    @property
    def name(self) -> str:
        return type(self).__name__


class Tensor:
    """自動微分対応の密テンソル"""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
        _ctx: Function | None = None,
    ):
        array = np.asarray(data, dtype=np.float64)
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatchError(
                f"Tensor extents must be >= 1, got {array.shape}", shapes=(array.shape,)
            )
        self.data = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._ctx = _ctx

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(
                f"item() requires a single-element tensor, got {self.shape}",
                shapes=(self.shape,),
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeMismatchError(
                f"Gradient shape {grad.shape} does not match tensor shape {self.shape}",
                shapes=(grad.shape, self.shape),
            )
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, tape: "ComputationTape | None" = None) -> None:
        backward(self, tape)

    # 演算子
    def __add__(self, other: "Tensor") -> "Tensor":
        from src.tensor import functional as F

        return F.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from src.tensor import functional as F

        return F.add(self, F.scale(other, -1.0))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        from src.tensor import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from src.tensor import functional as F

        return F.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from src.tensor import functional as F

        return F.matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        from src.tensor import functional as F

        return F.sum(self, axis=axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        from src.tensor import functional as F

        return F.mean(self, axis=axis)


@dataclass
class TapeEntry:
    """テープ上の1演算（出力テンソルと、それを作った演算）"""

    output: Tensor
    function: Function | None


@dataclass
class ComputationTape:
    """トポロジカル順に並んだ演算記録"""

    entries: list[TapeEntry] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        """root から到達可能な requires_grad テンソルをトポロジカル順に並べる"""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        return cls([TapeEntry(output=t, function=t._ctx) for t in order])

    def tensors(self) -> Iterable[Tensor]:
        return (entry.output for entry in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, tape: ComputationTape | None = None) -> ComputationTape:
    """スカラー損失から逆伝播し、テープ上の requires_grad テンソルに grad を累積する"""
    if loss.ndim != 0:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    tape = tape or ComputationTape.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for entry in reversed(tape.entries):
        node = entry.output
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.accumulate_grad(grad)
        if entry.function is None:
            continue

        input_grads = entry.function.backward(grad)
        for parent, parent_grad in zip(entry.function.inputs, input_grads, strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    return tape
