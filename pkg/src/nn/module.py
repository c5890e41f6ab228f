"""パラメータ管理（Module / Parameter）"""
from collections.abc import Iterator

import numpy as np

from src.tensor.core import Tensor
from src.utils.error_handler import CheckpointError


class Parameter(Tensor):
    """学習可能パラメータ"""

    def __init__(self, data: np.ndarray, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """パラメータと子モジュールを属性として保持するコンテナ

    属性の定義順がパラメータ名の順序になる。
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")

    def parameters(self) -> list[Parameter]:
        return [param for _, param in self.named_parameters()]

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def freeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None
        return self

    def unfreeze(self) -> "Module":
        for param in self.parameters():
            param.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            if param.requires_grad:
                param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise CheckpointError(
                    f"State dict mismatch: missing={missing[:5]}, unexpected={unexpected[:5]}"
                )
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(
                    f"Shape mismatch for '{name}': checkpoint {value.shape}, model {param.shape}"
                )
            param.data = value.copy()

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())


class ModuleList(Module):
    """子モジュールの列（名前は添字）"""

    def __init__(self, modules: list[Module]):
        for index, module in enumerate(modules):
            setattr(self, str(index), module)
        self._length = len(modules)

    def __len__(self) -> int:
        return self._length

    def __getitem__(self, index: int) -> Module:
        if not -self._length <= index < self._length:
            raise IndexError(index)
        return getattr(self, str(index % self._length))

    def __iter__(self) -> Iterator[Module]:
        return (getattr(self, str(i)) for i in range(self._length))
