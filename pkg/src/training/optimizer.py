"""AdamW とウォームリスタート付きコサインアニーリング"""
import math

import numpy as np
from pydantic import Field

from src.config import TrainConfig
from src.models import ArrayModel
from src.nn.module import Parameter
from src.utils.error_handler import GradientError, ModelConfigError, ShapeMismatchError


class CosineWarmRestarts:
    """SGDR: 周期ごとに base_lr へ戻るコサインスケジュール（ステップ単位）"""

    def __init__(self, base_lr: float, min_lr: float, period: int, mult: int = 1):
        if period < 1 or mult < 1:
            raise ModelConfigError("restart period and multiplier must be >= 1")
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.period = period
        self.mult = mult

    def cycle_position(self, step: int) -> tuple[int, int]:
        """(周期内の位置, 周期長)"""
        length = self.period
        while step >= length:
            step -= length
            length *= self.mult
        return step, length

    def __call__(self, step: int) -> float:
        position, length = self.cycle_position(step)
        return self.min_lr + (self.base_lr - self.min_lr) * (1 + math.cos(math.pi * position / length)) / 2


def schedule_for(cfg: TrainConfig, steps_per_epoch: int) -> CosineWarmRestarts:
    """restart_period（epoch）をステップに換算したスケジュール"""
    return CosineWarmRestarts(
        cfg.learning_rate,
        cfg.min_learning_rate,
        period=cfg.restart_period * max(1, steps_per_epoch),
        mult=cfg.restart_mult,
    )


class AdamState(ArrayModel):
    """パラメータごとの1次/2次モーメント"""

    step: int = 0
    first: dict[str, np.ndarray] = Field(default_factory=dict)
    second: dict[str, np.ndarray] = Field(default_factory=dict)


def optimizer_step(
    params: dict[str, Parameter],
    state: AdamState,
    cfg: TrainConfig,
    lr: float,
) -> AdamState:
    """分離型weight decayのAdam更新（params.data を上書き）"""
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeMismatchError(
                f"Gradient shape {grad.shape} does not match parameter '{name}' {param.shape}",
                shapes=(grad.shape, param.shape),
            )
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"Non-finite gradient in parameter '{name}'", parameter=name)

    step = state.step + 1
    bias1 = 1.0 - cfg.beta1**step
    bias2 = 1.0 - cfg.beta2**step
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        first = state.first.get(name, np.zeros_like(param.data))
        second = state.second.get(name, np.zeros_like(param.data))
        first = cfg.beta1 * first + (1.0 - cfg.beta1) * grad
        second = cfg.beta2 * second + (1.0 - cfg.beta2) * grad**2
        update = (first / bias1) / (np.sqrt(second / bias2) + cfg.adam_eps)
        param.data = param.data - lr * (update + cfg.weight_decay * param.data)
        state.first[name] = first
        state.second[name] = second
    state.step = step
    return state


class AdamW:
    """AdamW + CosineWarmRestarts"""

    def __init__(self, params: dict[str, Parameter], cfg: TrainConfig, steps_per_epoch: int = 1):
        self.params = params
        self.cfg = cfg
        self.schedule = schedule_for(cfg, steps_per_epoch)
        self.state = AdamState()

    @property
    def lr(self) -> float:
        return self.schedule(self.state.step)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> float:
        """1ステップ更新し、使った学習率を返す"""
        lr = self.lr
        optimizer_step(self.params, self.state, self.cfg, lr)
        return lr
