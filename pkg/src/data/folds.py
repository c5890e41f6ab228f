"""カテゴリのfold分割（帰納的ゼロショットプロトコル）"""
from collections.abc import Sequence

from src.models import FoldSplit
from src.utils.error_handler import ConfigValidationError


def build_folds(categories: Sequence[int], n_folds: int = 4) -> list[FoldSplit]:
    """fold i の unseen = categories[i·k:(i+1)·k]、seen = 残り"""
    if n_folds < 1 or len(categories) % n_folds != 0:
        raise ConfigValidationError(
            f"{len(categories)} categories cannot be split into {n_folds} folds",
            pointer="/synth/n_folds",
        )
    k = len(categories) // n_folds
    folds = []
    for fold_id in range(n_folds):
        unseen = list(categories[fold_id * k : (fold_id + 1) * k])
        seen = [c for c in categories if c not in unseen]
        folds.append(FoldSplit(fold_id=fold_id, seen=seen, unseen=unseen))
    return folds


def fold_for(folds: list[FoldSplit], fold_id: int) -> FoldSplit:
    for fold in folds:
        if fold.fold_id == fold_id:
            return fold
    raise ConfigValidationError(f"Fold {fold_id} does not exist ({len(folds)} folds)", pointer="/fold")
