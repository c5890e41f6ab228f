"""ログ管理（コンソールログと学習ログ）"""
import json
import logging
import sys
from pathlib import Path
from typing import Any

from src.config import get_config
from src.utils.time_utils import now_local

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s%(step_tag)s"


class StepTagFilter(logging.Filter):
    """extra={"step": ...} で渡されたステップ名を [step] として末尾に付ける"""

    def filter(self, record: logging.LogRecord) -> bool:
        step = getattr(record, "step", None)
        record.step_tag = f" [{step}]" if step else ""
        return True


class ColoredFormatter(logging.Formatter):
    """レベル名だけを色付けするフォーマッター"""

    reset = "\x1b[0m"

    COLORS = {
        logging.DEBUG: "\x1b[38;21m",
        logging.INFO: "\x1b[38;5;39m",
        logging.WARNING: "\x1b[38;5;226m",
        logging.ERROR: "\x1b[38;5;196m",
        logging.CRITICAL: "\x1b[31;1m",
    }

    def format(self, record: logging.LogRecord) -> str:
        color = self.COLORS.get(record.levelno, self.COLORS[logging.DEBUG])
        original = record.levelname
        record.levelname = f"{color}{original}{self.reset}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


def setup_logger(name: str, level: str | None = None) -> logging.Logger:
    """ロガーをセットアップ（開発環境ではカラー表示）"""
    config = get_config()
    log_level = getattr(logging, (level or config.log_level).upper())

    logger = logging.getLogger(name)
    logger.setLevel(log_level)
    logger.handlers = []

    handler = logging.StreamHandler(sys.stdout)
    handler.setLevel(log_level)
    handler.addFilter(StepTagFilter())
    formatter_class = ColoredFormatter if config.is_development() else logging.Formatter
    handler.setFormatter(formatter_class(LOG_FORMAT))
    logger.addHandler(handler)

    # 重複ログ防止
    logger.propagate = False
    return logger


def get_logger(name: str) -> logging.Logger:
    """ロガーを取得（設定済みならそのまま返す）"""
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    return setup_logger(name)


class JsonLinesWriter:
    """学習ログ（JSON-lines）の書き出し

    タイムスタンプはこのログにのみ記録し、チェックポイントや結果CSVには含めない。
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, **record: Any) -> dict[str, Any]:
        """1レコード追記"""
        entry = {"timestamp": now_local().isoformat(), **record}
        self.records.append(entry)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry, ensure_ascii=False, default=str) + "\n")
        return entry
