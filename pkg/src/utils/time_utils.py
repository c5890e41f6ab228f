"""時刻関連ユーティリティ"""
from datetime import datetime

import pytz

from src.config import get_config


def get_local_timezone() -> pytz.BaseTzInfo:
    """設定されたタイムゾーンを取得"""
    return pytz.timezone(get_config().timezone)


def now_local() -> datetime:
    """現在時刻（設定タイムゾーン）"""
    return datetime.now(get_local_timezone())


def format_elapsed(seconds: float) -> str:
    """経過秒数を h:mm:ss 形式に整形"""
    total = int(round(seconds))
    hours, rest = divmod(total, 3600)
    minutes, secs = divmod(rest, 60)
    return f"{hours}:{minutes:02d}:{secs:02d}"
