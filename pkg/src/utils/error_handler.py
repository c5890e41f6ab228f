"""エラーハンドリング"""
import traceback
from uuid import uuid4

from src.models import ProcessingError
from src.utils.logger import get_logger

logger = get_logger(__name__)


class ClsNavError(Exception):
    """ClsNav システム基底例外"""

    def __init__(self, message: str, step: str = "unknown", run_id: str | None = None):
        super().__init__(message)
        self.message = message
        self.step = step
        self.run_id = run_id or str(uuid4())


class ShapeMismatchError(ClsNavError):
    """テンソル形状の不一致"""

    def __init__(self, message: str, shapes: tuple[tuple[int, ...], ...] = ()):
        super().__init__(message, step="tensor")
        self.shapes = shapes


class GradientError(ClsNavError):
    """勾配・損失の異常（非スカラー損失、NaN/Inf）"""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message, step="autodiff")
        self.parameter = parameter


class ModelConfigError(ClsNavError):
    """モデル構成エラー（機構と設定の不整合など）"""

    def __init__(self, message: str):
        super().__init__(message, step="model")


class ConfigValidationError(ClsNavError):
    """実験設定のスキーマ違反"""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message, step="config")
        self.pointer = pointer


class ArtifactNotFoundError(ClsNavError):
    """上流成果物の欠落"""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message, step="artifact")
        self.path = path


class DatasetFormatError(ClsNavError):
    """コーパスファイルの形式エラー"""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message, step="dataset_io")
        self.path = path


class SynthesisError(ClsNavError):
    """合成サンプル生成の失敗"""

    def __init__(self, message: str):
        super().__init__(message, step="synthesis")


class DegenerateInputError(ClsNavError):
    """退化入力（ゼロベクトル正規化・退化bbox・空マスクなど）"""

    def __init__(self, message: str, step: str = "input"):
        super().__init__(message, step=step)


class OutOfVocabularyError(ClsNavError):
    """語彙外のトークン"""

    def __init__(self, message: str):
        super().__init__(message, step="text_encoder")


class ProtocolViolationError(ClsNavError):
    """評価・学習プロトコル違反"""

    def __init__(self, message: str):
        super().__init__(message, step="protocol")


class CheckpointError(ClsNavError):
    """チェックポイントの読み書きエラー"""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message, step="checkpoint")
        self.path = path


def create_processing_error(
    exception: Exception, step: str = "unknown", run_id: str | None = None
) -> ProcessingError:
    """例外からProcessingErrorを作成"""
    error_type = type(exception).__name__
    message = str(exception)
    stack_trace = traceback.format_exc()

    if isinstance(exception, ClsNavError):
        step = exception.step
        run_id = exception.run_id

    return ProcessingError(
        step=step,
        error_type=error_type,
        message=message,
        run_id=run_id,
        stack_trace=stack_trace,
    )


def handle_exception(
    exception: Exception,
    step: str = "unknown",
    run_id: str | None = None,
    log_error: bool = True,
) -> ProcessingError:
    """例外を処理してProcessingErrorを返す"""
    processing_error = create_processing_error(exception, step, run_id)

    if log_error:
        logger.error(
            f"Error in step '{processing_error.step}': "
            f"{processing_error.error_type} - {processing_error.message}",
            extra={
                "run_id": processing_error.run_id,
                "step": processing_error.step,
                "error_type": processing_error.error_type,
            },
        )
        logger.debug(f"Stack trace: {processing_error.stack_trace}")

    return processing_error
