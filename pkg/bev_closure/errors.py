from typing import Optional


class BevClosureError(Exception):
    pass


class ConfigError(BevClosureError, ValueError):
    pass


class InputFormatError(BevClosureError, ValueError):
    pass


class DegenerateGeometryError(BevClosureError, ValueError):
    pass


class EvaluationError(BevClosureError, ValueError):
    pass


class DatabaseError(BevClosureError):
    pass


class DatabaseFormatError(DatabaseError):
    pass


class DuplicateMapError(DatabaseError):
    pass


class StageError(BevClosureError, RuntimeError):
    """ローカルマップ処理のどのステージで失敗したかを保持する"""

    def __init__(self, map_index: Optional[int], stage: str, cause: BaseException):
        self.map_index = map_index
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed for map {map_index}: {cause}")
