from typing import Any, Dict, List, Optional


class GrpoError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeError(GrpoError):
    pass


class NumericError(GrpoError):
    pass


class ArgumentError(GrpoError):
    pass


class InternalError(GrpoError):
    pass


class ConfigParseError(GrpoError):
    def __init__(self, detail: str, line: Optional[int] = None, key: Optional[str] = None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if key is not None:
            location.append(f"key '{key}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + detail)
        self.line = line
        self.key = key


class ConfigValidationError(GrpoError):
    def __init__(self, violations: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


class DivergenceError(GrpoError):
    exit_code = 2

    def __init__(self, detail: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.diagnostics = diagnostics or {}


class StorageError(GrpoError):
    """Unreadable, unwritable or malformed files."""

    exit_code = 3


class CheckpointError(StorageError):
    pass


class FormatError(StorageError):
    pass
