"""Exception hierarchy shared by every xsface module."""


class XSFaceError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(XSFaceError, ValueError):
    pass


class InvalidConfigError(XSFaceError, ValueError):
    pass


class DegenerateInputError(XSFaceError, ValueError):
    """Raised for zero-norm vectors where a direction is required."""


class InvalidCallError(XSFaceError, RuntimeError):
    pass


class InvalidStateError(XSFaceError, RuntimeError):
    pass


class ProtocolError(XSFaceError, ValueError):
    """Dataset/pair/fold/metric protocol violated (missing modality, single class, ...)."""


class CorruptCheckpointError(XSFaceError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CorruptDataError(XSFaceError, ValueError):
    def __init__(self, message: str, path):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvalidDatasetError(XSFaceError, ValueError):
    pass


class ConfigError(XSFaceError, ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line
