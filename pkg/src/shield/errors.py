"""Exception hierarchy. Each family carries the exit code the CLI maps it to."""


class ShieldError(Exception):
    exit_code = 1


class ConfigError(ShieldError):
    exit_code = 2

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class DataError(ShieldError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class MissingField(FormatError):
    def __init__(self, field, row=None):
        self.field = field
        super().__init__(f"missing field {field!r}", row=row)


class InvalidRatios(DataError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class EmptyInput(ShieldError, ValueError):
    exit_code = 3


class ParseError(ShieldError, ValueError):
    exit_code = 4

    def __init__(self, message, raw=""):
        self.raw = raw
        super().__init__(message)


class TransportError(ShieldError):
    exit_code = 5


class TransientError(TransportError):
    """Retryable failure: timeouts, connection resets, 429 and 5xx responses."""


class ReplayMiss(TransportError):
    pass


class StorageError(ShieldError, OSError):
    exit_code = 6


class TrainingError(ShieldError):
    exit_code = 7


class MissingFeatures(TrainingError):
    def __init__(self, post_ids):
        self.post_ids = list(post_ids)
        shown = ", ".join(map(str, self.post_ids[:5]))
        more = f" (+{len(self.post_ids) - 5} more)" if len(self.post_ids) > 5 else ""
        super().__init__(f"no FeatureSet for post ids: {shown}{more}")


class DivergenceError(TrainingError):
    pass


class RoleError(TrainingError, ValueError):
    pass


class DimMismatch(TrainingError, ValueError):
    pass


class LengthMismatch(TrainingError, ValueError):
    pass


class EmptyBatch(TrainingError, ValueError):
    pass


class EncoderLoadError(ShieldError):
    exit_code = 8


class TokenizationError(ShieldError):
    exit_code = 8


class EmptyIntersection(DataError):
    pass
