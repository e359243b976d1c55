class CaptionDAError(Exception):
    """Base class for every error raised by the package."""

    stage = "captionda"


class GenerationError(CaptionDAError):
    stage = "scene"

    def __init__(self, rule: str, message: str):
        self.rule = rule
        super().__init__(f"rule '{rule}': {message}")


class CaptionError(CaptionDAError):
    stage = "captions"

    def __init__(self, image_id: str | None, message: str):
        self.image_id = image_id
        prefix = f"image '{image_id}': " if image_id else ""
        super().__init__(prefix + message)


class ProviderError(CaptionDAError):
    """Transport-level failure of a chat or embedding provider; retryable."""

    stage = "provider"


class BankFormatError(CaptionDAError):
    stage = "bank"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmbeddingError(CaptionDAError):
    stage = "embed"


class ShapeError(CaptionDAError):
    stage = "network"


class LossError(CaptionDAError):
    stage = "loss"


class TrainingError(CaptionDAError):
    stage = "train"

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


class ConfigError(CaptionDAError):
    stage = "config"

    def __init__(self, key: str, bound: str, message: str | None = None):
        self.key = key
        self.bound = bound
        super().__init__(message or f"{key} outside {bound}")


class EvaluationError(CaptionDAError):
    stage = "eval"


class PlotError(CaptionDAError):
    stage = "plot"


class StageError(CaptionDAError):
    def __init__(self, stage: str, seed: int | None, cause: Exception):
        self.stage = stage
        self.seed = seed
        self.cause = cause
        where = f"{stage} (seed {seed})" if seed is not None else stage
        super().__init__(f"{where} failed: {cause}")
