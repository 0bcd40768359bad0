"""Exception types shared across the package."""


class MarkPluggerError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MarkPluggerError, ValueError):
    pass


class UnsupportedCharacter(MarkPluggerError, ValueError):
    pass


class CapacityExceeded(MarkPluggerError, ValueError):
    pass


class BadChannel(MarkPluggerError, ValueError):
    pass


class BadIntensity(MarkPluggerError, ValueError):
    pass


class EmptyInput(MarkPluggerError, ValueError):
    pass


class SampleTooSmall(MarkPluggerError, ValueError):
    pass


class GeometryMismatch(MarkPluggerError, ValueError):
    pass


class BackendUnavailable(MarkPluggerError, RuntimeError):
    """A pretrained network (backend, perceptual or feature model) could not be loaded."""


class NonFiniteLoss(MarkPluggerError, FloatingPointError):
    def __init__(self, step: int, batch_index: int):
        super().__init__(f"non-finite loss at step {step} (batch {batch_index})")
        self.step = step
        self.batch_index = batch_index


class SchemaError(MarkPluggerError, ValueError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class DataError(MarkPluggerError, OSError):
    pass
