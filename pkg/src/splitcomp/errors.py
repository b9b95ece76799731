"""Exception types raised across the package."""


class SplitCompError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitCompError, ValueError):
    pass


class InvalidLayerId(SplitCompError, IndexError):
    pass


class UnknownArchitecture(SplitCompError, ValueError):
    pass


class InvalidSplitConfig(SplitCompError, ValueError):
    pass


class InvalidLabel(SplitCompError, ValueError):
    pass


class InvalidTemperature(SplitCompError, ValueError):
    pass


class DivergenceError(SplitCompError, RuntimeError):
    """Training loss became NaN/Inf or exceeded the divergence threshold."""

    def __init__(self, message, *, stage=None, epoch=None, step=None, loss=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.loss = loss


class UnknownRecipe(SplitCompError, ValueError):
    pass


class EmptyDataset(SplitCompError, ValueError):
    pass


class InvalidTensor(SplitCompError, ValueError):
    pass


class CorruptPayload(SplitCompError, ValueError):
    pass


class MissingConfig(SplitCompError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EndpointUnavailable(SplitCompError, ConnectionError):
    pass


class NetworkTimeout(SplitCompError, TimeoutError):
    pass


class ProtocolError(SplitCompError, ValueError):
    """A wire frame could not be decoded. ``code`` is the short error tag."""

    def __init__(self, code: str, message: str = "", request_id: int = 0):
        super().__init__(message or code)
        self.code = code
        self.request_id = request_id
        self.resync = False


class TraceExhausted(SplitCompError, ValueError):
    pass
