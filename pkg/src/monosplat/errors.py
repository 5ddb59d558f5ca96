"""Exception types shared across the engine."""


class FormatError(ValueError):
    """Malformed binary container; offset is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ProviderError(RuntimeError):
    """A pointmap provider could not produce the requested pair."""

    def __init__(self, message: str, frame_a: int, frame_b: int):
        super().__init__(f"{message} (pair {frame_a}, {frame_b})")
        self.frame_a = frame_a
        self.frame_b = frame_b


class PnPDegenerateError(RuntimeError):
    """RANSAC consensus too small to trust the estimated pose."""


class StaleRenderError(RuntimeError):
    """Backward pass invoked after the map changed since the forward pass."""
