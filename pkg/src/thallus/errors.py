"""Exception hierarchy shared by every layer.

Errors that can cross the control plane carry a numeric ``code`` that the RPC
layer copies into Error frames.
"""

# Wire error codes.
UNKNOWN_METHOD = 1
BAD_PAYLOAD = 2
UNKNOWN_READER = 3
SHAPE_MISMATCH = 4
ENGINE_ERROR = 5
TRANSPORT_ERROR = 6


class ThallusError(Exception):
    code = ENGINE_ERROR


class LayoutError(ThallusError, ValueError):
    """A record batch violates one of its layout invariants."""

    def __init__(self, message, column=None):
        if column is not None:
            message = f"column {column}: {message}"
        super().__init__(message)
        self.column = column


class FormatError(ThallusError, ValueError):
    """Malformed serialized batch, TCF file, or wire payload."""

    code = BAD_PAYLOAD


class CapacityError(ThallusError, OverflowError):
    pass


class ShapeMismatch(ThallusError):
    code = SHAPE_MISMATCH


class UnknownHandle(ThallusError, KeyError):
    code = TRANSPORT_ERROR

    def __str__(self):
        return Exception.__str__(self)


class PermissionDenied(ThallusError, PermissionError):
    code = TRANSPORT_ERROR


class TransportError(ThallusError, OSError):
    code = TRANSPORT_ERROR


class ParseError(ThallusError, ValueError):
    """SQL text does not match the grammar."""

    def __init__(self, message, position, expected=()):
        self.position = position
        self.expected = tuple(expected)
        text = f"{message} at column {position}"
        if self.expected:
            text += f" (expected {', '.join(self.expected)})"
        super().__init__(text)


class BindError(ThallusError, ValueError):
    """Query references a column or literal type the dataset can't satisfy."""


class EngineError(ThallusError):
    pass


class IoError(ThallusError, OSError):
    pass


class UnknownReader(ThallusError, KeyError):
    code = UNKNOWN_READER

    def __str__(self):
        return Exception.__str__(self)


class BadRequest(ThallusError):
    code = BAD_PAYLOAD


# Control-plane runtime errors.

class ListenError(ThallusError, OSError):
    code = TRANSPORT_ERROR


class ConnectError(ThallusError, ConnectionError):
    code = TRANSPORT_ERROR


class ConnectionClosed(ThallusError, ConnectionError):
    code = TRANSPORT_ERROR


class RpcTimeout(ThallusError, TimeoutError):
    code = TRANSPORT_ERROR


class DuplicateHandler(ThallusError):
    pass


class RemoteError(ThallusError):
    """The peer answered a request with an Error frame."""

    def __init__(self, code, message):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message
