"""
Exception hierarchy for the simulation engine
"""

from typing import Optional


class FedSimError(Exception):
    """Base class for every error raised by the engine"""
    pass


class DimensionError(FedSimError):
    """Raised when tensor shapes do not line up"""
    pass


class ValidationError(FedSimError):
    """Raised when a value is well-shaped but not acceptable"""
    pass


class EmptyClientError(ValidationError):
    """Raised when a client is asked to train without any samples"""
    pass


class FormatError(FedSimError):
    """Raised when an IDX file carries the wrong magic number"""
    pass


class LengthError(FedSimError):
    """Raised when an IDX file is shorter than its header promises"""
    pass


class ConfigurationError(FedSimError):
    """Raised for invalid run configuration, naming the offending key"""

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class ExchangeProtocolError(FedSimError):
    """Raised when the exchange rendezvous times out or is aborted"""
    pass


class RoundAbortedError(FedSimError):
    """Raised when a round is abandoned; the global state is left untouched"""

    def __init__(self, round_index: int, client_id: Optional[int], cause: BaseException):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        who = f"client {client_id}" if client_id is not None else "a client"
        super().__init__(f"Round {round_index} aborted: {who} failed: {cause}")
