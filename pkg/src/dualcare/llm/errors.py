from __future__ import annotations


class LLMError(Exception):
    """Base class for backend failures."""


class TransportError(LLMError):
    """The backend could not be reached or returned a non-success status."""


class ParseError(LLMError):
    """Reply was not a JSON object, even after the repair round."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class SchemaViolation(LLMError):
    """Reply parsed but did not satisfy the schema for its tag."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw
