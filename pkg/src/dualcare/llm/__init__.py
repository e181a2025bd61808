from dualcare.llm.client import (
    ChatBackend,
    ChatRequest,
    EmbeddingBackend,
    RerankBackend,
    RetryPolicy,
    Rubric,
    StructuredOutput,
    complete,
    embed,
    judge,
    normalize_rows,
)
from dualcare.llm.errors import LLMError, ParseError, SchemaViolation, TransportError
from dualcare.llm.mock import HashEmbedder, OverlapReranker, ScriptedChat, ScriptRule, load_script
from dualcare.llm.schemas import SchemaTag

__all__ = [
    "ChatBackend",
    "ChatRequest",
    "EmbeddingBackend",
    "HashEmbedder",
    "LLMError",
    "OverlapReranker",
    "ParseError",
    "RerankBackend",
    "RetryPolicy",
    "Rubric",
    "SchemaTag",
    "SchemaViolation",
    "ScriptRule",
    "ScriptedChat",
    "StructuredOutput",
    "TransportError",
    "complete",
    "embed",
    "judge",
    "load_script",
    "normalize_rows",
]
