"""
Exception hierarchy for reflect-pipe.

Every error carries a stable code and a details dict so the CLI can emit it
as machine-readable JSON on stderr.
"""

from datetime import datetime, timezone
from typing import Any, Dict, Optional


class ReflectPipeError(Exception):
    code = "reflect_pipe_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.code,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple, set)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)


# corpus

class CorpusError(ReflectPipeError):
    code = "corpus_error"


class MalformedRecord(CorpusError):
    code = "malformed_record"

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}", line=line, reason=reason)
        self.line = line
        self.reason = reason


class DuplicateId(CorpusError):
    code = "duplicate_id"

    def __init__(self, pair_id: str):
        super().__init__(f"duplicate pair_id {pair_id!r}", pair_id=pair_id)
        self.pair_id = pair_id


class EmptyCorpus(CorpusError):
    code = "empty_corpus"


class RatioSum(CorpusError):
    code = "ratio_sum"


class UnknownSplitTag(CorpusError):
    code = "unknown_split_tag"


# retrieval

class RetrievalError(ReflectPipeError):
    code = "retrieval_error"


class DimensionMismatch(RetrievalError):
    code = "dimension_mismatch"

    def __init__(self, expected: int, actual: int, what: str = "vector"):
        super().__init__(f"{what} has dim {actual}, expected {expected}",
                         expected=expected, actual=actual)


class ZeroVector(RetrievalError):
    code = "zero_vector"


class MixedDimensions(RetrievalError):
    code = "mixed_dimensions"


# prompting

class PromptError(ReflectPipeError):
    code = "prompt_error"


class NoNeighbors(PromptError):
    code = "no_neighbors"


class EmptyRuleSet(PromptError):
    code = "empty_ruleset"


class NoExemplars(PromptError):
    code = "no_exemplars"


class MissingPlaceholder(PromptError):
    code = "missing_placeholder"


# llm gateway

class GatewayError(ReflectPipeError):
    code = "gateway_error"


class BackendUnavailable(GatewayError):
    code = "backend_unavailable"


class RateLimited(GatewayError):
    code = "rate_limited"

    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message, retry_after=retry_after)
        self.retry_after = retry_after


class GatewayTimeout(GatewayError):
    code = "timeout"


# rules

class RulesError(ReflectPipeError):
    code = "rules_error"


class InsufficientLabels(RulesError):
    code = "insufficient_labels"


class InvalidRuleSet(RulesError):
    code = "invalid_ruleset"


# baselines

class BaselineError(ReflectPipeError):
    code = "baseline_error"


class EmptyMatrix(BaselineError):
    code = "empty_matrix"


class SingleClass(BaselineError):
    code = "single_class"


class NonFinite(BaselineError):
    code = "non_finite"


class SingularMatrix(BaselineError):
    code = "singular_matrix"


# metrics

class MetricsError(ReflectPipeError):
    code = "metrics_error"


class LengthMismatch(MetricsError):
    code = "length_mismatch"


class MissingLabel(MetricsError):
    code = "missing_label"

    def __init__(self, pair_id: str):
        super().__init__(f"no label for pair {pair_id!r}", pair_id=pair_id)
        self.pair_id = pair_id


# pipeline

class PipelineError(ReflectPipeError):
    code = "pipeline_error"


class MissingPrerequisite(PipelineError):
    code = "missing_prerequisite"

    def __init__(self, mode: str, artifact: str):
        super().__init__(f"mode {mode!r} requires {artifact}", mode=mode, artifact=artifact)


class UnknownPairId(PipelineError):
    code = "unknown_pair_id"

    def __init__(self, pair_id: str):
        super().__init__(f"prediction for unknown pair {pair_id!r}", pair_id=pair_id)
        self.pair_id = pair_id


class ConfigError(PipelineError):
    code = "config_error"
