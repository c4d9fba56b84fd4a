"""
Exception hierarchy for reljudge.
The CLI maps each family onto an exit code (data 2, LLM 3, usage 1).
"""

from typing import Optional


class RelJudgeError(Exception):
    """Base class for all toolkit errors."""


class UsageError(RelJudgeError):
    """Invalid combination of command-line options."""


class DataError(RelJudgeError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(
        self,
        message: str,
        *,
        source: Optional[str] = None,
        line_number: Optional[int] = None,
    ):
        self.message = message
        self.source = source
        self.line_number = line_number
        super().__init__(self._format())

    def _format(self) -> str:
        location = []
        if self.source:
            location.append(str(self.source))
        if self.line_number is not None:
            location.append(f"line {self.line_number}")
        if location:
            return f"{', '.join(location)}: {self.message}"
        return self.message


class ParseError(DataError):
    """A line of an input file does not follow its format."""


class DuplicateEntryError(ParseError):
    """The same key appears twice where keys must be unique."""


class GradeOutOfRangeError(DataError):
    """A relevance grade outside 0-3."""


class PassageNotFoundError(DataError, KeyError):
    """Lookup of a passage id that is not in the corpus."""

    def __str__(self) -> str:
        return self._format()


class ClusterError(DataError):
    """Near-duplicate cluster file violates a cluster invariant."""


class EmptyAlignmentError(DataError):
    """Two qrels sets share no (topic, passage) pair."""


class NoOverlapError(DataError):
    """A run shares no topic with the qrels it is evaluated against."""


class UndefinedStatisticError(DataError):
    """A statistic is undefined for the given input (zero denominator)."""


class UnresolvablePoolError(DataError):
    """A pool pair references an unknown topic or passage."""


class TemplateError(DataError):
    """A prompt template violates the placeholder contract."""


class ResponseParseError(RelJudgeError):
    """The LLM reply could not be turned into a grade."""

    def __init__(self, message: str, raw_text: str):
        self.raw_text = raw_text
        super().__init__(message)


class UnparseableResponseError(ResponseParseError):
    """No final-score marker followed by an integer in the reply."""


class ResponseOutOfRangeError(ResponseParseError):
    """The reply's final score is an integer outside 0-3."""


class LLMError(RelJudgeError):
    """Transport or remote failure talking to the LLM endpoint."""


class MissingAPIKeyError(LLMError):
    """The configured API key environment variable is unset or empty."""


class AuthenticationFailure(LLMError):
    """The endpoint rejected the credentials (not retried)."""


class RemoteRequestError(LLMError):
    """The endpoint rejected the request with a non-retryable status."""

    def __init__(self, message: str, status: Optional[int] = None):
        self.status = status
        super().__init__(message)


class MalformedReplyError(LLMError):
    """The endpoint answered, but not with a usable chat completion."""


class RetriesExhaustedError(LLMError):
    """Every attempt failed with a retryable error."""

    def __init__(self, message: str, *, last_status: Optional[int], attempt_count: int):
        self.last_status = last_status
        self.attempt_count = attempt_count
        super().__init__(message)
