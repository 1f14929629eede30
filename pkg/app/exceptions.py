"""
TriDomain Retrieval - Error Hierarchy
Exceptions raised across the pipeline and the CLI exit codes they map to
"""

from typing import Optional


class TriDomainError(Exception):
    """Base class for all pipeline errors"""

    exit_code: int = 2


class DataValidationError(TriDomainError, ValueError):
    """Malformed input file or violated type invariant"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        super().__init__(message)


class LLMTransportError(TriDomainError, RuntimeError):
    """Remote LLM request failed after all retries"""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class TrainingDivergenceError(TriDomainError, RuntimeError):
    """A non-finite loss was produced during training"""

    def __init__(self, batch_id: int, epoch: int):
        self.batch_id = batch_id
        self.epoch = epoch
        super().__init__(f"non-finite loss at batch {batch_id} (epoch {epoch})")


class UsageError(TriDomainError):
    """Invalid command line"""

    exit_code = 1
