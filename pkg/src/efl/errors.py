"""Exception types shared across the pipeline.

Exit codes follow the CLI contract: 2 config error, 3 missing prerequisite,
4 numeric failure. Everything else exits 1.
"""


class EflError(Exception):
    """Base class for pipeline errors."""

    exit_code = 1


class ConfigError(EflError):
    """Bad or missing configuration."""

    exit_code = 2


class MissingPrerequisiteError(EflError):
    """A stage was run before the stage that produces its inputs."""

    exit_code = 3


class StalePrerequisiteError(MissingPrerequisiteError):
    """A prerequisite artifact no longer matches the hash its producing stage recorded."""


class NumericError(EflError):
    """Non-finite values where finite ones are required."""

    exit_code = 4


class TrainingDivergedError(NumericError):
    """Training produced a NaN/inf loss."""


class AnnotationIncompleteError(EflError):
    """An action annotation is missing timestamps required by its dataset style."""


class DegenerateAnnotationError(EflError):
    """Annotation timestamps produce a non-positive frame offset."""


class EmptyManifestError(EflError):
    """Zero instances survived manifest construction."""


class DuplicateKeyError(EflError):
    """Two manifest entries share a (video_id, t_start) key within one split."""


class SplitMismatchError(EflError):
    """Attempted to merge manifests of different splits."""


class CompletionValidationError(EflError):
    """An LLM completion failed validation (empty or overlong)."""


class TransportError(EflError):
    """A backend call failed; the call may be retried."""


class TemplateError(EflError):
    """A prompt template does not contain exactly one {action} placeholder."""
