"""Exception and warning types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration: bad job file, unknown layer, out-of-range parameter."""


class TokenNotFoundError(ConfigError):
    """A requested token string does not occur in the prompt."""


class BackendError(Exception):
    """Denoiser/codec failure at run time (load failure, shape mismatch mid-run)."""


class ScorerUnavailableError(BackendError):
    """A metric scorer's model or package is missing; scores are never silently faked."""


class PipelineRunError(BackendError):
    """A run aborted mid-way. Carries the partial trace collected so far."""

    def __init__(self, message, partial_trace=None):
        super().__init__(message)
        self.partial_trace = partial_trace


class TruncationWarning(UserWarning):
    """Prompt exceeded the text encoder's max length and was truncated."""


class NoOpEditWarning(UserWarning):
    """A layout edit had nothing to act on (empty mask) and returned its input."""
