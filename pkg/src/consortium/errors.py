"""Exception types shared across the pipeline.

Every error raised deliberately by this package derives from
:class:`ConsortiumError`, so callers can catch one base class at the
boundary. Backend failures and audit failures get their own intermediate
bases because the orchestrator and the CLI route them differently.
"""

from __future__ import annotations


class ConsortiumError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ConsortiumError):
    """A workflow definition, task spec, or CLI argument is invalid."""


class TemplateError(ConsortiumError):
    """A prompt template cannot be rendered."""


class UnresolvedPlaceholder(TemplateError):
    def __init__(self, name: str) -> None:
        super().__init__(
            f"placeholder {{{{{name}}}}} does not resolve to any context field"
        )
        self.name = name


class MissingImage(ConsortiumError):
    def __init__(self, source_id: str) -> None:
        super().__init__(f"image input {source_id!r} is not resolvable")
        self.source_id = source_id


class BackendError(ConsortiumError):
    """Base class for model invocation failures."""


class Timeout(BackendError):
    """The invocation exceeded its time budget."""


class TransportError(BackendError):
    """The request never produced an HTTP response."""


class UpstreamError(BackendError):
    def __init__(self, status: int, excerpt: str = "") -> None:
        super().__init__(f"upstream returned status {status}: {excerpt!r}")
        self.status = status
        self.excerpt = excerpt


class AuthMissing(BackendError):
    def __init__(self, env_var: str) -> None:
        super().__init__(f"auth token environment variable {env_var!r} is not set")
        self.env_var = env_var


class MalformedResponse(BackendError):
    def __init__(self, path: str) -> None:
        super().__init__(f"response document is missing {path}")
        self.path = path


class QuorumNotMet(ConsortiumError):
    """Fewer members succeeded than the configured quorum requires.

    Carries the candidates assembled so far so the caller can still
    record them before failing the run.
    """

    def __init__(self, got: int, needed: int, candidates: tuple = ()) -> None:
        super().__init__(f"quorum not met: {got} ok of {needed} required")
        self.got = got
        self.needed = needed
        self.candidates = candidates


class ReasonerFailed(ConsortiumError):
    """The reasoner backend could not be invoked and fallback is disallowed."""


class ReasonerOutputInvalid(ConsortiumError):
    """The reasoner response does not follow the decision grammar."""


class NoComparableContent(ConsortiumError):
    """Every candidate failed to parse under a structured schema."""


class EmptyAfterNormalization(ConsortiumError):
    """A text had no tokens left after normalization."""


class AuditError(ConsortiumError):
    """Base class for audit trail failures."""


class StorageError(AuditError):
    """The trail file cannot be created, written, or extended."""


class MalformedRecord(AuditError):
    def __init__(self, seq: int, detail: str = "") -> None:
        super().__init__(f"audit record at seq {seq} is malformed: {detail}")
        self.seq = seq


class IncompleteTrail(AuditError):
    """The trail is missing records required for reconstruction."""


class ReplayUnsupported(AuditError):
    """The trail cannot be replayed deterministically."""


class ReplayDivergence(AuditError):
    def __init__(self, diff: tuple[str, ...]) -> None:
        super().__init__(
            "replayed decision diverges from the recorded one at: "
            + ", ".join(diff)
        )
        self.diff = diff
