"""Exception types shared across the engine."""


class CigarError(Exception):
    """Base class for every error raised by this package."""


class BundleError(CigarError):
    """A bug bundle is malformed or violates its invariants."""


class BudgetExceeded(CigarError):
    """A prompt cannot be made to fit the configured token budget."""


class TransportError(CigarError):
    """Network-level failure talking to the completion endpoint."""


class ProviderError(CigarError):
    """The completion endpoint answered but the reply is unusable."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ScriptExhausted(CigarError):
    """The scripted provider ran out of replies.

    Deliberately not a ProviderError: the repair loop absorbs provider
    failures, but an exhausted test script must fail loudly.
    """


class SandboxError(CigarError):
    """The evaluation workdir could not be prepared."""


class StorageError(CigarError):
    """The cache store hit a disk problem or an integrity violation."""


class ReplayMiss(CigarError):
    """Replay mode needed a record that is not in the cache."""


class MismatchedBugSets(CigarError):
    """A baseline cost table covers a different set of bugs."""
