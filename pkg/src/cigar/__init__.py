"""Cost-aware LLM-driven program repair with replayable caching."""

from .domain import (
    BugBundle,
    CommentStyles,
    InvocationRecord,
    LedgerRecord,
    PatchCandidate,
    PatchStatus,
    PromptKind,
    Provenance,
    RepairConfig,
    RepairOutcome,
    StatusKind,
    TerminalState,
    TestFailure,
    TokenLedger,
    discover_bundles,
    grouping_key,
    load_bundle,
    write_bundle,
)
from .errors import (
    BudgetExceeded,
    BundleError,
    CigarError,
    MismatchedBugSets,
    ProviderError,
    ReplayMiss,
    SandboxError,
    ScriptExhausted,
    StorageError,
    TransportError,
)
from .llm import (
    CachedSampler,
    HttpProvider,
    SampleRequest,
    SampleResponse,
    ScriptedProvider,
    ScriptedReply,
    Usage,
    extract_patch,
    request_fingerprint,
)
from .orchestrator import is_distinct, normalize_patch_text, repair
from .prompts import (
    DEFAULT_TEMPLATES,
    INFILL_MARKER,
    PartLabel,
    Prompt,
    PromptTemplates,
    build_improvement,
    build_initiation,
    build_multiplication,
)
from .store import CacheRecord, CacheStore, RecordKind, StoreMode

__version__ = "0.1.0"
