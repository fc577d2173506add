"""Core value types: bug bundles, failures, patch candidates, configs, ledgers, outcomes.

Everything here is an immutable value after construction and safe to share
between threads. The on-disk bundle format (bundle.json plus sibling files)
also lives here, since it is the wire form of these types.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

from .errors import BundleError

BUNDLE_SCHEMA_VERSION = 1

_WS_RUN = re.compile(r"\s+")
# At least two path segments so relative names and lone slashes survive.
_ABS_PATH = re.compile(r"(?:/[\w.+~-]+){2,}/?")
_HEX_SEQ = re.compile(r"0[xX][0-9a-fA-F]+|\b[0-9a-fA-F]{8,}\b")


def _canonical_fragment(text: str) -> str:
    text = _ABS_PATH.sub("<path>", text)
    text = _HEX_SEQ.sub("<hex>", text)
    return _WS_RUN.sub(" ", text).strip()


def grouping_key(failure: "TestFailure") -> str:
    """Canonical key under which logically identical failures collide.

    Whitespace runs are collapsed and run-specific noise (absolute paths,
    hex sequences such as memory addresses) is elided, so re-runs of the
    same logical failure map to the same key.
    """
    return "\x1f".join(
        (
            _canonical_fragment(failure.failing_test),
            _canonical_fragment(failure.assertion),
            _canonical_fragment(failure.error_message),
        )
    )


@dataclass(frozen=True)
class TestFailure:
    """One failing-test observation: test id, triggering assertion, error output."""

    failing_test: str
    assertion: str = ""
    error_message: str = ""

    @property
    def grouping_key(self) -> str:
        return grouping_key(self)

    def to_dict(self) -> dict[str, str]:
        return {
            "failing_test": self.failing_test,
            "assertion": self.assertion,
            "error_message": self.error_message,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TestFailure":
        return cls(
            failing_test=data.get("failing_test", "unknown"),
            assertion=data.get("assertion", ""),
            error_message=data.get("error_message", ""),
        )


class PromptKind(str, Enum):
    INITIATION = "Initiation"
    IMPROVEMENT = "Improvement"
    MULTIPLICATION = "Multiplication"


class StatusKind(str, Enum):
    UNEVALUATED = "Unevaluated"
    PLAUSIBLE = "Plausible"
    PARTIAL = "Partial"
    UNCOMPILABLE = "Uncompilable"
    EXTRACTION_FAILED = "ExtractionFailed"


@dataclass(frozen=True)
class PatchStatus:
    """Evaluation verdict for one candidate.

    Plausible: compiled and passed every test. Partial: compiled, at least
    one test failed (carries the failure). Uncompilable: the compile step
    failed (carries the compiler message tail).
    """

    kind: StatusKind
    failure: TestFailure | None = None
    compiler_message: str = ""

    def __post_init__(self) -> None:
        if self.kind is StatusKind.PARTIAL and self.failure is None:
            raise ValueError("Partial status requires a failure")
        if self.kind is not StatusKind.PARTIAL and self.failure is not None:
            raise ValueError(f"{self.kind.value} status cannot carry a failure")

    @classmethod
    def unevaluated(cls) -> "PatchStatus":
        return cls(StatusKind.UNEVALUATED)

    @classmethod
    def plausible(cls) -> "PatchStatus":
        return cls(StatusKind.PLAUSIBLE)

    @classmethod
    def partial(cls, failure: TestFailure) -> "PatchStatus":
        return cls(StatusKind.PARTIAL, failure=failure)

    @classmethod
    def uncompilable(cls, compiler_message: str) -> "PatchStatus":
        return cls(StatusKind.UNCOMPILABLE, compiler_message=compiler_message)

    @classmethod
    def extraction_failed(cls) -> "PatchStatus":
        return cls(StatusKind.EXTRACTION_FAILED)

    @property
    def is_plausible(self) -> bool:
        return self.kind is StatusKind.PLAUSIBLE

    @property
    def is_partial(self) -> bool:
        return self.kind is StatusKind.PARTIAL

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"kind": self.kind.value}
        if self.failure is not None:
            data["failure"] = self.failure.to_dict()
        if self.compiler_message:
            data["compiler_message"] = self.compiler_message
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PatchStatus":
        failure = data.get("failure")
        return cls(
            kind=StatusKind(data["kind"]),
            failure=TestFailure.from_dict(failure) if failure else None,
            compiler_message=data.get("compiler_message", ""),
        )


@dataclass(frozen=True)
class Provenance:
    """Where a candidate came from: round, invocation within its step, sample slot."""

    round: int
    invocation: int
    sample_index: int
    prompt_kind: PromptKind

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "invocation": self.invocation,
            "sample_index": self.sample_index,
            "prompt_kind": self.prompt_kind.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Provenance":
        return cls(
            round=data["round"],
            invocation=data["invocation"],
            sample_index=data["sample_index"],
            prompt_kind=PromptKind(data["prompt_kind"]),
        )


@dataclass(frozen=True)
class PatchCandidate:
    """One generated patch with its provenance and evaluation status."""

    bug_id: str
    patch_text: str
    provenance: Provenance
    status: PatchStatus = field(default_factory=PatchStatus.unevaluated)

    def with_status(self, status: PatchStatus) -> "PatchCandidate":
        return replace(self, status=status)

    def to_dict(self) -> dict[str, Any]:
        return {
            "bug_id": self.bug_id,
            "patch_text": self.patch_text,
            "provenance": self.provenance.to_dict(),
            "status": self.status.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PatchCandidate":
        return cls(
            bug_id=data["bug_id"],
            patch_text=data["patch_text"],
            provenance=Provenance.from_dict(data["provenance"]),
            status=PatchStatus.from_dict(data["status"]),
        )


@dataclass(frozen=True)
class CommentStyles:
    """Comment syntax recognized when normalizing patches for exact-match checks."""

    line_prefixes: tuple[str, ...] = ("//", "#")
    block_pairs: tuple[tuple[str, str], ...] = (("/*", "*/"),)

    def to_dict(self) -> dict[str, Any]:
        return {
            "line": list(self.line_prefixes),
            "block": [list(pair) for pair in self.block_pairs],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CommentStyles":
        return cls(
            line_prefixes=tuple(data.get("line", ("//", "#"))),
            block_pairs=tuple((open_, close) for open_, close in data.get("block", (("/*", "*/"),))),
        )


@dataclass(frozen=True)
class RepairConfig:
    """Knobs for one repair run. Defaults mirror the engine's standard setup."""

    max_invoke: int = 10
    max_rounds: int = 12
    samples_per_request: int = 50
    multiplication_invocations: int = 5
    temperature: float = 1.0
    prompt_token_limit: int = 4096
    model_id: str = "gpt-3.5-turbo-0301"
    endpoint_url: str = "https://api.openai.com/v1"
    request_timeout: float = 60.0
    max_retries: int = 3
    eval_timeout: float = 300.0
    eval_workers: int | None = None
    requests_per_minute: int | None = None
    tokenizer_scheme: str = "default-split"

    def validate(self) -> None:
        for name in (
            "max_invoke",
            "max_rounds",
            "samples_per_request",
            "multiplication_invocations",
            "prompt_token_limit",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.request_timeout <= 0 or self.eval_timeout <= 0:
            raise ValueError("timeouts must be positive")


@dataclass(frozen=True)
class LedgerRecord:
    """Token usage of one provider call. subcall > 0 marks the continuation
    calls issued when the provider caps n below the requested sample count."""

    bug_id: str
    round: int
    invocation: int
    prompt_kind: PromptKind
    input_tokens: int
    output_tokens: int
    subcall: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "bug_id": self.bug_id,
            "round": self.round,
            "invocation": self.invocation,
            "prompt_kind": self.prompt_kind.value,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "subcall": self.subcall,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LedgerRecord":
        return cls(
            bug_id=data["bug_id"],
            round=data["round"],
            invocation=data["invocation"],
            prompt_kind=PromptKind(data["prompt_kind"]),
            input_tokens=data["input_tokens"],
            output_tokens=data["output_tokens"],
            subcall=data.get("subcall", 0),
        )


@dataclass
class TokenLedger:
    """Append-only token accounting, one record per provider call."""

    records: list[LedgerRecord] = field(default_factory=list)

    def add(self, record: LedgerRecord) -> None:
        if record.input_tokens < 0 or record.output_tokens < 0:
            raise ValueError("token counts must be non-negative")
        self.records.append(record)

    @property
    def total_input_tokens(self) -> int:
        return sum(r.input_tokens for r in self.records)

    @property
    def total_output_tokens(self) -> int:
        return sum(r.output_tokens for r in self.records)

    @property
    def total_tokens(self) -> int:
        return self.total_input_tokens + self.total_output_tokens

    def to_dict(self) -> dict[str, Any]:
        return {"records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TokenLedger":
        return cls(records=[LedgerRecord.from_dict(r) for r in data.get("records", [])])


class TerminalState(str, Enum):
    FIXED_PLAUSIBLE = "FixedPlausible"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class InvocationRecord:
    """One provider invocation in the run timeline: the prompt that was sent
    and every candidate extracted from its samples, in sample order."""

    index: int
    round: int
    invocation: int
    prompt_kind: PromptKind
    fingerprint: str
    prompt_parts: tuple[tuple[str, str, str], ...]
    candidates: tuple[PatchCandidate, ...]

    def part_labels(self) -> tuple[str, ...]:
        return tuple(label for _, label, _ in self.prompt_parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "round": self.round,
            "invocation": self.invocation,
            "prompt_kind": self.prompt_kind.value,
            "fingerprint": self.fingerprint,
            "prompt_parts": [list(part) for part in self.prompt_parts],
            "candidates": [c.to_dict() for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "InvocationRecord":
        return cls(
            index=data["index"],
            round=data["round"],
            invocation=data["invocation"],
            prompt_kind=PromptKind(data["prompt_kind"]),
            fingerprint=data["fingerprint"],
            prompt_parts=tuple(tuple(part) for part in data["prompt_parts"]),
            candidates=tuple(PatchCandidate.from_dict(c) for c in data["candidates"]),
        )


@dataclass
class RepairOutcome:
    """Result of one repair run: the distinct plausible set, the invocation
    timeline, and the token ledger. ground_truth and comment_styles are
    echoed from the bundle so reports can be computed from outcomes alone."""

    bug_id: str
    plausible_patches: list[PatchCandidate]
    invocations: list[InvocationRecord]
    ledger: TokenLedger
    terminal_state: TerminalState
    rounds_used: int
    ground_truth: str | None = None
    comment_styles: CommentStyles = CommentStyles()

    @property
    def all_candidates(self) -> list[PatchCandidate]:
        return [c for inv in self.invocations for c in inv.candidates]

    @property
    def step1_invocations(self) -> list[InvocationRecord]:
        return [inv for inv in self.invocations if inv.prompt_kind is not PromptKind.MULTIPLICATION]

    @property
    def step2_invocations(self) -> list[InvocationRecord]:
        return [inv for inv in self.invocations if inv.prompt_kind is PromptKind.MULTIPLICATION]

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": BUNDLE_SCHEMA_VERSION,
            "bug_id": self.bug_id,
            "terminal_state": self.terminal_state.value,
            "rounds_used": self.rounds_used,
            "plausible_patches": [c.to_dict() for c in self.plausible_patches],
            "invocations": [inv.to_dict() for inv in self.invocations],
            "ledger": self.ledger.to_dict(),
            "ground_truth": self.ground_truth,
            "comment_styles": self.comment_styles.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RepairOutcome":
        return cls(
            bug_id=data["bug_id"],
            plausible_patches=[PatchCandidate.from_dict(c) for c in data["plausible_patches"]],
            invocations=[InvocationRecord.from_dict(i) for i in data["invocations"]],
            ledger=TokenLedger.from_dict(data["ledger"]),
            terminal_state=TerminalState(data["terminal_state"]),
            rounds_used=data["rounds_used"],
            ground_truth=data.get("ground_truth"),
            comment_styles=CommentStyles.from_dict(data.get("comment_styles", {})),
        )


@dataclass(frozen=True)
class BugBundle:
    """One repairable bug: the source under repair, the buggy region, the
    commands that compile and test it, and the initial failure."""

    bug_id: str
    source_text: str
    infill_span: tuple[int, int]
    failure: TestFailure
    compile_cmd: str
    test_cmd: str
    source_file: str = "source.txt"
    ground_truth: str | None = None
    one_shot: tuple[str, str] | None = None
    failure_parse_rules: dict[str, str] | None = None
    comment_styles: CommentStyles = CommentStyles()
    root: Path | None = None

    @property
    def buggy_hunk(self) -> str:
        start, end = self.infill_span
        return self.source_text[start:end]

    def validate(self) -> None:
        start, end = self.infill_span
        if not (0 <= start <= end <= len(self.source_text)):
            raise BundleError(
                f"{self.bug_id}: infill_span {self.infill_span} out of bounds "
                f"for source of length {len(self.source_text)}"
            )
        if not self.compile_cmd.strip():
            raise BundleError(f"{self.bug_id}: compile_cmd is empty")
        if not self.test_cmd.strip():
            raise BundleError(f"{self.bug_id}: test_cmd is empty")
        if self.one_shot is not None and self.one_shot[0] == self.one_shot[1]:
            raise BundleError(f"{self.bug_id}: one-shot example buggy and fixed text are identical")

    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "bug_id": self.bug_id,
                "source_text": self.source_text,
                "infill_span": list(self.infill_span),
                "compile_cmd": self.compile_cmd,
                "test_cmd": self.test_cmd,
                "source_file": self.source_file,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def load_bundle(path: str | Path) -> BugBundle:
    """Load a bundle directory: bundle.json, the source file, and the
    optional ground_truth.txt and one_shot/ siblings."""
    root = Path(path)
    manifest_path = root / "bundle.json"
    if not manifest_path.is_file():
        raise BundleError(f"no bundle.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleError(f"unreadable bundle.json in {root}: {exc}") from exc

    try:
        bug_id = manifest["bug_id"]
        source_file = manifest["source_file"]
        span = manifest["infill_span"]
        compile_cmd = manifest["compile_cmd"]
        test_cmd = manifest["test_cmd"]
        failure = TestFailure.from_dict(manifest["failure"])
    except (KeyError, TypeError) as exc:
        raise BundleError(f"bundle.json in {root} is missing required fields: {exc}") from exc

    source_path = root / source_file
    if not source_path.is_file():
        raise BundleError(f"{bug_id}: source file {source_file} missing from {root}")
    source_text = source_path.read_text(encoding="utf-8")

    ground_truth = None
    gt_path = root / "ground_truth.txt"
    if gt_path.is_file():
        ground_truth = gt_path.read_text(encoding="utf-8")

    one_shot = None
    shot_dir = root / "one_shot"
    if shot_dir.is_dir():
        buggy_path = shot_dir / "buggy.txt"
        fixed_path = shot_dir / "fixed.txt"
        if not (buggy_path.is_file() and fixed_path.is_file()):
            raise BundleError(f"{bug_id}: one_shot/ requires both buggy.txt and fixed.txt")
        one_shot = (
            buggy_path.read_text(encoding="utf-8"),
            fixed_path.read_text(encoding="utf-8"),
        )

    styles = CommentStyles()
    if "comment_styles" in manifest:
        styles = CommentStyles.from_dict(manifest["comment_styles"])

    bundle = BugBundle(
        bug_id=bug_id,
        source_text=source_text,
        infill_span=(int(span[0]), int(span[1])),
        failure=failure,
        compile_cmd=compile_cmd,
        test_cmd=test_cmd,
        source_file=source_file,
        ground_truth=ground_truth,
        one_shot=one_shot,
        failure_parse_rules=manifest.get("failure_parse_rules"),
        comment_styles=styles,
        root=root,
    )
    bundle.validate()

    declared_hunk = manifest.get("buggy_hunk")
    if declared_hunk is not None and declared_hunk != bundle.buggy_hunk:
        raise BundleError(
            f"{bug_id}: declared buggy_hunk does not match source_text at infill_span"
        )
    return bundle


def write_bundle(bundle: BugBundle, path: str | Path) -> Path:
    """Write a bundle directory in the on-disk layout. Returns the directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "v": BUNDLE_SCHEMA_VERSION,
        "bug_id": bundle.bug_id,
        "source_file": bundle.source_file,
        "infill_span": list(bundle.infill_span),
        "buggy_hunk": bundle.buggy_hunk,
        "compile_cmd": bundle.compile_cmd,
        "test_cmd": bundle.test_cmd,
        "failure": bundle.failure.to_dict(),
    }
    if bundle.failure_parse_rules:
        manifest["failure_parse_rules"] = bundle.failure_parse_rules
    manifest["comment_styles"] = bundle.comment_styles.to_dict()
    (root / "bundle.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    (root / bundle.source_file).write_text(bundle.source_text, encoding="utf-8")
    if bundle.ground_truth is not None:
        (root / "ground_truth.txt").write_text(bundle.ground_truth, encoding="utf-8")
    if bundle.one_shot is not None:
        shot_dir = root / "one_shot"
        shot_dir.mkdir(exist_ok=True)
        (shot_dir / "buggy.txt").write_text(bundle.one_shot[0], encoding="utf-8")
        (shot_dir / "fixed.txt").write_text(bundle.one_shot[1], encoding="utf-8")
    return root


def discover_bundles(corpus_dir: str | Path) -> Iterator[Path]:
    """Yield bundle directories (those containing bundle.json) under corpus_dir, sorted."""
    root = Path(corpus_dir)
    if not root.is_dir():
        return
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / "bundle.json").is_file():
            yield child
