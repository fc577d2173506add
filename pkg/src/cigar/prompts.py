"""Builders for the three prompt kinds: initiation, improvement, multiplication.

All builders are pure and deterministic, and every prompt they return fits
within 90% of the configured prompt token limit (the margin absorbs the
local tokenizer's approximation error). Prior patches are summarized at
whole-patch granularity: when the budget is tight, whole patches are
dropped oldest-first, never split.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from .domain import BugBundle, PatchCandidate, RepairConfig, StatusKind, TestFailure, grouping_key
from .errors import BudgetExceeded
from .harness import select_best_partial
from .tokenizer import TokenCounter, get_counter

INFILL_MARKER = "[INFILL]"
BUDGET_MARGIN_NUMERATOR = 9
BUDGET_MARGIN_DENOMINATOR = 10


class Role(str, Enum):
    SYSTEM = "System"
    USER = "User"


class PartLabel(str, Enum):
    SYSTEM_MESSAGE = "SystemMessage"
    ONE_SHOT_EXAMPLE = "OneShotExample"
    BUGGY_CODE = "BuggyCode"
    TEST_FAILURE_DETAILS = "TestFailureDetails"
    PRIOR_PATCH_SUMMARY = "PriorPatchSummary"
    PLAUSIBLE_PATCH_SUMMARY = "PlausiblePatchSummary"
    CALL_TO_ACTION = "CallToAction"


@dataclass(frozen=True)
class PromptPart:
    role: Role
    label: PartLabel
    text: str


@dataclass(frozen=True)
class Prompt:
    parts: tuple[PromptPart, ...]
    token_count: int
    template_version: str

    def __post_init__(self) -> None:
        labels = [p.label for p in self.parts]
        if labels.count(PartLabel.SYSTEM_MESSAGE) != 1 or labels[0] is not PartLabel.SYSTEM_MESSAGE:
            raise ValueError("prompt must start with exactly one SystemMessage part")
        if labels.count(PartLabel.CALL_TO_ACTION) != 1 or labels[-1] is not PartLabel.CALL_TO_ACTION:
            raise ValueError("prompt must end with exactly one CallToAction part")

    def text(self) -> str:
        return "\n".join(p.text for p in self.parts)

    def serialized_parts(self) -> tuple[tuple[str, str, str], ...]:
        return tuple((p.role.value, p.label.value, p.text) for p in self.parts)


@dataclass(frozen=True)
class PromptTemplates:
    """The exact wording of every prompt section, shipped as versioned
    constants. A template directory may override any of them by file name
    (e.g. system_message.txt); absent files keep the default."""

    system_message: str = (
        "You are an automated program repair assistant. You are given code "
        "containing one buggy section and the details of the failing test. "
        "You answer with replacement code for the buggy section only, inside "
        "a single fenced code block, with no explanation."
    )
    one_shot_example: str = (
        "Here is an example fix from the same project.\n"
        "Example buggy section:\n{buggy}\n"
        "Example fixed section:\n{fixed}"
    )
    buggy_code: str = (
        "The following code contains one buggy section, shown as an infill marker:\n"
        "{marked_source}\n"
        "The original content of the marked section is:\n"
        "{buggy_hunk}"
    )
    failure_details: str = (
        "The code fails its tests.\n"
        "Failing test: {failing_test}\n"
        "Assertion: {assertion}\n"
        "Error output:\n{error_message}"
    )
    prior_patch_header: str = (
        "The following replacements for the marked section were already tried "
        "and did not pass all tests."
    )
    prior_patch_item: str = "Tried replacement:\n{patch}"
    prior_group_footer: str = "The replacements above all failed with:\n{message}"
    compile_failure_note: str = "Compilation failed:\n{message}"
    plausible_patch_header: str = (
        "The following replacements for the marked section already pass all tests."
    )
    plausible_patch_item: str = "Known good replacement:\n{patch}"
    call_to_action: str = (
        "Provide a replacement for the marked section that fixes the bug so "
        "that all tests pass. Answer with a single fenced code block "
        "containing only the replacement code."
    )
    call_to_action_multiplication: str = (
        "Provide another replacement for the marked section that passes all "
        "tests and is different from every replacement listed above. Answer "
        "with a single fenced code block containing only the replacement code."
    )

    @property
    def version(self) -> str:
        joined = "\x1f".join(getattr(self, f.name) for f in fields(self))
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def load(cls, template_dir: str | Path) -> "PromptTemplates":
        root = Path(template_dir)
        overrides = {}
        for f in fields(cls):
            path = root / f"{f.name}.txt"
            if path.is_file():
                overrides[f.name] = path.read_text(encoding="utf-8")
        return cls(**overrides)


DEFAULT_TEMPLATES = PromptTemplates()


def _budget(config: RepairConfig) -> int:
    return config.prompt_token_limit * BUDGET_MARGIN_NUMERATOR // BUDGET_MARGIN_DENOMINATOR


def _finish(parts: list[PromptPart], counter: TokenCounter, templates: PromptTemplates) -> Prompt:
    text = "\n".join(p.text for p in parts)
    return Prompt(tuple(parts), counter.count(text), templates.version)


def _system_part(templates: PromptTemplates) -> PromptPart:
    return PromptPart(Role.SYSTEM, PartLabel.SYSTEM_MESSAGE, templates.system_message)


def _buggy_code_part(bundle: BugBundle, templates: PromptTemplates) -> PromptPart:
    start, end = bundle.infill_span
    marked = bundle.source_text[:start] + INFILL_MARKER + bundle.source_text[end:]
    text = templates.buggy_code.format(marked_source=marked, buggy_hunk=bundle.buggy_hunk)
    return PromptPart(Role.USER, PartLabel.BUGGY_CODE, text)


def _failure_part(failure: TestFailure, templates: PromptTemplates) -> PromptPart:
    text = templates.failure_details.format(
        failing_test=failure.failing_test,
        assertion=failure.assertion,
        error_message=failure.error_message,
    )
    return PromptPart(Role.USER, PartLabel.TEST_FAILURE_DETAILS, text)


def _call_to_action_part(templates: PromptTemplates, *, multiplication: bool = False) -> PromptPart:
    text = templates.call_to_action_multiplication if multiplication else templates.call_to_action
    return PromptPart(Role.USER, PartLabel.CALL_TO_ACTION, text)


def build_initiation(
    bundle: BugBundle,
    config: RepairConfig,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> Prompt:
    """The round-opening prompt: system message, optional one-shot example,
    marker-infilled buggy code, failure details, call to action.

    To fit the budget it first drops the one-shot example, then truncates
    the failure details; if even the minimal prompt is too large, raises
    BudgetExceeded.
    """
    counter = get_counter(config.tokenizer_scheme)
    budget = _budget(config)
    system = _system_part(templates)
    code = _buggy_code_part(bundle, templates)
    action = _call_to_action_part(templates)

    failure = bundle.failure
    trimmed = TestFailure(
        failing_test=failure.failing_test,
        assertion=failure.assertion,
        error_message="\n".join(failure.error_message.splitlines()[-1:]),
    )
    minimal = TestFailure(failing_test=failure.failing_test)

    one_shot_parts: list[PromptPart] = []
    if bundle.one_shot is not None:
        text = templates.one_shot_example.format(buggy=bundle.one_shot[0], fixed=bundle.one_shot[1])
        one_shot_parts = [PromptPart(Role.USER, PartLabel.ONE_SHOT_EXAMPLE, text)]

    attempts = [
        one_shot_parts + [_failure_part(failure, templates)],
        [_failure_part(failure, templates)],
        [_failure_part(trimmed, templates)],
        [_failure_part(minimal, templates)],
    ]
    for middle in attempts:
        optional = middle[:-1]
        parts = [system, *optional, code, middle[-1], action]
        prompt = _finish(parts, counter, templates)
        if prompt.token_count <= budget:
            return prompt
    raise BudgetExceeded(
        f"{bundle.bug_id}: minimal initiation prompt needs {prompt.token_count} tokens, "
        f"budget is {budget} (90% of {config.prompt_token_limit})"
    )


def _feedback_key(candidate: PatchCandidate) -> str:
    """Failure-message grouping key for a partial or uncompilable candidate."""
    if candidate.status.kind is StatusKind.PARTIAL:
        assert candidate.status.failure is not None
        return candidate.status.failure.grouping_key
    return grouping_key(TestFailure("compile", "", candidate.status.compiler_message))


def _feedback_message(candidate: PatchCandidate, templates: PromptTemplates) -> str:
    if candidate.status.kind is StatusKind.PARTIAL:
        failure = candidate.status.failure
        assert failure is not None
        lines = [f"Failing test: {failure.failing_test}"]
        if failure.assertion:
            lines.append(f"Assertion: {failure.assertion}")
        if failure.error_message:
            lines.append(failure.error_message)
        return "\n".join(lines)
    return templates.compile_failure_note.format(message=candidate.status.compiler_message)


def _prior_summary_text(kept: Sequence[PatchCandidate], templates: PromptTemplates) -> str:
    """Render kept candidates grouped by failure message, groups ordered
    most-recent-first, each group's shared message appearing exactly once
    after its member patches."""
    groups: dict[str, list[int]] = {}
    for idx, candidate in enumerate(kept):
        groups.setdefault(_feedback_key(candidate), []).append(idx)
    ordered = sorted(groups.values(), key=lambda members: members[-1], reverse=True)
    blocks = [templates.prior_patch_header]
    for members in ordered:
        for idx in members:
            blocks.append(templates.prior_patch_item.format(patch=kept[idx].patch_text))
        blocks.append(templates.prior_group_footer.format(message=_feedback_message(kept[members[0]], templates)))
    return "\n".join(blocks)


def _fit_by_dropping_oldest(
    candidates: Sequence[PatchCandidate],
    protected: set[int],
    render: Callable[[Sequence[PatchCandidate]], Prompt],
    budget: int,
) -> Prompt:
    """Drop whole patches oldest-first (never the protected ones) until the
    rendered prompt fits the budget."""
    keep = list(range(len(candidates)))
    while True:
        prompt = render([candidates[i] for i in keep])
        if prompt.token_count <= budget:
            return prompt
        droppable = next((i for i in keep if i not in protected), None)
        if droppable is None:
            raise BudgetExceeded(
                f"summary prompt needs {prompt.token_count} tokens even after dropping "
                f"every optional patch; budget is {budget}"
            )
        keep.remove(droppable)


def build_improvement(
    bundle: BugBundle,
    prior_partials: Sequence[PatchCandidate],
    config: RepairConfig,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> Prompt:
    """The iterative prompt: prior partial patches grouped by failure
    message (each message appears once), newest groups first, whole patches
    dropped oldest-first under the token budget. The best partial and the
    newest partial always survive truncation. No one-shot example.
    """
    if not prior_partials:
        raise ValueError("build_improvement requires at least one prior partial patch")
    for candidate in prior_partials:
        if candidate.status.kind not in (StatusKind.PARTIAL, StatusKind.UNCOMPILABLE):
            raise ValueError("prior_partials must have Partial or Uncompilable status")
    counter = get_counter(config.tokenizer_scheme)
    budget = _budget(config)
    system = _system_part(templates)
    code = _buggy_code_part(bundle, templates)
    failure_part = _failure_part(bundle.failure, templates)
    action = _call_to_action_part(templates)

    best = select_best_partial(prior_partials)
    protected = {prior_partials.index(best), len(prior_partials) - 1}

    def render(kept: Sequence[PatchCandidate]) -> Prompt:
        summary = PromptPart(
            Role.USER, PartLabel.PRIOR_PATCH_SUMMARY, _prior_summary_text(kept, templates)
        )
        return _finish([system, code, failure_part, summary, action], counter, templates)

    return _fit_by_dropping_oldest(prior_partials, protected, render, budget)


def build_multiplication(
    bundle: BugBundle,
    plausibles: Sequence[PatchCandidate],
    config: RepairConfig,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
) -> Prompt:
    """The patch-multiplication prompt: the known plausible patches (most
    recent retained under budget) and a call to action asking for patches
    different from all of them. No failure details."""
    if not plausibles:
        raise ValueError("build_multiplication requires at least one plausible patch")
    counter = get_counter(config.tokenizer_scheme)
    budget = _budget(config)
    system = _system_part(templates)
    code = _buggy_code_part(bundle, templates)
    action = _call_to_action_part(templates, multiplication=True)
    protected = {len(plausibles) - 1}

    def render(kept: Sequence[PatchCandidate]) -> Prompt:
        blocks = [templates.plausible_patch_header]
        blocks.extend(templates.plausible_patch_item.format(patch=c.patch_text) for c in kept)
        summary = PromptPart(Role.USER, PartLabel.PLAUSIBLE_PATCH_SUMMARY, "\n".join(blocks))
        return _finish([system, code, summary, action], counter, templates)

    return _fit_by_dropping_oldest(plausibles, protected, render, budget)
