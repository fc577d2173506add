"""The repair state machine.

Step 1 searches for a first plausible patch: each round opens with an
initiation prompt, continues with improvement prompts fed by the round's
accumulated partial patches, and reboots (discarding round state) after
max_invoke failed invocations. Step 2 multiplies the plausible set with a
fixed number of multiplication invocations. Every extracted candidate is
deduplicated against all prior candidates for the bug before evaluation;
duplicates are recorded with the first occurrence's status but never
re-tested.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import harness
from .domain import (
    BugBundle,
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
    TokenLedger,
)
from .errors import BudgetExceeded, ProviderError, ReplayMiss, TransportError
from .llm import CachedSampler, SampleRequest, Sampler, extract_patch, request_fingerprint
from .prompts import (
    DEFAULT_TEMPLATES,
    Prompt,
    PromptTemplates,
    build_improvement,
    build_initiation,
    build_multiplication,
)
from .store import CacheRecord, CacheStore, RecordKind, StoreMode, evaluation_fingerprint

logger = logging.getLogger(__name__)

EvaluateFn = Callable[[str], PatchStatus]


def normalize_patch_text(text: str) -> str:
    """Distinctness normalization: trailing whitespace stripped per line,
    trailing newlines stripped at the end."""
    return "\n".join(line.rstrip() for line in text.split("\n")).rstrip("\n")


def is_distinct(patch_text: str, bug_history: Iterable[str]) -> bool:
    """True iff patch_text differs from every previously recorded candidate
    text after normalization."""
    normalized = normalize_patch_text(patch_text)
    return all(normalized != normalize_patch_text(prior) for prior in bug_history)


@dataclass
class RoundState:
    """Per-round search state; reboots start from a fresh instance."""

    round: int
    invocation_in_round: int = 0
    prior_partials_this_round: list[PatchCandidate] = field(default_factory=list)
    first_plausible: PatchCandidate | None = None


@dataclass
class _RunContext:
    bundle: BugBundle
    config: RepairConfig
    sampler: CachedSampler
    evaluate_fn: EvaluateFn
    templates: PromptTemplates
    ledger: TokenLedger = field(default_factory=TokenLedger)
    invocations: list[InvocationRecord] = field(default_factory=list)
    seen: dict[str, PatchCandidate] = field(default_factory=dict)
    plausibles: list[PatchCandidate] = field(default_factory=list)
    overall_index: int = 0


def _cached_evaluator(bundle: BugBundle, config: RepairConfig, store: CacheStore | None) -> EvaluateFn:
    """Harness evaluation behind the store: replays cached results, records
    fresh ones, and skips test execution entirely on a hit."""
    bundle_hash = bundle.content_hash()

    def _evaluate(patch_text: str) -> PatchStatus:
        fingerprint = evaluation_fingerprint(bundle_hash, patch_text)
        if store is not None and store.mode() is not StoreMode.PASSTHROUGH:
            record = store.get(fingerprint)
            if record is not None:
                return PatchStatus.from_dict(record.payload["status"])
            if store.mode() is StoreMode.REPLAY:
                raise ReplayMiss(f"no cached evaluation for fingerprint {fingerprint}")
        status = harness.evaluate_in_tempdir(bundle, patch_text, timeout=config.eval_timeout)
        if store is not None and store.mode() is StoreMode.RECORD:
            store.put(
                CacheRecord.fresh(
                    fingerprint=fingerprint,
                    kind=RecordKind.EVALUATION,
                    bug_id=bundle.bug_id,
                    payload={"bundle_hash": bundle_hash, "status": status.to_dict()},
                )
            )
        return status

    return _evaluate


def _evaluate_batch(ctx: _RunContext, texts: list[str]) -> list[PatchStatus]:
    if not texts:
        return []
    workers = ctx.config.eval_workers or os.cpu_count() or 1
    workers = min(workers, len(texts))
    if workers <= 1:
        return [ctx.evaluate_fn(text) for text in texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(ctx.evaluate_fn, texts))


def _record_empty_invocation(
    ctx: _RunContext,
    kind: PromptKind,
    round_no: int,
    invocation_no: int,
    fingerprint: str = "",
    prompt_parts: tuple[tuple[str, str, str], ...] = (),
) -> None:
    ctx.ledger.add(
        LedgerRecord(
            bug_id=ctx.bundle.bug_id,
            round=round_no,
            invocation=invocation_no,
            prompt_kind=kind,
            input_tokens=0,
            output_tokens=0,
        )
    )
    ctx.invocations.append(
        InvocationRecord(
            index=ctx.overall_index,
            round=round_no,
            invocation=invocation_no,
            prompt_kind=kind,
            fingerprint=fingerprint,
            prompt_parts=prompt_parts,
            candidates=(),
        )
    )


def _run_invocation(
    ctx: _RunContext,
    prompt: Prompt,
    kind: PromptKind,
    round_no: int,
    invocation_no: int,
) -> tuple[list[PatchCandidate], list[PatchCandidate]]:
    """Send one prompt, extract and evaluate its samples.

    Returns (all candidates in sample order, the novel first-occurrence
    candidates among them). Provider failures are absorbed: the invocation
    is recorded with zero candidates and the run continues.
    """
    ctx.overall_index += 1
    request = SampleRequest(
        prompt=prompt,
        n=ctx.config.samples_per_request,
        temperature=ctx.config.temperature,
        model_id=ctx.config.model_id,
        sequence=(ctx.overall_index,),
    )
    try:
        response = ctx.sampler.sample(request)
    except (TransportError, ProviderError) as exc:
        logger.warning(
            "%s: invocation %d (%s) yielded no candidates: %s",
            ctx.bundle.bug_id,
            ctx.overall_index,
            kind.value,
            exc,
        )
        _record_empty_invocation(
            ctx, kind, round_no, invocation_no, request_fingerprint(request), prompt.serialized_parts()
        )
        return [], []

    for subcall, usage in enumerate(response.sub_usages):
        ctx.ledger.add(
            LedgerRecord(
                bug_id=ctx.bundle.bug_id,
                round=round_no,
                invocation=invocation_no,
                prompt_kind=kind,
                input_tokens=usage.input_tokens,
                output_tokens=usage.output_tokens,
                subcall=subcall,
            )
        )

    extracted: list[str | None] = [extract_patch(choice) for choice in response.choices]

    # Evaluate each novel text once; duplicates copy the first occurrence's status.
    to_evaluate: list[str] = []
    novel_norms: list[str] = []
    for text in extracted:
        if text is None:
            continue
        norm = normalize_patch_text(text)
        if norm in ctx.seen or norm in novel_norms:
            continue
        novel_norms.append(norm)
        to_evaluate.append(text)
    statuses = dict(zip(novel_norms, _evaluate_batch(ctx, to_evaluate)))

    candidates: list[PatchCandidate] = []
    novel: list[PatchCandidate] = []
    for sample_index, text in enumerate(extracted):
        provenance = Provenance(round_no, invocation_no, sample_index, kind)
        if text is None:
            candidates.append(
                PatchCandidate(ctx.bundle.bug_id, "", provenance, PatchStatus.extraction_failed())
            )
            continue
        norm = normalize_patch_text(text)
        first = ctx.seen.get(norm)
        if first is not None:
            candidate = PatchCandidate(ctx.bundle.bug_id, text, provenance, first.status)
        else:
            candidate = PatchCandidate(ctx.bundle.bug_id, text, provenance, statuses[norm])
            ctx.seen[norm] = candidate
            novel.append(candidate)
        candidates.append(candidate)

    ctx.invocations.append(
        InvocationRecord(
            index=ctx.overall_index,
            round=round_no,
            invocation=invocation_no,
            prompt_kind=kind,
            fingerprint=response.request_fingerprint,
            prompt_parts=prompt.serialized_parts(),
            candidates=tuple(candidates),
        )
    )
    return candidates, novel


def search_first_plausible(ctx: _RunContext) -> tuple[PatchCandidate | None, int]:
    """Step 1. Returns (first plausible candidate or None, rounds used)."""
    bundle, config = ctx.bundle, ctx.config
    for round_no in range(1, config.max_rounds + 1):
        state = RoundState(round=round_no)
        for invocation_no in range(1, config.max_invoke + 1):
            state.invocation_in_round = invocation_no
            if invocation_no == 1 or not state.prior_partials_this_round:
                # Nothing to summarize also falls back to the initiation prompt.
                prompt = build_initiation(bundle, config, ctx.templates)
                kind = PromptKind.INITIATION
            else:
                kind = PromptKind.IMPROVEMENT
                try:
                    prompt = build_improvement(
                        bundle, state.prior_partials_this_round, config, ctx.templates
                    )
                except BudgetExceeded as exc:
                    logger.warning("%s: improvement prompt over budget: %s", bundle.bug_id, exc)
                    ctx.overall_index += 1
                    _record_empty_invocation(ctx, kind, round_no, invocation_no)
                    continue

            candidates, _ = _run_invocation(ctx, prompt, kind, round_no, invocation_no)

            round_texts = {
                normalize_patch_text(c.patch_text) for c in state.prior_partials_this_round
            }
            for candidate in candidates:
                if candidate.status.kind in (StatusKind.PARTIAL, StatusKind.UNCOMPILABLE):
                    norm = normalize_patch_text(candidate.patch_text)
                    if norm not in round_texts:
                        round_texts.add(norm)
                        state.prior_partials_this_round.append(candidate)

            for candidate in candidates:
                if candidate.status.is_plausible:
                    if state.first_plausible is None:
                        state.first_plausible = candidate
                    if ctx.seen.get(normalize_patch_text(candidate.patch_text)) is candidate:
                        ctx.plausibles.append(candidate)
            if state.first_plausible is not None:
                return state.first_plausible, round_no
    return None, config.max_rounds


def multiply(ctx: _RunContext, round_no: int) -> None:
    """Step 2: exactly multiplication_invocations multiplication prompts,
    each fed the current distinct plausible set; newly plausible candidates
    join the set for the next invocation."""
    for invocation_no in range(1, ctx.config.multiplication_invocations + 1):
        try:
            prompt = build_multiplication(ctx.bundle, ctx.plausibles, ctx.config, ctx.templates)
        except BudgetExceeded as exc:
            logger.warning("%s: multiplication prompt over budget: %s", ctx.bundle.bug_id, exc)
            ctx.overall_index += 1
            _record_empty_invocation(ctx, PromptKind.MULTIPLICATION, round_no, invocation_no)
            continue
        _, novel = _run_invocation(ctx, prompt, PromptKind.MULTIPLICATION, round_no, invocation_no)
        ctx.plausibles.extend(c for c in novel if c.status.is_plausible)


def repair(
    bundle: BugBundle,
    config: RepairConfig,
    provider: Sampler | None,
    store: CacheStore | None = None,
    *,
    templates: PromptTemplates = DEFAULT_TEMPLATES,
    evaluate_fn: EvaluateFn | None = None,
) -> RepairOutcome:
    """Run the full two-step repair for one bundle."""
    bundle.validate()
    config.validate()
    # Run-start budget check: the smallest legal initiation prompt must fit.
    build_initiation(bundle, config, templates)

    ctx = _RunContext(
        bundle=bundle,
        config=config,
        sampler=CachedSampler(provider, store, bundle.bug_id),
        evaluate_fn=evaluate_fn or _cached_evaluator(bundle, config, store),
        templates=templates,
    )
    first, rounds_used = search_first_plausible(ctx)
    if first is not None:
        multiply(ctx, rounds_used)
        terminal = TerminalState.FIXED_PLAUSIBLE
    else:
        terminal = TerminalState.EXHAUSTED
    return RepairOutcome(
        bug_id=bundle.bug_id,
        plausible_patches=ctx.plausibles,
        invocations=ctx.invocations,
        ledger=ctx.ledger,
        terminal_state=terminal,
        rounds_used=rounds_used,
        ground_truth=bundle.ground_truth,
        comment_styles=bundle.comment_styles,
    )
