"""Cost aggregation, correctness checking, pass@t, overlap, progress curves.

All token arithmetic is integer arithmetic; per-bug averages and savings
percentages are floored, matching the whole-K / whole-percent presentation
of the reference cost tables.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .domain import CommentStyles, InvocationRecord, PromptKind, RepairOutcome, StatusKind
from .errors import MismatchedBugSets
from .orchestrator import normalize_patch_text
from .tokenizer import default_split_tokens

REPORT_SCHEMA_VERSION = 1


# -- cost accounting -------------------------------------------------------


@dataclass(frozen=True)
class CostRow:
    """One class of bugs with our and (optionally) the baseline's token totals."""

    label: str
    bug_count: int
    our_tokens: int
    baseline_tokens: int | None = None

    @property
    def avg_our_tokens(self) -> int:
        return self.our_tokens // self.bug_count if self.bug_count else 0

    @property
    def avg_baseline_tokens(self) -> int | None:
        if self.baseline_tokens is None:
            return None
        return self.baseline_tokens // self.bug_count if self.bug_count else 0

    @property
    def avg_our_k(self) -> int:
        return self.avg_our_tokens // 1000

    @property
    def avg_baseline_k(self) -> int | None:
        avg = self.avg_baseline_tokens
        return None if avg is None else avg // 1000

    @property
    def saving_pct(self) -> int | None:
        """Floored whole-percent saving: 1 - our/baseline."""
        if not self.baseline_tokens:
            return None
        return (self.baseline_tokens - self.our_tokens) * 100 // self.baseline_tokens

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "bug_count": self.bug_count,
            "our_tokens": self.our_tokens,
            "baseline_tokens": self.baseline_tokens,
            "avg_our_tokens": self.avg_our_tokens,
            "avg_baseline_tokens": self.avg_baseline_tokens,
            "saving_pct": self.saving_pct,
        }


@dataclass
class CostTable:
    rows: list[CostRow]

    def row(self, label: str) -> CostRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"rows": [row.to_dict() for row in self.rows]}


@dataclass(frozen=True)
class BaselineEntry:
    tokens_total: int
    fixed: bool


def load_baseline_csv(path: str | Path) -> dict[str, BaselineEntry]:
    """Baseline cost table: CSV with columns bug_id, tokens_total, fixed."""
    entries: dict[str, BaselineEntry] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            entries[row["bug_id"]] = BaselineEntry(
                tokens_total=int(row["tokens_total"]),
                fixed=row["fixed"].strip().lower() in ("true", "1", "yes"),
            )
    return entries


def outcome_is_correct(outcome: RepairOutcome) -> bool:
    if outcome.ground_truth is None:
        return False
    return any(
        exact_match(c.patch_text, outcome.ground_truth, outcome.comment_styles)
        for c in outcome.plausible_patches
    )


def cost_summary(
    outcomes: Sequence[RepairOutcome],
    baseline: dict[str, BaselineEntry] | None = None,
) -> CostTable:
    """Per-class token totals, per-bug averages, and savings against an
    optional baseline. Classes (ours-only / baseline-only / both / neither)
    require the baseline to cover exactly the same bug ids."""
    our_tokens = {o.bug_id: o.ledger.total_tokens for o in outcomes}
    our_fixed = {o.bug_id: outcome_is_correct(o) for o in outcomes}

    if baseline is None:
        total = CostRow("total", len(outcomes), sum(our_tokens.values()))
        return CostTable([total])

    if set(baseline) != set(our_tokens):
        missing = set(our_tokens) ^ set(baseline)
        raise MismatchedBugSets(f"baseline bug ids differ from outcomes: {sorted(missing)[:10]}")

    classes: dict[str, list[str]] = {"ours_only": [], "baseline_only": [], "both": [], "neither": []}
    for bug_id in our_tokens:
        ours = our_fixed[bug_id]
        theirs = baseline[bug_id].fixed
        if ours and theirs:
            classes["both"].append(bug_id)
        elif ours:
            classes["ours_only"].append(bug_id)
        elif theirs:
            classes["baseline_only"].append(bug_id)
        else:
            classes["neither"].append(bug_id)

    rows = [
        CostRow(
            label,
            len(ids),
            sum(our_tokens[b] for b in ids),
            sum(baseline[b].tokens_total for b in ids),
        )
        for label, ids in classes.items()
    ]
    rows.append(
        CostRow(
            "total",
            len(our_tokens),
            sum(our_tokens.values()),
            sum(entry.tokens_total for entry in baseline.values()),
        )
    )
    return CostTable(rows)


# -- exact match -----------------------------------------------------------


def _strip_comments(text: str, styles: CommentStyles) -> str:
    for open_, close in styles.block_pairs:
        pattern = re.escape(open_) + r".*?" + re.escape(close)
        text = re.sub(pattern, " ", text, flags=re.DOTALL)
    for prefix in styles.line_prefixes:
        text = re.sub(re.escape(prefix) + r"[^\n]*", " ", text)
    return text


def _normalized_tokens(text: str, styles: CommentStyles) -> list[str]:
    stripped = _strip_comments(text, styles)
    compact = re.sub(r"\s+", "", stripped)
    return default_split_tokens(compact)


def exact_match(
    candidate: str,
    ground_truth: str,
    styles: CommentStyles = CommentStyles(),
) -> bool:
    """Formatting-oblivious equality: comments and whitespace are stripped,
    then the normalized token sequences are compared. This approximates
    syntax-tree equality without parsing any particular language."""
    return _normalized_tokens(candidate, styles) == _normalized_tokens(ground_truth, styles)


# -- pass@t ----------------------------------------------------------------


def pass_at_t(first_correct_costs: Sequence[int | None], t: float) -> float:
    """Fraction of bugs whose first correct patch cost at most t tokens.
    None means no correct patch was ever produced for that bug."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if not first_correct_costs:
        return 0.0
    hits = sum(1 for cost in first_correct_costs if cost is not None and cost <= t)
    return hits / len(first_correct_costs)


# -- fixed-set overlap -----------------------------------------------------


@dataclass(frozen=True)
class OverlapCounts:
    only_ours: int
    only_theirs: int
    both: int
    neither: int


def overlap(ours: set[str], theirs: set[str], universe: set[str]) -> OverlapCounts:
    if not ours <= universe or not theirs <= universe:
        raise ValueError("fixed sets must be subsets of the universe")
    both = ours & theirs
    return OverlapCounts(
        only_ours=len(ours - theirs),
        only_theirs=len(theirs - ours),
        both=len(both),
        neither=len(universe - ours - theirs),
    )


# -- progress curves -------------------------------------------------------


def progress_curve(
    invocations: Sequence[InvocationRecord],
) -> list[tuple[int, int, int]]:
    """Per invocation: (invocation index, cumulative distinct patches,
    cumulative distinct plausible patches). Non-decreasing by construction;
    extraction failures carry no patch and never count."""
    curve: list[tuple[int, int, int]] = []
    seen: set[str] = set()
    plausible_seen: set[str] = set()
    for position, invocation in enumerate(invocations, start=1):
        for candidate in invocation.candidates:
            if candidate.status.kind is StatusKind.EXTRACTION_FAILED:
                continue
            norm = normalize_patch_text(candidate.patch_text)
            if norm not in seen:
                seen.add(norm)
                if candidate.status.is_plausible:
                    plausible_seen.add(norm)
        curve.append((position, len(seen), len(plausible_seen)))
    return curve


# -- per-bug report rows and file emission ----------------------------------


@dataclass(frozen=True)
class BugReportRow:
    bug_id: str
    rounds_used: int
    step1_invocations: int
    tokens_in: int
    tokens_out: int
    plausible_count: int
    correct: bool
    first_correct_token_cost: int | None

    def to_dict(self) -> dict:
        return {
            "bug_id": self.bug_id,
            "rounds_used": self.rounds_used,
            "step1_invocations": self.step1_invocations,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "plausible_count": self.plausible_count,
            "correct": self.correct,
            "first_correct_token_cost": self.first_correct_token_cost,
        }


def first_correct_token_cost(outcome: RepairOutcome) -> int | None:
    """Cumulative ledger tokens through the invocation that produced the
    first candidate matching the ground truth; None when there is none."""
    if outcome.ground_truth is None:
        return None
    cumulative = 0
    cursor = 0
    records = outcome.ledger.records
    for invocation in outcome.invocations:
        while cursor < len(records) and (
            records[cursor].round == invocation.round
            and records[cursor].invocation == invocation.invocation
            and records[cursor].prompt_kind == invocation.prompt_kind
        ):
            cumulative += records[cursor].input_tokens + records[cursor].output_tokens
            cursor += 1
        for candidate in invocation.candidates:
            if candidate.status.kind is StatusKind.EXTRACTION_FAILED:
                continue
            if exact_match(candidate.patch_text, outcome.ground_truth, outcome.comment_styles):
                return cumulative
    return None


def bug_report_row(outcome: RepairOutcome) -> BugReportRow:
    return BugReportRow(
        bug_id=outcome.bug_id,
        rounds_used=outcome.rounds_used,
        step1_invocations=len(outcome.step1_invocations),
        tokens_in=outcome.ledger.total_input_tokens,
        tokens_out=outcome.ledger.total_output_tokens,
        plausible_count=len(outcome.plausible_patches),
        correct=outcome_is_correct(outcome),
        first_correct_token_cost=first_correct_token_cost(outcome),
    )


def build_report(
    outcomes: Sequence[RepairOutcome],
    baseline: dict[str, BaselineEntry] | None = None,
    errors: dict[str, str] | None = None,
) -> dict:
    rows = [bug_report_row(o) for o in sorted(outcomes, key=lambda o: o.bug_id)]
    report = {
        "v": REPORT_SCHEMA_VERSION,
        "bugs": [row.to_dict() for row in rows],
        "cost": cost_summary(outcomes, baseline).to_dict(),
        "progress": {
            o.bug_id: [list(point) for point in progress_curve(o.invocations)]
            for o in sorted(outcomes, key=lambda o: o.bug_id)
        },
    }
    if errors:
        report["errors"] = dict(sorted(errors.items()))
    return report


def write_report(report: dict, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit report.json (machine) and report.csv (per-bug rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    csv_path = out_dir / "report.csv"
    fieldnames = [
        "bug_id",
        "rounds_used",
        "step1_invocations",
        "tokens_in",
        "tokens_out",
        "plausible_count",
        "correct",
        "first_correct_token_cost",
    ]
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in report["bugs"]:
            writer.writerow(row)
    return json_path, csv_path
