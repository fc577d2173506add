"""Command-line entry point: repair, batch, replay, report.

Exit codes are the machine contract: 0 success (repair: plausible patch
found), 2 repair exhausted, 1 error. Human-readable text goes to stderr;
machine output goes to files, or to stdout under --json.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .domain import BugBundle, RepairConfig, RepairOutcome, TerminalState, discover_bundles, load_bundle
from .errors import CigarError, ReplayMiss
from .llm import HttpProvider, Sampler, ScriptedProvider
from .orchestrator import repair
from .prompts import DEFAULT_TEMPLATES, PromptTemplates
from .report import build_report, load_baseline_csv, write_report
from .store import CacheStore, StoreMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EXHAUSTED = 2

OUTCOME_FILE = "outcome.json"
DEFAULT_SCRIPT_NAME = "replies.jsonl"

_CONFIG_FIELDS = {f.name for f in fields(RepairConfig)}

_FLAG_TO_FIELD = {
    "max_invoke": "max_invoke",
    "max_rounds": "max_rounds",
    "samples": "samples_per_request",
    "mult_invocations": "multiplication_invocations",
    "temperature": "temperature",
    "model": "model_id",
    "endpoint": "endpoint_url",
    "token_limit": "prompt_token_limit",
    "timeout_secs": "eval_timeout",
}


def load_config(path: str | Path | None) -> tuple[RepairConfig, dict]:
    """Read a TOML config file mirroring RepairConfig. Returns the config
    and the leftover keys (provider wiring and the like)."""
    config = RepairConfig()
    extras: dict = {}
    if path is None:
        return config, extras
    with open(path, "rb") as handle:
        data = tomllib.load(handle)
    tokenizer_section = data.pop("tokenizer", None)
    if isinstance(tokenizer_section, dict) and "scheme" in tokenizer_section:
        data["tokenizer_scheme"] = tokenizer_section["scheme"]
    overrides = {}
    for key, value in data.items():
        if key in _CONFIG_FIELDS:
            overrides[key] = value
        else:
            extras[key] = value
    return replace(config, **overrides), extras


def apply_flag_overrides(config: RepairConfig, args: argparse.Namespace) -> RepairConfig:
    overrides = {}
    for flag, field_name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    return replace(config, **overrides) if overrides else config


def build_provider(
    args: argparse.Namespace,
    config: RepairConfig,
    extras: dict,
    bundle_dir: Path | None,
    shared_http: dict | None = None,
) -> Sampler | None:
    """Pick the provider: an explicit script (or per-bundle replies.jsonl)
    selects the scripted provider, otherwise the HTTP client. Replay mode
    needs no provider at all. Batch runs pass shared_http so all bundles
    share one HTTP client (and its rate-limit bucket)."""
    if args.mode == "replay":
        return None
    script = getattr(args, "script", None) or extras.get("script")
    provider_name = extras.get("provider")
    if script is None and bundle_dir is not None and provider_name in (None, "scripted"):
        candidate = bundle_dir / DEFAULT_SCRIPT_NAME
        if candidate.is_file():
            script = candidate
    if script is not None:
        return ScriptedProvider.from_file(script)
    if provider_name == "scripted":
        raise CigarError("provider=scripted but no script file was found")
    if shared_http is not None:
        if "provider" not in shared_http:
            shared_http["provider"] = HttpProvider(config)
        return shared_http["provider"]
    return HttpProvider(config)


def _write_outcome(outcome: RepairOutcome, out_dir: Path, *, as_json: bool) -> Path:
    bug_dir = out_dir / outcome.bug_id
    bug_dir.mkdir(parents=True, exist_ok=True)
    path = bug_dir / OUTCOME_FILE
    payload = outcome.to_json()
    path.write_text(payload, encoding="utf-8")
    if as_json:
        sys.stdout.write(payload)
    return path


def _exit_code_for(outcome: RepairOutcome) -> int:
    return EXIT_OK if outcome.terminal_state is TerminalState.FIXED_PLAUSIBLE else EXIT_EXHAUSTED


def _repair_one(
    bundle: BugBundle,
    config: RepairConfig,
    args: argparse.Namespace,
    extras: dict,
    store: CacheStore,
    templates: PromptTemplates,
    shared_http: dict | None = None,
) -> RepairOutcome:
    provider = build_provider(args, config, extras, bundle.root, shared_http)
    return repair(bundle, config, provider, store, templates=templates)


def _load_templates(args: argparse.Namespace) -> PromptTemplates:
    template_dir = getattr(args, "templates", None)
    if template_dir:
        return PromptTemplates.load(template_dir)
    return DEFAULT_TEMPLATES


def cmd_repair(args: argparse.Namespace) -> int:
    config, extras = load_config(args.config)
    config = apply_flag_overrides(config, args)
    try:
        bundle = load_bundle(args.bundle)
        store = CacheStore(args.cache, StoreMode(args.mode))
        outcome = _repair_one(bundle, config, args, extras, store, _load_templates(args))
    except (CigarError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    path = _write_outcome(outcome, Path(args.out), as_json=args.json)
    print(
        f"{outcome.bug_id}: {outcome.terminal_state.value} "
        f"({len(outcome.plausible_patches)} plausible, {outcome.ledger.total_tokens} tokens) -> {path}",
        file=sys.stderr,
    )
    return _exit_code_for(outcome)


def cmd_replay(args: argparse.Namespace) -> int:
    args.mode = "replay"
    config, extras = load_config(args.config)
    config = apply_flag_overrides(config, args)
    out_dir = Path(args.out)
    try:
        bundle = load_bundle(args.bundle)
        store = CacheStore(args.cache, StoreMode.REPLAY)
        previous_path = out_dir / bundle.bug_id / OUTCOME_FILE
        previous = previous_path.read_text(encoding="utf-8") if previous_path.is_file() else None
        outcome = _repair_one(bundle, config, args, extras, store, _load_templates(args))
    except ReplayMiss as exc:
        print(f"replay miss: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (CigarError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    path = _write_outcome(outcome, out_dir, as_json=args.json)
    if previous is not None:
        verdict = "identical to" if previous == outcome.to_json() else "DIFFERS from"
        print(f"{bundle.bug_id}: replay outcome {verdict} the recorded outcome", file=sys.stderr)
    else:
        print(f"{bundle.bug_id}: replay outcome written to {path}", file=sys.stderr)
    return _exit_code_for(outcome)


def cmd_batch(args: argparse.Namespace) -> int:
    config, extras = load_config(args.config)
    config = apply_flag_overrides(config, args)
    bundle_dirs = list(discover_bundles(args.corpus))
    if not bundle_dirs:
        print(f"error: no bundles found under {args.corpus}", file=sys.stderr)
        return EXIT_ERROR

    store = CacheStore(args.cache, StoreMode(args.mode))
    templates = _load_templates(args)
    outcomes: list[RepairOutcome] = []
    errors: dict[str, str] = {}
    shared_http: dict = {}

    def _run(bundle_dir: Path) -> tuple[str, RepairOutcome | None, str | None]:
        name = bundle_dir.name
        try:
            bundle = load_bundle(bundle_dir)
            outcome = _repair_one(bundle, config, args, extras, store, templates, shared_http)
            return bundle.bug_id, outcome, None
        except (CigarError, ValueError, OSError) as exc:
            return name, None, str(exc)

    workers = max(1, args.parallel)
    if workers == 1:
        results = [_run(d) for d in bundle_dirs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, bundle_dirs))

    out_dir = Path(args.out)
    for bug_id, outcome, error in results:
        if outcome is not None:
            outcomes.append(outcome)
            _write_outcome(outcome, out_dir, as_json=False)
            print(f"{bug_id}: {outcome.terminal_state.value}", file=sys.stderr)
        else:
            errors[bug_id] = error or "unknown error"
            print(f"{bug_id}: error: {error}", file=sys.stderr)

    baseline = load_baseline_csv(args.baseline) if args.baseline else None
    try:
        report = build_report(outcomes, baseline, errors)
    except CigarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    json_path, csv_path = write_report(report, out_dir)
    if args.json:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {json_path} and {csv_path}", file=sys.stderr)
    return EXIT_ERROR if errors else EXIT_OK


def load_outcomes(out_dir: str | Path) -> list[RepairOutcome]:
    outcomes = []
    for path in sorted(Path(out_dir).glob(f"*/{OUTCOME_FILE}")):
        outcomes.append(RepairOutcome.from_dict(json.loads(path.read_text(encoding="utf-8"))))
    return outcomes


def cmd_report(args: argparse.Namespace) -> int:
    try:
        outcomes = load_outcomes(args.outcomes)
        if not outcomes:
            print(f"error: no outcomes under {args.outcomes}", file=sys.stderr)
            return EXIT_ERROR
        baseline = load_baseline_csv(args.baseline) if args.baseline else None
        report = build_report(outcomes, baseline)
        json_path, csv_path = write_report(report, Path(args.outcomes))
    except (CigarError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.json:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {json_path} and {csv_path}", file=sys.stderr)
    return EXIT_OK


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file mirroring the repair settings")
    parser.add_argument("--cache", default="cache", help="cache directory (default: ./cache)")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--mode", choices=["record", "replay", "passthrough"], default="record")
    parser.add_argument("--script", help="scripted-provider reply file (JSON lines)")
    parser.add_argument("--templates", help="directory of prompt template overrides")
    parser.add_argument("--json", action="store_true", help="also print machine output to stdout")
    parser.add_argument("--max-invoke", dest="max_invoke", type=int)
    parser.add_argument("--max-rounds", dest="max_rounds", type=int)
    parser.add_argument("--samples", dest="samples", type=int)
    parser.add_argument("--mult-invocations", dest="mult_invocations", type=int)
    parser.add_argument("--temperature", dest="temperature", type=float)
    parser.add_argument("--model", dest="model")
    parser.add_argument("--endpoint", dest="endpoint")
    parser.add_argument("--token-limit", dest="token_limit", type=int)
    parser.add_argument("--timeout-secs", dest="timeout_secs", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cigar",
        description="Cost-aware LLM-driven program repair with replayable caching.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_repair = sub.add_parser("repair", help="repair one bug bundle")
    p_repair.add_argument("bundle", help="bundle directory")
    _add_common_flags(p_repair)
    p_repair.set_defaults(func=cmd_repair)

    p_batch = sub.add_parser("batch", help="repair every bundle in a corpus directory")
    p_batch.add_argument("corpus", help="directory of bundle directories")
    p_batch.add_argument("--parallel", type=int, default=1, help="bundles repaired in parallel")
    p_batch.add_argument("--baseline", help="baseline cost CSV (bug_id,tokens_total,fixed)")
    _add_common_flags(p_batch)
    p_batch.set_defaults(func=cmd_batch)

    p_replay = sub.add_parser("replay", help="re-run a repair offline from the cache")
    p_replay.add_argument("bundle", help="bundle directory")
    _add_common_flags(p_replay)
    p_replay.set_defaults(func=cmd_replay)

    p_report = sub.add_parser("report", help="aggregate outcomes into report.json/report.csv")
    p_report.add_argument("outcomes", help="directory of per-bug outcome files")
    p_report.add_argument("--baseline", help="baseline cost CSV (bug_id,tokens_total,fixed)")
    p_report.add_argument("--json", action="store_true")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CigarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
