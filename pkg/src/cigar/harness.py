"""Applies candidate patches and classifies them by compiling and testing
in a scratch workdir.

Classification is exit-code based: compile_cmd nonzero -> Uncompilable,
test_cmd zero -> Plausible, test_cmd nonzero -> Partial. Either command
timing out yields a Partial with a synthetic TIMEOUT failure so hanging
patches group together.
"""
from __future__ import annotations

import logging
import os
import re
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .domain import BugBundle, PatchCandidate, PatchStatus, StatusKind, TestFailure
from .errors import SandboxError

logger = logging.getLogger(__name__)

DEFAULT_EVAL_TIMEOUT = 300.0
TAIL_LINES = 20

TIMEOUT_FAILURE = TestFailure(
    failing_test="TIMEOUT",
    assertion="",
    error_message="wall-clock timeout exceeded",
)


def apply_patch(bundle: BugBundle, patch_text: str) -> str:
    """Replace the bundle's infill span with patch_text. Pure; the marker
    text is never re-expanded."""
    start, end = bundle.infill_span
    return bundle.source_text[:start] + patch_text + bundle.source_text[end:]


def _tail(text: str, lines: int = TAIL_LINES) -> str:
    return "\n".join(text.splitlines()[-lines:])


def parse_failure(test_output: str, rules: dict[str, str] | None = None) -> TestFailure:
    """Extract (failing_test, assertion, error_message) from test output.

    Each rule is a regex whose first group (or whole match) is the field
    value. Missing or unmatched rules fall back to: failing_test = first
    line containing "fail" (any case) or "unknown"; assertion = "";
    error_message = the last 20 lines of output.
    """
    rules = rules or {}

    def _capture(name: str) -> str | None:
        pattern = rules.get(name)
        if not pattern:
            return None
        match = re.search(pattern, test_output, re.MULTILINE)
        if not match:
            return None
        return match.group(1) if match.groups() else match.group(0)

    failing_test = _capture("failing_test")
    if failing_test is None:
        failing_test = next(
            (line.strip() for line in test_output.splitlines() if "fail" in line.lower()),
            "unknown",
        )
    assertion = _capture("assertion")
    error_message = _capture("error_message")
    return TestFailure(
        failing_test=failing_test,
        assertion=assertion if assertion is not None else "",
        error_message=error_message if error_message is not None else _tail(test_output),
    )


def _prepare_workdir(bundle: BugBundle, workdir: Path) -> None:
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        if bundle.root is not None:
            shutil.copytree(bundle.root, workdir, dirs_exist_ok=True)
    except OSError as exc:
        raise SandboxError(f"{bundle.bug_id}: cannot prepare workdir {workdir}: {exc}") from exc


def _run(cmd: str, workdir: Path, env: dict[str, str], timeout: float) -> subprocess.CompletedProcess | None:
    """Run cmd through the shell in workdir; None means it timed out."""
    try:
        return subprocess.run(
            cmd,
            shell=True,
            cwd=workdir,
            env=env,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        return None


def evaluate(
    bundle: BugBundle,
    patch_text: str,
    workdir: str | Path,
    *,
    timeout: float = DEFAULT_EVAL_TIMEOUT,
) -> PatchStatus:
    """Evaluate one patch in the given fresh workdir."""
    workdir = Path(workdir)
    _prepare_workdir(bundle, workdir)
    patched = apply_patch(bundle, patch_text)
    try:
        (workdir / bundle.source_file).write_text(patched, encoding="utf-8")
    except OSError as exc:
        raise SandboxError(f"{bundle.bug_id}: cannot write patched source: {exc}") from exc

    env = dict(os.environ)
    env["CIGAR_BUG_ID"] = bundle.bug_id

    compile_run = _run(bundle.compile_cmd, workdir, env, timeout)
    if compile_run is None:
        return PatchStatus.partial(TIMEOUT_FAILURE)
    if compile_run.returncode != 0:
        message = _tail(compile_run.stderr) or _tail(compile_run.stdout)
        return PatchStatus.uncompilable(message)

    test_run = _run(bundle.test_cmd, workdir, env, timeout)
    if test_run is None:
        return PatchStatus.partial(TIMEOUT_FAILURE)
    if test_run.returncode == 0:
        return PatchStatus.plausible()
    output = "\n".join(part for part in (test_run.stdout, test_run.stderr) if part)
    return PatchStatus.partial(parse_failure(output, bundle.failure_parse_rules))


def evaluate_in_tempdir(
    bundle: BugBundle,
    patch_text: str,
    *,
    timeout: float = DEFAULT_EVAL_TIMEOUT,
) -> PatchStatus:
    """Evaluate in a throwaway workdir that is removed afterwards."""
    with tempfile.TemporaryDirectory(prefix=f"cigar-{bundle.bug_id}-") as tmp:
        return evaluate(bundle, patch_text, Path(tmp) / "work", timeout=timeout)


def evaluate_many(
    bundle: BugBundle,
    patch_texts: Sequence[str],
    *,
    timeout: float = DEFAULT_EVAL_TIMEOUT,
    workers: int | None = None,
) -> list[PatchStatus]:
    """Evaluate several patches in parallel, each in its own fresh workdir.
    Results come back in input order."""
    if not patch_texts:
        return []
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(patch_texts) == 1:
        return [evaluate_in_tempdir(bundle, text, timeout=timeout) for text in patch_texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(evaluate_in_tempdir, bundle, text, timeout=timeout)
            for text in patch_texts
        ]
        return [f.result() for f in futures]


def select_best_partial(candidates: Sequence[PatchCandidate]) -> PatchCandidate:
    """The first generation-ordered candidate without compilation errors;
    the first generated one if every candidate failed to compile."""
    if not candidates:
        raise ValueError("select_best_partial needs at least one candidate")
    for candidate in candidates:
        if candidate.status.kind is StatusKind.PARTIAL:
            return candidate
    return candidates[0]
