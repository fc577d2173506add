"""Shared fixtures: a mini corpus of real, runnable Python bug bundles and
scripted-provider helpers."""
from __future__ import annotations

import re
import shlex
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import pytest

from cigar import harness
from cigar.domain import BugBundle, PatchStatus, TestFailure, load_bundle, write_bundle

PYTHON = shlex.quote(sys.executable)

RUN_TESTS_TEMPLATE = """\
import sys

import source


def main():
    failures = []
{checks}
    if failures:
        for name, detail in failures:
            print("FAIL: " + name)
            print("assertion: " + detail)
        return 1
    print("all tests passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
"""

CHECK_TEMPLATE = """\
    try:
        actual = {expression}
        if actual != {expected!r}:
            failures.append(("{name}", "expected {expected!r} but was " + repr(actual)))
    except Exception as exc:
        failures.append(("{name}", "raised " + repr(exc)))
"""

PARSE_RULES = {
    "failing_test": r"FAIL: (\w+)",
    "assertion": r"assertion: (.*)",
}


def build_python_bundle(
    root: Path,
    bug_id: str,
    source: str,
    buggy_hunk: str,
    ground_truth: str,
    checks: list[tuple[str, str, object]],
    one_shot: tuple[str, str] | None = None,
) -> BugBundle:
    """Create a runnable bundle directory. The declared failure is derived
    by evaluating the identity patch once, so bundle.failure always matches
    what the harness observes."""
    bundle_dir = root / bug_id
    bundle_dir.mkdir(parents=True)
    check_code = "".join(
        CHECK_TEMPLATE.format(name=name, expression=expression, expected=expected)
        for name, expression, expected in checks
    )
    (bundle_dir / "run_tests.py").write_text(
        RUN_TESTS_TEMPLATE.format(checks=check_code), encoding="utf-8"
    )

    start = source.index(buggy_hunk)
    draft = BugBundle(
        bug_id=bug_id,
        source_text=source,
        infill_span=(start, start + len(buggy_hunk)),
        failure=TestFailure("pending"),
        compile_cmd=f"{PYTHON} -m py_compile source.py",
        test_cmd=f"{PYTHON} run_tests.py",
        source_file="source.py",
        ground_truth=ground_truth,
        one_shot=one_shot,
        failure_parse_rules=dict(PARSE_RULES),
        root=bundle_dir,
    )
    (bundle_dir / "source.py").write_text(source, encoding="utf-8")
    status = harness.evaluate_in_tempdir(draft, draft.buggy_hunk, timeout=60)
    assert status.is_partial, f"{bug_id}: identity patch must be Partial, got {status.kind}"
    bundle = replace(draft, failure=status.failure)
    write_bundle(bundle, bundle_dir)
    return load_bundle(bundle_dir)


BUNDLE_SPECS = [
    {
        "bug_id": "off_by_one",
        "source": (
            "def sum_through(n):\n"
            "    total = 0\n"
            "    for i in range(n):\n"
            "        total += i\n"
            "    return total\n"
        ),
        "buggy_hunk": "range(n)",
        "ground_truth": "range(n + 1)",
        "partial_decoy": "range(n + 2)",
        "checks": [("test_sum_through", "source.sum_through(4)", 10)],
        "one_shot": ("return value - 1", "return value + 1"),
    },
    {
        "bug_id": "wrong_operator",
        "source": "def absolute_difference(a, b):\n    return a + b\n",
        "buggy_hunk": "a + b",
        "ground_truth": "abs(a - b)",
        "partial_decoy": "abs(a + b)",
        "checks": [
            ("test_diff_small_big", "source.absolute_difference(3, 5)", 2),
            ("test_diff_big_small", "source.absolute_difference(5, 3)", 2),
        ],
    },
    {
        "bug_id": "wrong_comparison",
        "source": "def is_even(n):\n    return n % 2 == 1\n",
        "buggy_hunk": "n % 2 == 1",
        "ground_truth": "n % 2 == 0",
        "partial_decoy": "n % 2 == 2",
        "checks": [
            ("test_even", "source.is_even(4)", True),
            ("test_odd", "source.is_even(3)", False),
        ],
    },
    {
        "bug_id": "wrong_constant",
        "source": "def fahrenheit(celsius):\n    return celsius * 9 / 5 + 22\n",
        "buggy_hunk": "+ 22",
        "ground_truth": "+ 32",
        "partial_decoy": "+ 30",
        "checks": [("test_boiling", "source.fahrenheit(100)", 212.0)],
    },
    {
        "bug_id": "swapped_args",
        "source": (
            "def safe_divide(a, b):\n"
            "    if b == 0:\n"
            "        return 0.0\n"
            "    return b / a\n"
        ),
        "buggy_hunk": "return b / a",
        "ground_truth": "return a / b",
        "partial_decoy": "return a / a",
        "checks": [
            ("test_divide", "source.safe_divide(10, 4)", 2.5),
            ("test_divide_by_zero", "source.safe_divide(1, 0)", 0.0),
        ],
    },
]

UNCOMPILABLE_DECOY = "this is not ) valid ( python"


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory) -> dict[str, BugBundle]:
    """Five runnable bug bundles, keyed by bug id. Treat as read-only;
    copy with copy_corpus before mutating bundle directories."""
    root = tmp_path_factory.mktemp("corpus")
    bundles = {}
    for spec in BUNDLE_SPECS:
        bundles[spec["bug_id"]] = build_python_bundle(
            root,
            spec["bug_id"],
            spec["source"],
            spec["buggy_hunk"],
            spec["ground_truth"],
            spec["checks"],
            one_shot=spec.get("one_shot"),
        )
    return bundles


@pytest.fixture(scope="session")
def corpus_specs() -> dict[str, dict]:
    return {spec["bug_id"]: spec for spec in BUNDLE_SPECS}


def copy_corpus(mini_corpus: dict[str, BugBundle], dest: Path) -> dict[str, BugBundle]:
    """Clone the corpus into dest so tests can add files (e.g. reply scripts)."""
    cloned = {}
    for bug_id, bundle in mini_corpus.items():
        target = dest / bug_id
        shutil.copytree(bundle.root, target)
        cloned[bug_id] = load_bundle(target)
    return cloned


def fenced(patch_text: str, chatter: str = "Here is a candidate fix.") -> str:
    """Wrap a patch the way a chat model would."""
    return f"{chatter}\n```\n{patch_text}\n```\n"


def reply(texts: list[str], input_tokens: int = 100, output_tokens: int = 40) -> dict:
    return {
        "choices": [fenced(t) for t in texts],
        "usage": {"input_tokens": input_tokens, "output_tokens": output_tokens},
    }


def marker_evaluator(log: list[str] | None = None):
    """Fast fake evaluator classifying patches by marker words; records
    every evaluated text so tests can assert nothing is tested twice."""

    def _evaluate(text: str) -> PatchStatus:
        if log is not None:
            log.append(text)
        if "plausible" in text:
            return PatchStatus.plausible()
        if "uncompilable" in text:
            return PatchStatus.uncompilable("compile error: boom")
        match = re.search(r"fail_tag_(\w+)", text)
        tag = match.group(1) if match else "generic"
        return PatchStatus.partial(TestFailure(f"test_{tag}", "", f"assertion {tag} failed"))

    return _evaluate
