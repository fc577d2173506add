from __future__ import annotations

import json
from dataclasses import replace

import pytest

from cigar.domain import (
    BugBundle,
    LedgerRecord,
    PatchStatus,
    PromptKind,
    StatusKind,
    TestFailure,
    TokenLedger,
    grouping_key,
    load_bundle,
    write_bundle,
)
from cigar.errors import BundleError


class TestGroupingKey:
    def test_deterministic(self):
        failure = TestFailure("tFoo", "expected 2 but was 3", "AssertionError")
        assert grouping_key(failure) == grouping_key(failure)
        assert failure.grouping_key == grouping_key(failure)

    def test_temp_dir_paths_elided(self):
        # Hand-applied elision: both multi-segment absolute paths collapse
        # to the same placeholder, so the keys collide.
        a = TestFailure("test_io", "expected ok", "cannot open /tmp/pytest-123/work/data.txt: missing")
        b = TestFailure("test_io", "expected ok", "cannot open /tmp/pytest-987/run2/data.txt: missing")
        assert a.error_message != b.error_message
        assert a.grouping_key == b.grouping_key

    def test_memory_addresses_elided(self):
        a = TestFailure("test_obj", "", "<Widget object at 0x7f3a2b99> broke")
        b = TestFailure("test_obj", "", "<Widget object at 0x56aa1c01> broke")
        assert a.grouping_key == b.grouping_key

    def test_whitespace_runs_collapse(self):
        a = TestFailure("t", "expected  2   but was 3", "")
        b = TestFailure("t", "expected 2 but was 3", "")
        assert a.grouping_key == b.grouping_key

    def test_different_test_names_differ(self):
        a = TestFailure("test_one", "x", "y")
        b = TestFailure("test_two", "x", "y")
        assert a.grouping_key != b.grouping_key

    def test_relative_paths_survive(self):
        a = TestFailure("t", "", "module a/b failed")
        b = TestFailure("t", "", "module c/d failed")
        assert a.grouping_key != b.grouping_key


class TestPatchStatus:
    def test_partial_requires_failure(self):
        with pytest.raises(ValueError):
            PatchStatus(StatusKind.PARTIAL)

    def test_non_partial_rejects_failure(self):
        with pytest.raises(ValueError):
            PatchStatus(StatusKind.PLAUSIBLE, failure=TestFailure("t"))

    def test_constructors_and_roundtrip(self):
        statuses = [
            PatchStatus.unevaluated(),
            PatchStatus.plausible(),
            PatchStatus.partial(TestFailure("t", "a", "m")),
            PatchStatus.uncompilable("boom"),
            PatchStatus.extraction_failed(),
        ]
        for status in statuses:
            assert PatchStatus.from_dict(status.to_dict()) == status
        assert statuses[1].is_plausible
        assert statuses[2].is_partial


class TestLedger:
    def test_totals(self):
        ledger = TokenLedger()
        ledger.add(LedgerRecord("b", 1, 1, PromptKind.INITIATION, 100, 40))
        ledger.add(LedgerRecord("b", 1, 2, PromptKind.IMPROVEMENT, 50, 10))
        assert ledger.total_input_tokens == 150
        assert ledger.total_output_tokens == 50
        assert ledger.total_tokens == 200

    def test_rejects_negative_counts(self):
        with pytest.raises(ValueError):
            TokenLedger().add(LedgerRecord("b", 1, 1, PromptKind.INITIATION, -1, 0))


def _bundle(**overrides) -> BugBundle:
    base = dict(
        bug_id="demo",
        source_text="def f():\n    return 1\n",
        infill_span=(13, 21),
        failure=TestFailure("test_f", "expected 2", "AssertionError"),
        compile_cmd="true",
        test_cmd="true",
    )
    base.update(overrides)
    return BugBundle(**base)


class TestBundle:
    def test_buggy_hunk_matches_span(self):
        bundle = _bundle()
        assert bundle.buggy_hunk == "return 1"

    def test_span_out_of_bounds(self):
        with pytest.raises(BundleError, match="out of bounds"):
            _bundle(infill_span=(0, 999)).validate()

    def test_empty_commands_rejected(self):
        with pytest.raises(BundleError, match="compile_cmd"):
            _bundle(compile_cmd="  ").validate()
        with pytest.raises(BundleError, match="test_cmd"):
            _bundle(test_cmd="").validate()

    def test_one_shot_must_differ(self):
        with pytest.raises(BundleError, match="one-shot"):
            _bundle(one_shot=("same", "same")).validate()

    def test_content_hash_tracks_source(self):
        a = _bundle()
        b = _bundle(source_text="def f():\n    return 2\n")
        assert a.content_hash() != b.content_hash()
        assert a.content_hash() == _bundle().content_hash()


class TestBundleIO:
    def test_roundtrip(self, tmp_path):
        bundle = _bundle(
            ground_truth="return 2",
            one_shot=("return 0", "return 41"),
            failure_parse_rules={"failing_test": r"FAIL: (\w+)"},
        )
        write_bundle(bundle, tmp_path / "demo")
        loaded = load_bundle(tmp_path / "demo")
        assert loaded.bug_id == bundle.bug_id
        assert loaded.source_text == bundle.source_text
        assert loaded.infill_span == bundle.infill_span
        assert loaded.buggy_hunk == "return 1"
        assert loaded.ground_truth == "return 2"
        assert loaded.one_shot == ("return 0", "return 41")
        assert loaded.failure_parse_rules == {"failing_test": r"FAIL: (\w+)"}
        assert loaded.failure == bundle.failure
        assert loaded.root == tmp_path / "demo"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BundleError, match="no bundle.json"):
            load_bundle(tmp_path)

    def test_declared_hunk_mismatch(self, tmp_path):
        write_bundle(_bundle(), tmp_path / "demo")
        manifest_path = tmp_path / "demo" / "bundle.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["buggy_hunk"] = "something else"
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(BundleError, match="buggy_hunk"):
            load_bundle(tmp_path / "demo")

    def test_mini_corpus_bundles_are_consistent(self, mini_corpus):
        for bundle in mini_corpus.values():
            bundle.validate()
            assert bundle.source_text[slice(*bundle.infill_span)] == bundle.buggy_hunk
            assert bundle.ground_truth


def test_candidate_with_status_is_a_copy():
    from cigar.domain import PatchCandidate, Provenance

    candidate = PatchCandidate(
        "bug", "patch", Provenance(1, 1, 0, PromptKind.INITIATION)
    )
    updated = candidate.with_status(PatchStatus.plausible())
    assert candidate.status.kind is StatusKind.UNEVALUATED
    assert updated.status.is_plausible
    assert replace(updated, status=candidate.status) == candidate


class TestRepairConfig:
    def test_defaults_are_valid(self):
        from cigar.domain import RepairConfig

        RepairConfig().validate()

    def test_counts_must_be_positive(self):
        from cigar.domain import RepairConfig

        with pytest.raises(ValueError, match="max_invoke"):
            RepairConfig(max_invoke=0).validate()
        with pytest.raises(ValueError, match="temperature"):
            RepairConfig(temperature=-0.5).validate()
        with pytest.raises(ValueError, match="max_retries"):
            RepairConfig(max_retries=-1).validate()


def test_outcome_json_roundtrip(mini_corpus):
    from cigar.domain import RepairOutcome
    from cigar.llm import ScriptedProvider
    from cigar.orchestrator import repair
    from cigar.domain import RepairConfig
    import json as _json
    from conftest import marker_evaluator, reply

    bundle = mini_corpus["off_by_one"]
    config = RepairConfig(
        max_invoke=1, max_rounds=1, multiplication_invocations=1, prompt_token_limit=1_000_000
    )
    provider = ScriptedProvider([reply(["fix_plausible()"]), reply(["fix_plausible()"])])
    outcome = repair(bundle, config, provider, evaluate_fn=marker_evaluator())
    restored = RepairOutcome.from_dict(_json.loads(outcome.to_json()))
    assert restored.to_json() == outcome.to_json()
    assert restored.ground_truth == bundle.ground_truth
