"""Append-only, replayable cache of LLM exchanges and evaluation results.

Layout: one JSON-lines log per bug at cache/<bug_id>/log.jsonl plus a
cache/index.json mapping fingerprints to bug ids. Records are content-
addressed by fingerprint and carry a payload checksum; a truncated tail
record is ignored with a warning, any other integrity violation is an
error. Per-bug logs are independently locked so parallel bug repairs can
write concurrently.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any

from filelock import FileLock

from .errors import StorageError

logger = logging.getLogger(__name__)

STORE_SCHEMA_VERSION = 1
INDEX_FILE = "index.json"
LOG_FILE = "log.jsonl"


class StoreMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


class RecordKind(str, Enum):
    LLM_EXCHANGE = "LlmExchange"
    EVALUATION = "Evaluation"


def _payload_checksum(payload: dict[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:32]


@dataclass(frozen=True)
class CacheRecord:
    fingerprint: str
    kind: RecordKind
    bug_id: str
    payload: dict[str, Any]
    created_at: str
    template_version: str = ""

    @classmethod
    def fresh(
        cls,
        fingerprint: str,
        kind: RecordKind,
        bug_id: str,
        payload: dict[str, Any],
        template_version: str = "",
    ) -> "CacheRecord":
        return cls(
            fingerprint=fingerprint,
            kind=kind,
            bug_id=bug_id,
            payload=payload,
            created_at=datetime.now(timezone.utc).isoformat(),
            template_version=template_version,
        )

    def to_line(self) -> str:
        data = {
            "v": STORE_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "kind": self.kind.value,
            "bug_id": self.bug_id,
            "payload": self.payload,
            "created_at": self.created_at,
            "template_version": self.template_version,
            "checksum": _payload_checksum(self.payload),
        }
        return json.dumps(data, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_line(cls, line: str) -> "CacheRecord":
        data = json.loads(line)
        record = cls(
            fingerprint=data["fingerprint"],
            kind=RecordKind(data["kind"]),
            bug_id=data["bug_id"],
            payload=data["payload"],
            created_at=data["created_at"],
            template_version=data.get("template_version", ""),
        )
        expected = data.get("checksum")
        if expected is not None and expected != _payload_checksum(record.payload):
            raise StorageError(
                f"corrupt cache record {record.fingerprint}: payload checksum mismatch"
            )
        return record


class CacheStore:
    """Durable record/replay store rooted at a cache directory."""

    def __init__(self, root: str | Path, mode: StoreMode = StoreMode.RECORD):
        self.root = Path(root)
        self._mode = StoreMode(mode)
        self._records: dict[str, CacheRecord] = {}
        self._loaded = False
        self._mutex = threading.Lock()
        self._bug_locks: dict[str, threading.Lock] = {}

    def mode(self) -> StoreMode:
        return self._mode

    # -- loading ---------------------------------------------------------

    def _ensure_loaded(self) -> None:
        with self._mutex:
            if self._loaded:
                return
            if self.root.is_dir():
                for log_path in sorted(self.root.glob(f"*/{LOG_FILE}")):
                    self._load_log(log_path)
            self._loaded = True

    def _load_log(self, log_path: Path) -> None:
        try:
            raw = log_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read {log_path}: {exc}") from exc
        lines = raw.splitlines()
        for lineno, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                record = CacheRecord.from_line(line)
            except json.JSONDecodeError as exc:
                if lineno == len(lines) - 1:
                    logger.warning(
                        "ignoring truncated tail record in %s (line %d): %s",
                        log_path,
                        lineno + 1,
                        exc,
                    )
                    continue
                raise StorageError(f"corrupt record at {log_path}:{lineno + 1}: {exc}") from exc
            self._records[record.fingerprint] = record

    def _lock_for(self, bug_id: str) -> threading.Lock:
        with self._mutex:
            return self._bug_locks.setdefault(bug_id, threading.Lock())

    # -- api -------------------------------------------------------------

    def get(self, fingerprint: str) -> CacheRecord | None:
        self._ensure_loaded()
        return self._records.get(fingerprint)

    def put(self, record: CacheRecord) -> None:
        """Durably append a record. Re-putting an identical payload is a
        no-op; a different payload under an existing fingerprint is
        corruption."""
        if self._mode is StoreMode.PASSTHROUGH:
            return
        self._ensure_loaded()
        with self._lock_for(record.bug_id):
            existing = self._records.get(record.fingerprint)
            if existing is not None:
                if existing.payload == record.payload and existing.kind == record.kind:
                    return
                raise StorageError(
                    f"fingerprint {record.fingerprint} already stored with a different payload"
                )
            log_dir = self.root / record.bug_id
            try:
                log_dir.mkdir(parents=True, exist_ok=True)
                log_path = log_dir / LOG_FILE
                with FileLock(str(log_path) + ".lock"):
                    with open(log_path, "a", encoding="utf-8") as handle:
                        handle.write(record.to_line() + "\n")
                        handle.flush()
                        os.fsync(handle.fileno())
            except OSError as exc:
                raise StorageError(f"cannot append to {log_dir}: {exc}") from exc
            with self._mutex:
                self._records[record.fingerprint] = record
        self._write_index()

    def _write_index(self) -> None:
        """Best-effort fingerprint index; the logs remain the ground truth."""
        index = {
            "v": STORE_SCHEMA_VERSION,
            "fingerprints": {fp: rec.bug_id for fp, rec in sorted(self._records.items())},
        }
        index_path = self.root / INDEX_FILE
        try:
            with FileLock(str(index_path) + ".lock"):
                index_path.write_text(
                    json.dumps(index, sort_keys=True, ensure_ascii=False, indent=1) + "\n",
                    encoding="utf-8",
                )
        except OSError as exc:
            logger.warning("could not write cache index %s: %s", index_path, exc)

    def records_for(self, bug_id: str) -> list[CacheRecord]:
        self._ensure_loaded()
        return [rec for rec in self._records.values() if rec.bug_id == bug_id]


def evaluation_fingerprint(bundle_hash: str, patch_text: str) -> str:
    patch_hash = hashlib.sha256(patch_text.encode("utf-8")).hexdigest()[:32]
    key = f"evaluation\x1f{bundle_hash}\x1f{patch_hash}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:32]
