"""Append-only JSON-lines index of run artifacts."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """One line per artifact: kind, key, path (relative to the run root),
    sha256 digest, timestamp. Keys are unique; re-adding a key with the same
    digest is a no-op, with a different digest the old line is dropped."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.jsonl"
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            for n, line in enumerate(self.path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{self.path}:{n}: malformed manifest line ({e.msg})") from None
                self._entries[rec["key"]] = rec

    @property
    def entries(self) -> list[dict]:
        return list(self._entries.values())

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def file(self, key: str) -> Path:
        return self.root / self._entries[key]["path"]

    def verify(self, key: str) -> bool:
        rec = self._entries.get(key)
        if rec is None:
            return False
        p = self.root / rec["path"]
        return p.exists() and file_digest(p) == rec["digest"]

    def problems(self) -> list[str]:
        out = []
        for key, rec in self._entries.items():
            p = self.root / rec["path"]
            if not p.exists():
                out.append(f"{key}: file {rec['path']} missing")
            elif file_digest(p) != rec["digest"]:
                out.append(f"{key}: digest mismatch for {rec['path']}")
        return out

    def add(self, kind: str, key: str, path) -> dict:
        path = Path(path)
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        digest = file_digest(path)
        with self._lock:
            old = self._entries.get(key)
            if old is not None and old["digest"] == digest and old["path"] == rel and old["kind"] == kind:
                return old
            rec = {
                "kind": kind,
                "key": key,
                "path": rel,
                "digest": digest,
                "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            }
            if old is not None:
                del self._entries[key]
                self._entries[key] = rec
                self._rewrite()
            else:
                self._entries[key] = rec
                self.root.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(_line(rec))
            return rec

    def _rewrite(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text("".join(_line(r) for r in self._entries.values()))
        os.replace(tmp, self.path)


def _line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"


def strip_timestamps(text: str) -> str:
    """Manifest text with timestamps removed, for run-to-run comparison."""
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            rec.pop("timestamp", None)
            out.append(_line(rec))
    return "".join(out)
