"""Run-directory layout, stage manifest, and the single-writer lock.

Each pipeline stage records a hash of its inputs in ``manifest.json``; a
stage whose hash matches and whose outputs still exist is skipped, which
makes every subcommand idempotent for unchanged inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path


class RunDirError(RuntimeError):
    pass


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @property
    def config(self) -> Path: return self.root / "config.json"
    @property
    def manifest(self) -> Path: return self.root / "manifest.json"
    @property
    def lock(self) -> Path: return self.root / ".lock"
    @property
    def corpus(self) -> Path: return self.root / "corpus.jsonl"
    @property
    def interactions(self) -> Path: return self.root / "interactions.jsonl"
    @property
    def splits(self) -> Path: return self.root / "splits.jsonl"
    @property
    def ledger(self) -> Path: return self.root / "ledger.jsonl"
    @property
    def transcript(self) -> Path: return self.root / "transcript.jsonl"
    @property
    def vocab(self) -> Path: return self.root / "vocab.json"
    @property
    def vocab_items(self) -> Path: return self.root / "vocab_items.jsonl"
    @property
    def checkpoint(self) -> Path: return self.root / "vocab.checkpoint.json"
    @property
    def refinement_logs(self) -> Path: return self.root / "refinement_logs.jsonl"
    @property
    def build_report(self) -> Path: return self.root / "build_report.json"
    @property
    def assignments(self) -> Path: return self.root / "assignments.jsonl"
    @property
    def semids(self) -> Path: return self.root / "semids.jsonl"
    @property
    def token_map(self) -> Path: return self.root / "token_map.json"
    @property
    def fixed_slots(self) -> Path: return self.root / "fixed_slots.csv"
    @property
    def model(self) -> Path: return self.root / "model.bin"
    @property
    def reports(self) -> Path: return self.root / "reports"

    def ensure(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(exist_ok=True)


def inputs_hash(*parts: object) -> str:
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, Path):
            digest.update(str(part).encode())
            if part.exists():
                digest.update(part.read_bytes())
        else:
            digest.update(json.dumps(part, sort_keys=True, default=str).encode())
        digest.update(b"\x00")
    return digest.hexdigest()


def load_manifest(paths: RunPaths) -> dict:
    if paths.manifest.exists():
        return json.loads(paths.manifest.read_text(encoding="utf-8"))
    return {}


def stage_is_current(paths: RunPaths, stage: str, digest: str,
                     outputs: list[Path]) -> bool:
    manifest = load_manifest(paths)
    entry = manifest.get(stage)
    if not entry or entry.get("inputs_hash") != digest:
        return False
    return all(p.exists() for p in outputs)


def mark_stage(paths: RunPaths, stage: str, digest: str,
               outputs: list[Path]) -> None:
    manifest = load_manifest(paths)
    manifest[stage] = {"inputs_hash": digest,
                       "outputs": [str(p) for p in outputs]}
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                              encoding="utf-8")


class RunLock:
    """Exclusive-create lock file; one pipeline stage per run dir at a time."""

    def __init__(self, paths: RunPaths):
        self._path = paths.lock
        self._held = False

    def __enter__(self) -> "RunLock":
        try:
            fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(
                f"run directory is locked by another process ({self._path}); "
                "remove the lock file if that process is gone") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc_info) -> None:
        if self._held:
            try:
                self._path.unlink()
            except FileNotFoundError:
                pass
            self._held = False
