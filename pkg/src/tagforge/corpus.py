"""Item corpus and interaction-log ingestion with chronological splitting.

Items and interactions arrive as JSONL. Splitting follows the last-out
protocol: per user, the final interaction (by timestamp, ties broken by
input order) becomes the test item, the second-last the validation item,
and everything earlier the training sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class CorpusError(ValueError):
    """Malformed or inconsistent corpus / interaction input."""


@dataclass
class IngestReport:
    """Mutable counters filled by the lenient loaders."""

    malformed_lines: int = 0
    unknown_items: int = 0
    excluded_users: int = 0
    notes: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str = ""
    body: str = ""
    extras: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.item_id:
            raise CorpusError("item_id must be non-empty")
        if not self.title and not self.body:
            raise CorpusError(f"item {self.item_id!r}: title and body are both empty")

    def prompt_text(self, budget: int = 1500) -> str:
        """Item text as fed to LLM prompts: title, newline, body, truncated."""
        text = f"{self.title}\n{self.body}".strip()
        return text[:budget]


class Corpus:
    """Ordered item collection with a unique item_id index.

    Iteration order is the input order and is stable. Read-only after
    construction; safe for concurrent readers.
    """

    def __init__(self, items: list[Item]):
        if not items:
            raise CorpusError("corpus has zero items")
        self._items = list(items)
        self._index: dict[str, int] = {}
        for pos, item in enumerate(self._items):
            if item.item_id in self._index:
                raise CorpusError(f"duplicate item_id {item.item_id!r}")
            self._index[item.item_id] = pos

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def get(self, item_id: str) -> Item:
        return self._items[self._index[item_id]]

    def position(self, item_id: str) -> int:
        return self._index[item_id]

    @property
    def item_ids(self) -> list[str]:
        return [item.item_id for item in self._items]


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class SplitDataset:
    """Last-out split: per user one test item, one validation item, the rest train."""

    train: dict[str, list[str]]
    valid: dict[str, str]
    test: dict[str, str]
    n_excluded_users: int = 0

    @property
    def users(self) -> list[str]:
        return sorted(self.train)


def load_corpus(path: str | Path, lenient: bool = False,
                report: IngestReport | None = None) -> Corpus:
    """Read one JSON object per line into a Corpus.

    Strict mode (default) raises on the first malformed line or duplicate
    item_id, naming the line number. Lenient mode skips malformed lines and
    counts them in ``report``; duplicate ids are an error in both modes.
    """
    path = Path(path)
    items: list[Item] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                item = Item(
                    item_id=str(raw["item_id"]),
                    title=str(raw.get("title", "")),
                    body=str(raw.get("body", "")),
                    extras={str(k): str(v) for k, v in raw.get("extras", {}).items()},
                )
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, CorpusError) as exc:
                if lenient:
                    if report is not None:
                        report.malformed_lines += 1
                    continue
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if item.item_id in seen:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate item_id {item.item_id!r} "
                    f"(first seen at line {seen[item.item_id]})"
                )
            seen[item.item_id] = lineno
            items.append(item)
    if not items:
        raise CorpusError(f"{path}: zero valid items")
    return Corpus(items)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for item in corpus:
            row = {"item_id": item.item_id, "title": item.title,
                   "body": item.body, "extras": item.extras}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_interactions(path: str | Path, corpus: Corpus | None = None,
                      strict: bool = True,
                      report: IngestReport | None = None) -> list[Interaction]:
    """Read interaction JSONL sorted by (user_id, timestamp, input order).

    Interactions referencing item_ids absent from ``corpus`` are an error in
    strict mode and are dropped (and counted in ``report``) otherwise.
    """
    path = Path(path)
    rows: list[tuple[str, int, int, str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                user_id = str(raw["user_id"])
                item_id = str(raw["item_id"])
                timestamp = int(raw["timestamp"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if corpus is not None and item_id not in corpus:
                if strict:
                    raise CorpusError(f"{path}:{lineno}: unknown item_id {item_id!r}")
                if report is not None:
                    report.unknown_items += 1
                continue
            rows.append((user_id, timestamp, lineno, item_id))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return [Interaction(user_id=u, item_id=i, timestamp=t) for u, t, _, i in rows]


def write_interactions(interactions: list[Interaction], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in interactions:
            fh.write(json.dumps({"user_id": rec.user_id, "item_id": rec.item_id,
                                 "timestamp": rec.timestamp}) + "\n")


def last_out_split(interactions: list[Interaction],
                   report: IngestReport | None = None) -> SplitDataset:
    """Split sorted interactions: last item test, second-last valid, rest train.

    Users with fewer than 3 interactions are excluded and counted. Input must
    already be sorted as produced by :func:`load_interactions`; timestamp ties
    keep input order.
    """
    per_user: dict[str, list[str]] = {}
    for rec in interactions:
        per_user.setdefault(rec.user_id, []).append(rec.item_id)
    train: dict[str, list[str]] = {}
    valid: dict[str, str] = {}
    test: dict[str, str] = {}
    excluded = 0
    for user_id, seq in per_user.items():
        if len(seq) < 3:
            excluded += 1
            continue
        train[user_id] = seq[:-2]
        valid[user_id] = seq[-2]
        test[user_id] = seq[-1]
    if report is not None:
        report.excluded_users += excluded
    return SplitDataset(train=train, valid=valid, test=test, n_excluded_users=excluded)


def write_splits(split: SplitDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for user_id in sorted(split.train):
            fh.write(json.dumps({"split": "train", "user_id": user_id,
                                 "item_ids": split.train[user_id]}) + "\n")
            fh.write(json.dumps({"split": "valid", "user_id": user_id,
                                 "item_id": split.valid[user_id]}) + "\n")
            fh.write(json.dumps({"split": "test", "user_id": user_id,
                                 "item_id": split.test[user_id]}) + "\n")


def read_splits(path: str | Path) -> SplitDataset:
    path = Path(path)
    train: dict[str, list[str]] = {}
    valid: dict[str, str] = {}
    test: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            kind = raw["split"]
            if kind == "train":
                train[raw["user_id"]] = list(raw["item_ids"])
            elif kind == "valid":
                valid[raw["user_id"]] = raw["item_id"]
            elif kind == "test":
                test[raw["user_id"]] = raw["item_id"]
            else:
                raise CorpusError(f"unknown split kind {kind!r}")
    return SplitDataset(train=train, valid=valid, test=test)
