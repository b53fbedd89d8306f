"""Final vocabulary assignment and semantic-ID export.

Each item gets one descriptor per level via a greedy descent (one annotator
call per visited level), or a single whole-vocabulary call in one-shot
mode. Items sharing a path receive collision-resolver ranks so that
(path, resolver) is a bijection onto items, and the result exports both as
token sequences and as fixed-slot categorical features.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import prompts, wire
from .corpus import Corpus
from .gateway import (AgentRole, BudgetExhaustedError, Gateway,
                      TransportExhaustedError)
from .protocol import (STOP, ProtocolError, parse_best_rule, parse_path_choice)
from .vocab import VocabularyTree

BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
SPECIALS = (BOS, EOS, SEP)

NONE_SLOT = "NONE"


class AssignmentError(ValueError):
    pass


@dataclass
class AssignmentRecord:
    item_id: str
    path: tuple[str, ...]
    resolver: int | None = None
    terminated: bool = False
    flag: str | None = None


@dataclass
class VocabStats:
    n_descriptors_total: int
    n_descriptors_used: int
    n_resolvers: int
    utilization: float
    per_level_cardinality: dict[int, int]
    items_per_descriptor: dict[int, int]

    @property
    def vocab_size_label(self) -> str:
        """Base-plus-resolver notation, e.g. '2487+80'."""
        return f"{self.n_descriptors_total}+{self.n_resolvers}"

    def to_json(self) -> dict:
        return {
            "n_descriptors_total": self.n_descriptors_total,
            "n_descriptors_used": self.n_descriptors_used,
            "n_resolvers": self.n_resolvers,
            "utilization": self.utilization,
            "vocab_size": self.vocab_size_label,
            "per_level_cardinality": {str(k): v for k, v
                                      in sorted(self.per_level_cardinality.items())},
            "items_per_descriptor": {str(k): v for k, v
                                     in sorted(self.items_per_descriptor.items())},
        }


def assign_paths(corpus: Corpus, tree: VocabularyTree, gateway: Gateway,
                 parallelism: int = 8, mode: str = "per-level",
                 item_text_budget: int = 1500) -> list[AssignmentRecord]:
    """Assign a descriptor path to every item (resolver left unset).

    ``per-level`` descends greedily, presenting only the current node's
    children and asking for the single best child or STOP. ``one-shot``
    presents the whole vocabulary once and asks for a complete path.
    Per-item failures yield an empty or truncated path with a flag; the
    batch never aborts.
    """
    if mode not in ("per-level", "one-shot"):
        raise AssignmentError(f"unknown assignment mode {mode!r}")
    worker = _descend if mode == "per-level" else _one_shot
    results: dict[str, AssignmentRecord] = {}
    budget_error: BudgetExhaustedError | None = None
    items = list(corpus)
    with ThreadPoolExecutor(max_workers=max(1, min(parallelism, len(items)))) as pool:
        futures = {pool.submit(worker, item, tree, gateway, item_text_budget): item
                   for item in items}
        for future, item in futures.items():
            try:
                results[item.item_id] = future.result()
            except BudgetExhaustedError as exc:
                budget_error = exc
            except (TransportExhaustedError, ProtocolError) as exc:
                results[item.item_id] = AssignmentRecord(
                    item_id=item.item_id, path=(), terminated=True,
                    flag=f"transport: {exc}")
    if budget_error is not None:
        raise budget_error
    max_depth = tree.max_depth()
    records = []
    for item_id in sorted(results):
        rec = results[item_id]
        rec.terminated = len(rec.path) < max_depth
        records.append(rec)
    return records


def _descend(item, tree: VocabularyTree, gateway: Gateway,
             budget: int) -> AssignmentRecord:
    node = tree.root
    path: list[str] = []
    flag = None
    while True:
        children = tree.children_of(node.rule_id)
        if not children:
            break
        prompt = prompts.render_prompt(prompts.ASSIGN_ITEM, {
            "rules_text": wire.rules_text(children),
            "item_text": wire.item_line(item.item_id, item.prompt_text(budget)),
            "instruction": prompts.ASSIGN_BEST_INSTRUCTION,
        })
        try:
            choice = gateway.complete_parsed(AgentRole.ANNOTATOR, prompt,
                                             prompts.ASSIGN_ITEM, parse_best_rule)
        except ProtocolError:
            flag = "truncated: unparseable choice"
            break
        if choice == STOP:
            break
        child = next((c for c in children if c.rule_id == choice), None)
        if child is None:
            flag = "truncated: unknown rule id"
            break
        path.append(child.rule_id)
        node = child
    if not path and flag is None:
        flag = "no-path"
    return AssignmentRecord(item_id=item.item_id, path=tuple(path), flag=flag)


def _one_shot(item, tree: VocabularyTree, gateway: Gateway,
              budget: int) -> AssignmentRecord:
    lines = [wire.rule_line(n.rule_id, n.name, n.description, indent=n.depth - 1)
             for n in tree.descriptor_nodes()]
    prompt = prompts.render_prompt(prompts.ASSIGN_ITEM, {
        "rules_text": "\n".join(lines),
        "item_text": wire.item_line(item.item_id, item.prompt_text(budget)),
        "instruction": prompts.ASSIGN_PATH_INSTRUCTION,
    })
    flag = None
    try:
        chosen = gateway.complete_parsed(AgentRole.ANNOTATOR, prompt,
                                         prompts.ASSIGN_ITEM, parse_path_choice)
    except ProtocolError:
        return AssignmentRecord(item_id=item.item_id, path=(),
                                flag="truncated: unparseable choice")
    path: list[str] = []
    parent_id = tree.root_id
    for rule_id in chosen:
        node = tree.nodes.get(rule_id)
        if node is None or node.parent != parent_id:
            flag = "truncated: path violates tree edges"
            break
        path.append(rule_id)
        parent_id = rule_id
    if not path and flag is None:
        flag = "no-path"
    return AssignmentRecord(item_id=item.item_id, path=tuple(path), flag=flag)


def resolve_collisions(records: list[AssignmentRecord]) -> list[AssignmentRecord]:
    """Rank items sharing a path by item_id; ranks become resolver tokens."""
    by_path: dict[tuple[str, ...], list[AssignmentRecord]] = {}
    for rec in records:
        by_path.setdefault(rec.path, []).append(rec)
    for group in by_path.values():
        group.sort(key=lambda r: r.item_id)
        for rank, rec in enumerate(group):
            rec.resolver = rank
    return sorted(records, key=lambda r: r.item_id)


@dataclass
class SemidRow:
    item_id: str
    tokens: list[int]
    path_names: list[str]


@dataclass
class SemidTable:
    rows: list[SemidRow]
    token_map: dict[int, str]

    def row_of(self, item_id: str) -> SemidRow:
        if not hasattr(self, "_by_id"):
            self._by_id = {r.item_id: r for r in self.rows}
        return self._by_id[item_id]

    @property
    def special_tokens(self) -> dict[str, int]:
        return {name: tok for tok, name in self.token_map.items()
                if name.startswith("special:")}

    def save(self, rows_path: str | Path, map_path: str | Path) -> None:
        with Path(rows_path).open("w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps({"item_id": row.item_id,
                                     "tokens": row.tokens,
                                     "path_names": row.path_names}) + "\n")
        Path(map_path).write_text(
            json.dumps({str(k): v for k, v in sorted(self.token_map.items())},
                       indent=2), encoding="utf-8")

    @classmethod
    def load(cls, rows_path: str | Path, map_path: str | Path) -> "SemidTable":
        token_map = {int(k): v for k, v in json.loads(
            Path(map_path).read_text(encoding="utf-8")).items()}
        rows = []
        with Path(rows_path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    raw = json.loads(line)
                    rows.append(SemidRow(item_id=raw["item_id"],
                                         tokens=list(raw["tokens"]),
                                         path_names=list(raw["path_names"])))
        return cls(rows=rows, token_map=token_map)


def export_semids(records: list[AssignmentRecord],
                  tree: VocabularyTree) -> SemidTable:
    """Token sequences [path tokens..., resolver token, EOS] per item.

    Descriptor tokens are assigned by (depth, rule_id) order after the
    specials; resolver values live in a disjoint range above them.
    """
    unresolved = [r.item_id for r in records if r.resolver is None]
    if unresolved:
        raise AssignmentError(
            f"unresolved collisions for {len(unresolved)} items "
            f"(e.g. {unresolved[0]})")
    token_map: dict[int, str] = {}
    token_of: dict[str, int] = {}
    for i, name in enumerate(SPECIALS):
        token_map[i] = f"special:{name}"
        token_of[name] = i
    next_token = len(SPECIALS)
    for node in tree.descriptor_nodes():
        token_map[next_token] = node.rule_id
        token_of[node.rule_id] = next_token
        next_token += 1
    max_resolver = max(r.resolver for r in records)
    for value in range(max_resolver + 1):
        token_map[next_token] = f"resolver:{value}"
        token_of[f"resolver:{value}"] = next_token
        next_token += 1
    rows = []
    for rec in sorted(records, key=lambda r: r.item_id):
        tokens = [token_of[rule_id] for rule_id in rec.path]
        tokens.append(token_of[f"resolver:{rec.resolver}"])
        tokens.append(token_of[EOS])
        names = [tree.node(rule_id).name for rule_id in rec.path]
        rows.append(SemidRow(item_id=rec.item_id, tokens=tokens,
                             path_names=names))
    return SemidTable(rows=rows, token_map=token_map)


def decode_semids(table: SemidTable) -> list[AssignmentRecord]:
    """Invert :func:`export_semids`; exact round-trip."""
    eos_token = {v: k for k, v in table.token_map.items()}[f"special:{EOS}"]
    records = []
    for row in table.rows:
        tokens = list(row.tokens)
        if tokens and tokens[-1] == eos_token:
            tokens = tokens[:-1]
        if not tokens:
            raise AssignmentError(f"{row.item_id}: empty token sequence")
        resolver_name = table.token_map[tokens[-1]]
        if not resolver_name.startswith("resolver:"):
            raise AssignmentError(f"{row.item_id}: sequence lacks a resolver token")
        path = tuple(table.token_map[t] for t in tokens[:-1])
        records.append(AssignmentRecord(
            item_id=row.item_id, path=path,
            resolver=int(resolver_name.split(":", 1)[1])))
    return records


def export_fixed_slots(records: list[AssignmentRecord], tree: VocabularyTree,
                       n_slots: int) -> list[dict[str, str]]:
    """Fixed-slot nominal features: slot k holds the depth-(k+1) rule id."""
    max_len = max((len(r.path) for r in records), default=0)
    if n_slots < max_len:
        raise AssignmentError(
            f"n_slots={n_slots} is smaller than the longest path ({max_len})")
    rows = []
    for rec in sorted(records, key=lambda r: r.item_id):
        row = {"item_id": rec.item_id}
        for slot in range(n_slots):
            row[f"slot_{slot + 1}"] = (rec.path[slot] if slot < len(rec.path)
                                       else NONE_SLOT)
        rows.append(row)
    return rows


def write_fixed_slots_csv(rows: list[dict[str, str]], path: str | Path) -> None:
    if not rows:
        raise AssignmentError("no rows to write")
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def vocab_stats(records: list[AssignmentRecord],
                tree: VocabularyTree) -> VocabStats:
    """Descriptor usage statistics, including the utilization rate."""
    usage: dict[str, int] = {}
    per_level: dict[int, set[str]] = {}
    for rec in records:
        for depth, rule_id in enumerate(rec.path, start=1):
            usage[rule_id] = usage.get(rule_id, 0) + 1
            per_level.setdefault(depth, set()).add(rule_id)
    used = len(usage)
    reused = sum(1 for count in usage.values() if count >= 2)
    histogram: dict[int, int] = {}
    for count in usage.values():
        histogram[count] = histogram.get(count, 0) + 1
    n_resolvers = (max((r.resolver for r in records
                        if r.resolver is not None), default=-1) + 1)
    return VocabStats(
        n_descriptors_total=len(tree.descriptor_nodes()),
        n_descriptors_used=used,
        n_resolvers=n_resolvers,
        utilization=(reused / used) if used else 0.0,
        per_level_cardinality={d: len(s) for d, s in per_level.items()},
        items_per_descriptor=histogram,
    )
