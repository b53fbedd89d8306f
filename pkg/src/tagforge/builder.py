"""Top-down hierarchical vocabulary construction.

Breadth-first over the tree: every node whose item set reaches the split
threshold is refined into children, items are routed into children under
the configured branching factor, and a checkpoint lands after every
completed node so an interrupted build resumes without re-refining
anything already committed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus
from .gateway import BudgetExhaustedError, Gateway
from .refinement import RefinementError, RefinementLog, log_from_json, refine
from .vocab import BuildConfig, DescriptorNode, VocabularyTree


class BuildInterrupted(RuntimeError):
    """Build stopped early (budget exhausted); a checkpoint was persisted."""

    def __init__(self, message: str, state: "BuildState"):
        super().__init__(message)
        self.state = state


@dataclass
class BuildReport:
    nodes_refined: list[str] = field(default_factory=list)
    nodes_failed: list[str] = field(default_factory=list)
    degenerate_splits: list[str] = field(default_factory=list)
    residue: dict[str, int] = field(default_factory=dict)
    interrupted: bool = False

    def to_json(self) -> dict:
        return {"nodes_refined": self.nodes_refined,
                "nodes_failed": self.nodes_failed,
                "degenerate_splits": self.degenerate_splits,
                "residue": self.residue,
                "interrupted": self.interrupted}


@dataclass
class BuildState:
    tree: VocabularyTree
    completed: set[str]
    logs: list[RefinementLog]
    report: BuildReport
    ledger_snapshot: dict | None = None


def branch_items(assignments: dict[str, list[str]], branching_factor: int,
                 seed: int) -> dict[str, set[str]]:
    """Route each item into children per the branching factor.

    0 keeps every matched child; b >= 1 keeps a seeded-random sample of at
    most b of them. The choice depends only on (seed, item_id), so it is
    stable under re-runs and independent of iteration order.
    """
    routed: dict[str, set[str]] = {}
    for item_id in sorted(assignments):
        children = sorted(assignments[item_id])
        if not children:
            continue
        if branching_factor == 0 or len(children) <= branching_factor:
            chosen = children
        else:
            rng = random.Random(f"{seed}:{item_id}")
            chosen = rng.sample(children, branching_factor)
        for child in chosen:
            routed.setdefault(child, set()).add(item_id)
    return routed


def save_checkpoint(path: str | Path, state: BuildState,
                    ledger=None) -> None:
    payload = {
        "tree": state.tree.to_json(),
        "items": {rid: sorted(node.items)
                  for rid, node in state.tree.nodes.items()},
        "completed": sorted(state.completed),
        "logs": [log.to_json() for log in state.logs],
        "report": state.report.to_json(),
        "ledger": ledger.snapshot() if ledger is not None else None,
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> BuildState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    tree = VocabularyTree.__new__(VocabularyTree)
    tree.root_id = payload["tree"]["root"]
    tree.config = payload["tree"].get("config", {})
    tree.nodes = {}
    tree.children = {}
    for rid, raw in payload["tree"]["nodes"].items():
        tree.nodes[rid] = DescriptorNode(
            rule_id=rid, name=raw["name"], description=raw["description"],
            parent=raw["parent"], depth=raw["depth"],
            items=set(payload["items"].get(rid, [])),
            status=raw.get("status", "active"))
        tree.children.setdefault(rid, [])
    for rid, node in tree.nodes.items():
        if node.parent is not None:
            tree.children.setdefault(node.parent, []).append(rid)
    for rid in tree.children:
        tree.children[rid].sort()
    report_raw = payload.get("report", {})
    report = BuildReport(
        nodes_refined=list(report_raw.get("nodes_refined", [])),
        nodes_failed=list(report_raw.get("nodes_failed", [])),
        degenerate_splits=list(report_raw.get("degenerate_splits", [])),
        residue={k: int(v) for k, v in report_raw.get("residue", {}).items()},
    )
    logs = [log_from_json(row) for row in payload.get("logs", [])]
    return BuildState(tree=tree, completed=set(payload["completed"]),
                      logs=logs, report=report,
                      ledger_snapshot=payload.get("ledger"))


def build_vocabulary(corpus: Corpus, config: BuildConfig, gateway: Gateway,
                     provider, checkpoint_path: str | Path | None = None,
                     resume_state: BuildState | None = None) -> BuildState:
    """Run the full hierarchical build; returns the final state.

    With a ``checkpoint_path``, state is persisted after every committed
    node; on :class:`BudgetExhaustedError` the partial state is saved and a
    :class:`BuildInterrupted` carrying it is raised. Pass a loaded
    checkpoint as ``resume_state`` to continue a prior run: completed nodes
    are skipped without issuing any calls.
    """
    if resume_state is not None:
        state = resume_state
    else:
        tree = VocabularyTree(root_items=set(corpus.item_ids),
                              config=config.to_json())
        state = BuildState(tree=tree, completed=set(), logs=[],
                           report=BuildReport())
    tree = state.tree

    for depth in range(1, config.d_max + 1):
        parents = [n for n in tree.level_nodes(depth - 1)
                   if len(n.items) >= config.tau_split]
        if not parents:
            break
        for parent in parents:
            if parent.rule_id in state.completed:
                continue
            try:
                result = refine([corpus.get(i) for i in sorted(parent.items)],
                                parent, tree, config, gateway, provider)
            except BudgetExhaustedError as exc:
                state.report.interrupted = True
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, state, gateway.ledger)
                raise BuildInterrupted(str(exc), state) from exc
            except RefinementError as exc:
                state.report.nodes_failed.append(parent.rule_id)
                state.report.residue[parent.rule_id] = len(parent.items)
                state.logs.append(RefinementLog(
                    rule_id=parent.rule_id, depth=parent.depth,
                    n_items=len(parent.items), notes=[f"failed: {exc}"]))
                state.completed.add(parent.rule_id)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, state, gateway.ledger)
                continue
            _commit(tree, parent, result, config, state)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state, gateway.ledger)
    tree.validate()
    return state


def _commit(tree: VocabularyTree, parent: DescriptorNode, result,
            config: BuildConfig, state: BuildState) -> None:
    """Single-writer commit of one node's refinement result."""
    outcome = result.last_outcome
    routed = branch_items(outcome.assigned if outcome else {},
                          config.branching_factor, config.seed)
    covered: set[str] = set()
    for node in result.children:
        node.items = routed.get(node.rule_id, set())
        tree.add_child(parent.rule_id, node)
        covered |= node.items
    if len(result.children) == 1:
        state.report.degenerate_splits.append(parent.rule_id)
    if result.parent_status is not None:
        parent.status = result.parent_status
    # Items the final cycle could not place stay attached to the parent.
    residue = len(parent.items) - len(covered)
    if residue:
        state.report.residue[parent.rule_id] = residue
    state.logs.append(result.log)
    state.report.nodes_refined.append(parent.rule_id)
    state.completed.add(parent.rule_id)
