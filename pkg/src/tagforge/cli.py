"""Pipeline operator surface.

Subcommands run one stage each against a run directory: ingest,
build-vocab, assign, encode, fit, recommend, evaluate, critique-eval,
baseline-freeform, report, resume. Config comes from a JSON file
(``--config``) with flag overrides; stages are idempotent via the run
manifest, and a lock file keeps writers exclusive.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import assignment as asg
from . import decoding as dec
from . import evalkit, freeform
from .builder import (BuildInterrupted, build_vocabulary, load_checkpoint)
from .clustering import HashingProvider
from .corpus import (IngestReport, last_out_split, load_corpus,
                     load_interactions, read_splits, write_corpus,
                     write_interactions, write_splits)
from .gateway import (AgentRole, CallLedger, DecodeParams, Gateway,
                      HttpBackend)
from .mockllm import MockLLMBackend
from .planted import load_taxonomy
from .refinement import log_from_json
from .runs import (RunDirError, RunLock, RunPaths, inputs_hash, mark_stage,
                   stage_is_current)
from .vocab import BuildConfig, VocabularyError, VocabularyTree


class CliError(RuntimeError):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    backend: str = "mock"
    seed: int = 7
    corpus_path: str | None = None
    interactions_path: str | None = None
    strict_ingest: bool = True
    build: dict = field(default_factory=dict)
    assign_mode: str = "per-level"
    n_slots: int | None = None
    parallelism: int = 8
    embed_dim: int = 256
    surrogate_order: int = 3
    surrogate_alpha: float = 0.1
    beam_width: int = 20
    eval_mode: str = "full"
    eval_ks: list[int] = field(default_factory=lambda: [5, 10, 20, 50])
    n_negatives: int = 100
    simulator: str = "oracle"
    freeform_n_tags: int = 3
    freeform_min_f: int = 10
    freeform_max_f: int = 2000
    freeform_bins: int = 4
    freeform_kmeans_k: int | None = None
    budget_max_calls: int | None = None
    max_retries: int = 3
    backoff_base: float = 0.5
    max_inflight: int = 16
    mock_world_path: str | None = None
    mock_hidden_categories: list[str] = field(default_factory=list)
    mock_false_negative_rate: float = 0.0
    http_endpoint: str | None = None
    http_architect_model: str | None = None
    http_annotator_model: str | None = None
    http_auth_env: str = "LLM_API_KEY"
    http_temperature: float = 0.0

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read config {path}: {exc}", 2)
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise CliError("config",
                           f"unknown config keys: {', '.join(sorted(unknown))}", 2)
        return cls(**payload)

    def build_config(self, args: argparse.Namespace) -> BuildConfig:
        try:
            cfg = BuildConfig.from_json({"seed": self.seed,
                                         "parallelism": self.parallelism,
                                         **self.build})
        except VocabularyError as exc:
            raise CliError("config", str(exc), 2) from exc
        if getattr(args, "branching_factor", None) is not None:
            cfg.branching_factor = args.branching_factor
        if getattr(args, "depth", None) is not None:
            cfg.d_max = args.depth
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "parallelism", None) is not None:
            cfg.parallelism = args.parallelism
        return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in ("backend", "seed", "parallelism"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "beam", None) is not None:
        cfg.beam_width = args.beam
    if getattr(args, "run_dir", None) is not None:
        cfg.run_dir = args.run_dir
    if getattr(args, "budget_max_calls", None) is not None:
        cfg.budget_max_calls = args.budget_max_calls
    return cfg


def make_gateway(cfg: RunConfig, paths: RunPaths,
                 load_ledger: bool = True) -> Gateway:
    if cfg.backend == "mock":
        if not cfg.mock_world_path:
            raise CliError("config", "mock backend requires mock_world_path", 2)
        taxonomy = load_taxonomy(cfg.mock_world_path)
        backend = MockLLMBackend(
            taxonomy, seed=cfg.seed,
            false_negative_rate=cfg.mock_false_negative_rate,
            hidden_categories=frozenset(cfg.mock_hidden_categories))
        backends = {AgentRole.ARCHITECT: backend, AgentRole.ANNOTATOR: backend}
    elif cfg.backend == "http":
        if not cfg.http_endpoint:
            raise CliError("config", "http backend requires http_endpoint", 2)
        backends = {
            AgentRole.ARCHITECT: HttpBackend(
                cfg.http_endpoint, cfg.http_architect_model or "architect",
                auth_env=cfg.http_auth_env),
            AgentRole.ANNOTATOR: HttpBackend(
                cfg.http_endpoint, cfg.http_annotator_model or "annotator",
                auth_env=cfg.http_auth_env),
        }
    else:
        raise CliError("config", f"unknown backend {cfg.backend!r}", 2)
    ledger = CallLedger()
    if load_ledger and paths.ledger.exists():
        ledger.load_jsonl(paths.ledger)
    return Gateway(backends, max_retries=cfg.max_retries,
                   backoff_base=cfg.backoff_base, max_calls=cfg.budget_max_calls,
                   max_inflight=cfg.max_inflight,
                   transcript_path=paths.transcript,
                   default_decode=DecodeParams(temperature=cfg.http_temperature),
                   ledger=ledger)


def _provider(cfg: RunConfig) -> HashingProvider:
    return HashingProvider(dim=cfg.embed_dim)


def _run_corpus(cfg: RunConfig, paths: RunPaths):
    source = paths.corpus if paths.corpus.exists() else cfg.corpus_path
    if source is None:
        raise CliError("io", "no corpus available; run ingest or set corpus_path")
    return load_corpus(source)


def _load_tree(paths: RunPaths) -> VocabularyTree:
    if not paths.vocab.exists():
        raise CliError("stage", "vocab.json missing; run build-vocab first")
    items = paths.vocab_items if paths.vocab_items.exists() else None
    return VocabularyTree.load(paths.vocab, items)


def _load_records(paths: RunPaths) -> list[asg.AssignmentRecord]:
    if not paths.assignments.exists():
        raise CliError("stage", "assignments.jsonl missing; run assign first")
    records = []
    with paths.assignments.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                raw = json.loads(line)
                records.append(asg.AssignmentRecord(
                    item_id=raw["item_id"], path=tuple(raw["path"]),
                    resolver=raw.get("resolver"),
                    terminated=raw.get("terminated", False),
                    flag=raw.get("flag")))
    return records


def _load_logs(paths: RunPaths):
    logs = []
    if paths.refinement_logs.exists():
        with paths.refinement_logs.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    logs.append(log_from_json(json.loads(line)))
    return logs


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True),
                    encoding="utf-8")


# -- subcommands ------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, paths: RunPaths, args) -> int:
    if cfg.corpus_path is None:
        raise CliError("config", "ingest requires corpus_path", 2)
    digest = inputs_hash(Path(cfg.corpus_path),
                         Path(cfg.interactions_path) if cfg.interactions_path else "",
                         cfg.strict_ingest)
    outputs = [paths.corpus, paths.splits]
    if stage_is_current(paths, "ingest", digest, outputs) and not args.force:
        print("ingest: up to date, skipping")
        return 0
    report = IngestReport()
    corpus = load_corpus(cfg.corpus_path, lenient=not cfg.strict_ingest,
                         report=report)
    write_corpus(corpus, paths.corpus)
    summary = {"n_items": len(corpus), "malformed_lines": report.malformed_lines}
    if cfg.interactions_path:
        interactions = load_interactions(cfg.interactions_path, corpus,
                                         strict=cfg.strict_ingest, report=report)
        write_interactions(interactions, paths.interactions)
        split = last_out_split(interactions, report=report)
        write_splits(split, paths.splits)
        summary.update({"n_interactions": len(interactions),
                        "n_users": len(split.train),
                        "excluded_users": report.excluded_users,
                        "unknown_items": report.unknown_items})
    else:
        paths.splits.write_text("", encoding="utf-8")
    _write_json(paths.reports / "ingest.json", summary)
    mark_stage(paths, "ingest", digest, outputs)
    print(f"ingest: {summary}")
    return 0


def cmd_build_vocab(cfg: RunConfig, paths: RunPaths, args) -> int:
    corpus = _run_corpus(cfg, paths)
    build_cfg = cfg.build_config(args)
    digest = inputs_hash(paths.corpus if paths.corpus.exists()
                         else Path(cfg.corpus_path), build_cfg.to_json(),
                         cfg.backend, cfg.mock_world_path or "",
                         sorted(cfg.mock_hidden_categories),
                         cfg.mock_false_negative_rate)
    outputs = [paths.vocab, paths.vocab_items, paths.build_report]
    resume = args.command == "resume" or getattr(args, "resume", False)
    if stage_is_current(paths, "build-vocab", digest, outputs) and not args.force:
        print("build-vocab: up to date, skipping")
        return 0
    gateway = make_gateway(cfg, paths)
    resume_state = None
    if resume and paths.checkpoint.exists():
        resume_state = load_checkpoint(paths.checkpoint)
        if not paths.ledger.exists() and resume_state.ledger_snapshot:
            # Hard kill before the ledger file landed: the checkpoint
            # carries the counters.
            gateway.ledger.load_snapshot(resume_state.ledger_snapshot)
        print(f"resuming: {len(resume_state.completed)} nodes already done")
    try:
        state = build_vocabulary(corpus, build_cfg, gateway, _provider(cfg),
                                 checkpoint_path=paths.checkpoint,
                                 resume_state=resume_state)
    except BuildInterrupted as exc:
        gateway.ledger.save_jsonl(paths.ledger)
        raise CliError("budget-exhausted",
                       f"build interrupted, checkpoint saved: {exc}", 3)
    state.tree.save(paths.vocab, paths.vocab_items)
    with paths.refinement_logs.open("w", encoding="utf-8") as fh:
        for log in state.logs:
            fh.write(json.dumps(log.to_json(), sort_keys=True) + "\n")
    report = state.report.to_json()
    report["n_semid"] = f"{state.tree.max_depth()}+1"
    report["n_descriptors"] = len(state.tree.descriptor_nodes())
    _write_json(paths.build_report, report)
    gateway.ledger.save_jsonl(paths.ledger)
    mark_stage(paths, "build-vocab", digest, outputs)
    print(f"build-vocab: {report['n_descriptors']} descriptors over "
          f"{state.tree.max_depth()} levels")
    return 0


def cmd_assign(cfg: RunConfig, paths: RunPaths, args) -> int:
    corpus = _run_corpus(cfg, paths)
    tree = _load_tree(paths)
    digest = inputs_hash(paths.vocab, paths.corpus, cfg.assign_mode,
                         cfg.backend, cfg.seed)
    outputs = [paths.assignments]
    if stage_is_current(paths, "assign", digest, outputs) and not args.force:
        print("assign: up to date, skipping")
        return 0
    gateway = make_gateway(cfg, paths)
    records = asg.assign_paths(corpus, tree, gateway,
                               parallelism=cfg.parallelism, mode=cfg.assign_mode)
    records = asg.resolve_collisions(records)
    with paths.assignments.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"item_id": rec.item_id,
                                 "path": list(rec.path),
                                 "resolver": rec.resolver,
                                 "terminated": rec.terminated,
                                 "flag": rec.flag}) + "\n")
    gateway.ledger.save_jsonl(paths.ledger)
    flagged = sum(1 for r in records if r.flag)
    mark_stage(paths, "assign", digest, outputs)
    print(f"assign: {len(records)} items, {flagged} flagged")
    return 0


def cmd_encode(cfg: RunConfig, paths: RunPaths, args) -> int:
    tree = _load_tree(paths)
    records = _load_records(paths)
    digest = inputs_hash(paths.assignments, paths.vocab, cfg.n_slots or 0)
    outputs = [paths.semids, paths.token_map, paths.fixed_slots]
    if stage_is_current(paths, "encode", digest, outputs) and not args.force:
        print("encode: up to date, skipping")
        return 0
    table = asg.export_semids(records, tree)
    table.save(paths.semids, paths.token_map)
    n_slots = cfg.n_slots or max(tree.max_depth(),
                                 max((len(r.path) for r in records), default=1))
    rows = asg.export_fixed_slots(records, tree, n_slots)
    asg.write_fixed_slots_csv(rows, paths.fixed_slots)
    stats = asg.vocab_stats(records, tree)
    _write_json(paths.reports / "vocab_stats.json", stats.to_json())
    mark_stage(paths, "encode", digest, outputs)
    print(f"encode: vocab {stats.vocab_size_label}, "
          f"utilization {stats.utilization:.3f}")
    return 0


def cmd_fit(cfg: RunConfig, paths: RunPaths, args) -> int:
    if not paths.splits.exists():
        raise CliError("stage", "splits.jsonl missing; run ingest first")
    split = read_splits(paths.splits)
    table = asg.SemidTable.load(paths.semids, paths.token_map)
    digest = inputs_hash(paths.splits, paths.semids, cfg.surrogate_order,
                         cfg.surrogate_alpha)
    outputs = [paths.model]
    if stage_is_current(paths, "fit", digest, outputs) and not args.force:
        print("fit: up to date, skipping")
        return 0
    model = dec.fit_surrogate(split, table, order=cfg.surrogate_order,
                              alpha=cfg.surrogate_alpha)
    model.save(paths.model)
    mark_stage(paths, "fit", digest, outputs)
    print(f"fit: order-{model.order} model over {model.vocab_size} tokens")
    return 0


def _decode_setup(cfg: RunConfig, paths: RunPaths):
    split = read_splits(paths.splits)
    table = asg.SemidTable.load(paths.semids, paths.token_map)
    model = dec.SurrogateModel.load(paths.model)
    trie = dec.build_trie(table)
    return split, table, model, trie


def cmd_recommend(cfg: RunConfig, paths: RunPaths, args) -> int:
    split, table, model, trie = _decode_setup(cfg, paths)
    known = {row.item_id for row in table.rows}
    out_path = paths.reports / "recommendations.jsonl"
    with out_path.open("w", encoding="utf-8") as fh:
        for user_id in sorted(split.train):
            history = [i for i in split.train[user_id] if i in known]
            if not history:
                continue
            context = dec.encode_history(table, history, model.order)
            ranked = dec.beam_decode(model, context, trie, cfg.beam_width)
            fh.write(json.dumps({"user_id": user_id,
                                 "items": [{"item_id": i, "score": s}
                                           for i, s in ranked]}) + "\n")
    print(f"recommend: wrote {out_path}")
    return 0


def cmd_evaluate(cfg: RunConfig, paths: RunPaths, args) -> int:
    split, table, model, trie = _decode_setup(cfg, paths)
    report = evalkit.evaluate_run(
        model, trie, split, table, mode=cfg.eval_mode,
        ks=tuple(cfg.eval_ks), seed=cfg.seed, n_negatives=cfg.n_negatives,
        beam_width=cfg.beam_width)
    out_path = paths.reports / f"eval_{cfg.eval_mode}.json"
    _write_json(out_path, report.to_json())
    print(f"evaluate[{cfg.eval_mode}]: "
          + ", ".join(f"N@{k}={v:.4f}" for k, v in sorted(report.ndcg.items())))
    return 0


def cmd_critique_eval(cfg: RunConfig, paths: RunPaths, args) -> int:
    split, table, model, trie = _decode_setup(cfg, paths)
    tree = _load_tree(paths)
    corpus = _run_corpus(cfg, paths)
    simulator = getattr(args, "simulator", None) or cfg.simulator
    gateway = make_gateway(cfg, paths) if simulator == "llm" else None
    known = {row.item_id for row in table.rows}
    allowed_by_user: dict[str, set[int]] = {}
    for user_id in sorted(split.test):
        target = split.test[user_id]
        if target not in known:
            continue
        allowed_by_user[user_id] = dec.simulate_user(
            target, corpus, table, tree, mode=simulator, gateway=gateway)
    vanilla = evalkit.evaluate_run(model, trie, split, table, mode="full",
                                   ks=tuple(cfg.eval_ks), seed=cfg.seed,
                                   beam_width=cfg.beam_width)
    constrained = evalkit.evaluate_run(model, trie, split, table, mode="full",
                                       ks=tuple(cfg.eval_ks), seed=cfg.seed,
                                       beam_width=cfg.beam_width,
                                       allowed_level1_by_user=allowed_by_user)
    payload = {"simulator": simulator, "vanilla": vanilla.to_json(),
               "constrained": constrained.to_json()}
    _write_json(paths.reports / "critique_eval.json", payload)
    if gateway is not None:
        gateway.ledger.save_jsonl(paths.ledger)
    print("critique-eval: "
          + ", ".join(f"N@{k} {vanilla.ndcg[k]:.4f}->{constrained.ndcg[k]:.4f}"
                      for k in sorted(vanilla.ndcg)))
    return 0


def cmd_baseline_freeform(cfg: RunConfig, paths: RunPaths, args) -> int:
    corpus = _run_corpus(cfg, paths)
    gateway = make_gateway(cfg, paths)
    table = freeform.generate_freeform(corpus, gateway,
                                       n_tags_per_item=cfg.freeform_n_tags,
                                       parallelism=cfg.parallelism)
    table.save(paths.root / "freeform_tags.jsonl")
    summary = {"n_items": len(table.tags_by_item),
               "n_distinct_tags": len(table.frequency),
               "utilization": freeform.tag_utilization(table),
               "failed_items": table.n_failed_items}
    try:
        pruned = freeform.prune_frequency_bins(
            table, min_f=cfg.freeform_min_f, max_f=cfg.freeform_max_f,
            n_bins=cfg.freeform_bins)
        rows = freeform.pruned_to_semid_rows(pruned)
        with (paths.root / "freeform_freqbin.jsonl").open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        summary["freqbin_items"] = len(rows)
    except freeform.FreeformError as exc:
        summary["freqbin_error"] = str(exc)
    if cfg.freeform_kmeans_k:
        try:
            pruned_km, _ = freeform.prune_kmeans(table, _provider(cfg),
                                                 k=cfg.freeform_kmeans_k,
                                                 seed=cfg.seed)
            rows = freeform.pruned_to_semid_rows(pruned_km)
            with (paths.root / "freeform_kmeans.jsonl").open("w") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")
            summary["kmeans_items"] = len(rows)
        except freeform.FreeformError as exc:
            summary["kmeans_error"] = str(exc)
    gateway.ledger.save_jsonl(paths.ledger)
    _write_json(paths.reports / "freeform.json", summary)
    print(f"baseline-freeform: {summary['n_distinct_tags']} tags, "
          f"utilization {summary['utilization']:.3f}")
    return 0


def cmd_report(cfg: RunConfig, paths: RunPaths, args) -> int:
    summary: dict = {}
    if paths.build_report.exists():
        summary["build"] = json.loads(paths.build_report.read_text())
    logs = _load_logs(paths)
    if logs:
        rows = evalkit.coverage_deltas(logs)
        evalkit.write_coverage_csv(rows, paths.reports / "coverage_deltas.csv")
        summary["coverage_cycles"] = len(rows)
    stats_path = paths.reports / "vocab_stats.json"
    if stats_path.exists():
        summary["vocab_stats"] = json.loads(stats_path.read_text())
    if paths.ledger.exists():
        ledger = CallLedger()
        ledger.load_jsonl(paths.ledger)
        summary["ledger"] = ledger.snapshot()
    _write_json(paths.reports / "summary.json", summary)
    print(f"report: wrote {paths.reports / 'summary.json'}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "build-vocab": cmd_build_vocab,
    "assign": cmd_assign,
    "encode": cmd_encode,
    "fit": cmd_fit,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "critique-eval": cmd_critique_eval,
    "baseline-freeform": cmd_baseline_freeform,
    "report": cmd_report,
    "resume": cmd_build_vocab,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tagforge",
        description="Descriptor-vocabulary mining and semantic-ID pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--run-dir", default=None)
        p.add_argument("--backend", choices=["mock", "http"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--parallelism", type=int, default=None)
        p.add_argument("--beam", type=int, default=None)
        p.add_argument("--branching-factor", type=int, default=None)
        p.add_argument("--depth", type=int, default=None)
        p.add_argument("--budget-max-calls", type=int, default=None)
        p.add_argument("--force", action="store_true")
        p.add_argument("--resume", action="store_true")
        if name == "critique-eval":
            p.add_argument("--simulator", choices=["oracle", "llm"], default=None)
    return parser


def dispatch(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        paths = RunPaths(Path(cfg.run_dir))
        paths.ensure()
        if not paths.config.exists() or args.force or args.config is not None:
            _write_json(paths.config, {f.name: getattr(cfg, f.name)
                                       for f in fields(RunConfig)})
        with RunLock(paths):
            return COMMANDS[args.command](cfg, paths, args)
    except CliError as exc:
        print(f"ERR:{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except RunDirError as exc:
        print(f"ERR:locked: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - single-line machine-parsable exit
        print(f"ERR:internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
