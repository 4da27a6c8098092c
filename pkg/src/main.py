"""Command-line entry point for agentforge."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from config import settings

from .api_graph import build_graph, to_dot
from .blueprint_gen import RefineAborted, RefineResult, Rejected, TaskBlueprint, load_templates, recombine, refine_loop
from .context_sampler import load_personas
from .dataset_io import (
    DatasetError,
    JsonlAppender,
    compute_stats,
    export_training_view,
    format_stats_table,
    pass_k,
    read_jsonl,
    trial_matrix,
    trial_stability,
    write_jsonl,
)
from .domain_pack import load_domain_pack
from .interplay_sim import Trajectory, select_unique_successes, simulate_attempts
from .run_config import ConfigError, RunConfig, derive_seed, load_run_config

logger = logging.getLogger(__name__)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(Path(args.out).resolve())
    if getattr(args, "tasks", None) is not None:
        overrides.setdefault("knobs", {})["tasks"] = args.tasks
    if getattr(args, "count", None) is not None:
        overrides.setdefault("knobs", {})["recombinations"] = args.count
    cfg = load_run_config(args.config, overrides)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _load_blueprints(path: Path) -> List[TaskBlueprint]:
    blueprints = []
    for lineno, record in enumerate(read_jsonl(path), start=1):
        try:
            blueprints.append(TaskBlueprint.from_record(record))
        except (KeyError, TypeError, ValidationError) as exc:
            raise DatasetError(f"{path}: record {lineno} is not a blueprint ({exc})") from exc
    return blueprints


def cmd_gen_blueprints(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    pack = load_domain_pack(cfg.domain_pack)
    graph = build_graph(pack.specs(), pack.forbidden_pairs, pack.declared_edges)
    personas = load_personas(cfg.personas)
    templates = load_templates(cfg.prompt_dir)
    backends = cfg.pipeline_backends()
    gen_settings = cfg.generation_settings(reflection=False if args.no_reflection else None)
    max_rounds = cfg.knobs.max_rounds or pack.max_rounds
    audit_dir = cfg.output_dir / "audits"
    audit_dir.mkdir(exist_ok=True)

    def _run(index: int) -> RefineResult:
        task_id = f"task-{index:04d}"
        try:
            return refine_loop(
                pack,
                graph,
                backends,
                max_rounds,
                seed=derive_seed(cfg.seed, index),
                personas=personas,
                templates=templates,
                settings=gen_settings,
                task_id=task_id,
            )
        except RefineAborted as exc:
            return exc.result

    counts = {"accepted": 0, "exhausted": 0, "aborted": 0}
    manifest = {
        "command": "gen-blueprints",
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "domain": pack.name,
        "max_rounds": max_rounds,
        "reflection": gen_settings.reflection,
        "tasks": cfg.knobs.tasks,
        "interrupted": False,
    }
    logger.info(f"Generating {cfg.knobs.tasks} blueprints for domain '{pack.name}'")
    with JsonlAppender(cfg.output_dir / "blueprints.jsonl") as sink:
        try:
            with ThreadPoolExecutor(max_workers=cfg.knobs.workers) as pool:
                futures = [pool.submit(_run, i) for i in range(cfg.knobs.tasks)]
                for future in futures:
                    result = future.result()
                    counts[result.status] += 1
                    _write_json(audit_dir / f"{result.task_id}.json", result.model_dump(mode="json"))
                    if result.blueprint is not None:
                        sink.append(result.blueprint.to_record())
        except KeyboardInterrupt:
            manifest["interrupted"] = True
            raise
        finally:
            manifest.update(counts)
            manifest["blueprints"] = sink.count
            _write_json(cfg.output_dir / "gen-blueprints.manifest.json", manifest)
    logger.info(
        f"Accepted {counts['accepted']}/{cfg.knobs.tasks} blueprints "
        f"({counts['exhausted']} exhausted, {counts['aborted']} aborted)"
    )
    return 0


def cmd_recombine(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    pack = load_domain_pack(cfg.domain_pack)
    templates = load_templates(cfg.prompt_dir)
    backends = cfg.pipeline_backends()
    blueprints = [bp for bp in _load_blueprints(Path(args.blueprints)) if bp.accepted]

    groups: Dict[Optional[str], List[TaskBlueprint]] = defaultdict(list)
    for bp in blueprints:
        groups[bp.persona.id if bp.persona else None].append(bp)
    pairs = [pair for key in groups for pair in itertools.combinations(groups[key], 2)]
    pairs = pairs[: cfg.knobs.recombinations]

    accepted = rejected = 0
    with JsonlAppender(cfg.output_dir / "recombined.jsonl") as sink:
        for pair in pairs:
            outcome = recombine(
                pair,
                backends.generator,
                backends.judges,
                pack,
                templates,
                cfg.acceptance_rule(),
                reviewer=backends.reviewer,
                conversation="recombine/" + "+".join(bp.task_id for bp in pair),
            )
            if isinstance(outcome, Rejected):
                rejected += 1
                logger.info(f"Recombination of {[bp.task_id for bp in pair]} rejected: {outcome.reason}")
                continue
            accepted += 1
            sink.append(outcome.to_record())
    _write_json(
        cfg.output_dir / "recombine.manifest.json",
        {
            "command": "recombine",
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
            "pairs": len(pairs),
            "accepted": accepted,
            "rejected": rejected,
        },
    )
    logger.info(f"Recombined {accepted}/{len(pairs)} task pairs")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    pack = load_domain_pack(cfg.domain_pack)
    blueprints = _load_blueprints(Path(args.blueprints))
    episode = cfg.episode_config()

    outcomes: Dict[str, Dict[str, int]] = {}
    with JsonlAppender(cfg.output_dir / "trajectories.jsonl") as trajectories, JsonlAppender(
        cfg.output_dir / "attempts.jsonl"
    ) as attempts:
        with ThreadPoolExecutor(max_workers=cfg.knobs.workers) as pool:
            futures = [pool.submit(simulate_attempts, bp, episode, pack) for bp in blueprints if bp.accepted]
            for future in futures:
                runs = future.result()
                kept = {id(t) for t in select_unique_successes(runs)}
                for traj in runs:
                    attempts.append(
                        {
                            "task_id": traj.task_id,
                            "attempt": traj.attempt,
                            "reward": traj.reward,
                            "stop_reason": traj.stop_reason,
                            "retained": id(traj) in kept,
                        }
                    )
                    if id(traj) in kept:
                        trajectories.append(traj.to_record())
                if runs:
                    outcomes[runs[0].task_id] = {
                        "attempts": len(runs),
                        "successes": sum(t.reward for t in runs),
                        "retained": len(kept),
                    }
        _write_json(
            cfg.output_dir / "simulate.manifest.json",
            {
                "command": "simulate",
                "seed": cfg.seed,
                "config_hash": cfg.config_hash(),
                "bon_n": episode.bon_n,
                "blueprints": len(blueprints),
                "attempts": attempts.count,
                "trajectories": trajectories.count,
                "tasks": outcomes,
            },
        )
    logger.info(f"Kept {trajectories.count} trajectories from {attempts.count} attempts")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    trajectories = read_jsonl(args.trajectories)
    audits = []
    if args.audits:
        for path in sorted(Path(args.audits).glob("*.json")):
            try:
                audits.append(json.loads(path.read_text(encoding="utf-8")))
            except json.JSONDecodeError:
                logger.warning(f"Skipping unreadable audit file {path}")
                audits.append({})
    attempts = read_jsonl(args.attempts) if args.attempts else None
    summary = compute_stats(trajectories, audits, attempts)
    report = summary.model_dump(mode="json")
    if attempts:
        report["trial_stability"] = trial_stability(attempts).model_dump()
    if args.json:
        _write_json(Path(args.json), report)
    print(format_stats_table(summary), end="")
    return 0


def cmd_passk(args: argparse.Namespace) -> int:
    records = [record for path in args.attempts for record in read_jsonl(path)]
    matrix = trial_matrix(records)
    reports = [pass_k(matrix, k).to_json() for k in args.k]
    print(json.dumps({"n": matrix.n, "tasks": len(matrix.trials), "pass_k": reports}, indent=2, sort_keys=True))
    return 0


def cmd_export_train(args: argparse.Namespace) -> int:
    trajectories = []
    for lineno, record in enumerate(read_jsonl(args.trajectories), start=1):
        try:
            trajectories.append(Trajectory.from_record(record))
        except ValidationError as exc:
            raise DatasetError(f"{args.trajectories}: record {lineno} is not a trajectory ({exc})") from exc
    count = write_jsonl(args.out, export_training_view(trajectories))
    logger.info(f"Wrote {count} training records to {args.out}")
    return 0


def cmd_graph_dump(args: argparse.Namespace) -> int:
    pack = load_domain_pack(args.domain_pack)
    dot = to_dot(build_graph(pack.specs(), pack.forbidden_pairs, pack.declared_edges))
    if args.out:
        Path(args.out).write_text(dot, encoding="utf-8")
    else:
        print(dot, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentforge", description="Agentic task and trajectory synthesis")
    parser.add_argument("--log-level", default=settings.AGENTFORGE_LOG_LEVEL, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-blueprints", help="Generate validated task blueprints")
    gen.add_argument("--config", required=True, help="Run config JSON file")
    gen.add_argument("--tasks", type=int, help="Number of refinement loops to run")
    gen.add_argument("--seed", type=int, help="Master seed")
    gen.add_argument("--out", help="Output directory")
    gen.add_argument("--no-reflection", action="store_true", help="Regenerate without feeding failures back")
    gen.set_defaults(func=cmd_gen_blueprints)

    rec = sub.add_parser("recombine", help="Combine accepted blueprints of the same persona")
    rec.add_argument("--config", required=True)
    rec.add_argument("--blueprints", required=True)
    rec.add_argument("--count", type=int, help="Maximum number of pairs to try")
    rec.add_argument("--out", help="Output directory")
    rec.set_defaults(func=cmd_recombine)

    sim = sub.add_parser("simulate", help="Simulate episodes and keep successful trajectories")
    sim.add_argument("--config", required=True)
    sim.add_argument("--blueprints", required=True)
    sim.add_argument("--out", help="Output directory")
    sim.set_defaults(func=cmd_simulate)

    stats = sub.add_parser("stats", help="Dataset statistics")
    stats.add_argument("--trajectories", required=True)
    stats.add_argument("--attempts", help="attempts.jsonl for the trajectory success rate")
    stats.add_argument("--audits", help="Directory of refinement audit files")
    stats.add_argument("--json", help="Also write the report as JSON")
    stats.set_defaults(func=cmd_stats)

    passk = sub.add_parser("passk", help="pass^k over repeated trials")
    passk.add_argument("--attempts", nargs="+", required=True, help="attempts.jsonl file(s)")
    passk.add_argument("--k", type=int, nargs="+", required=True)
    passk.set_defaults(func=cmd_passk)

    export = sub.add_parser("export-train", help="Split trajectories at every assistant message")
    export.add_argument("--trajectories", required=True)
    export.add_argument("--out", required=True)
    export.set_defaults(func=cmd_export_train)

    graph = sub.add_parser("graph-dump", help="Print the API dependency graph as DOT")
    graph.add_argument("--domain-pack", default=str(settings.DATA_DIR / "retail"))
    graph.add_argument("--out")
    graph.set_defaults(func=cmd_graph_dump)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on user error, 2 otherwise."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),  # Console output
        ]
    )
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user; partial outputs were kept")
        return 2
    except Exception as e:
        logger.error(f"Fatal error in {args.command}: {e}")
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
