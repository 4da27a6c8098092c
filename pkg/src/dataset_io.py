"""Dataset files: JSONL IO, statistics, pass^k and the training view."""
from __future__ import annotations

import json
import logging
import math
import statistics
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from .interplay_sim import Trajectory, agent_messages

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """A dataset file could not be read; names the file and line."""


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def read_jsonl(path: str | Path) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"{path}:{lineno}: record is not a JSON object")
            records.append(record)
    return records


def write_jsonl(path: str | Path, records: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_record(record) + "\n")
            count += 1
    return count


class JsonlAppender:
    """Thread-safe line appender; every record is flushed as it is written."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.count = 0
        self._lock = threading.Lock()
        self._fh = open(self.path, "w", encoding="utf-8")

    def append(self, record: Dict[str, Any]) -> None:
        with self._lock:
            self._fh.write(dumps_record(record) + "\n")
            self._fh.flush()
            self.count += 1

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "JsonlAppender":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


class StatsSummary(BaseModel):
    """Dataset statistics; None marks a rate or mean over an empty set."""

    tasks_attempted: int = 0
    tasks_accepted: int = 0
    task_success_rate: Optional[float] = None
    episodes: int = 0
    successful_episodes: int = 0
    trajectory_success_rate: Optional[float] = None
    trajectories: int = 0
    min_turns: int = 0
    max_turns: int = 0
    mean_turns: Optional[float] = None
    mean_tool_calls: Optional[float] = None
    mean_user_turns: Optional[float] = None
    turn_histogram: Dict[int, int] = Field(default_factory=dict)
    skipped_records: int = 0


def _rate(hits: int, total: int) -> Optional[float]:
    return hits / total if total else None


def compute_stats(
    trajectories: List[Dict[str, Any]],
    audits: Iterable[Dict[str, Any]] = (),
    attempts: Optional[List[Dict[str, Any]]] = None,
) -> StatsSummary:
    """Summarize trajectory records, refinement audits and attempt records.

    A turn is one dialogue message (human or assistant text). Tool calls
    are counted separately. Malformed records are skipped and counted.
    """
    skipped = 0
    turn_counts: List[int] = []
    tool_counts: List[int] = []
    user_counts: List[int] = []
    rewards: List[int] = []
    for record in trajectories:
        try:
            traj = Trajectory.from_record(record)
        except ValidationError:
            skipped += 1
            continue
        turn_counts.append(sum(1 for t in traj.turns if t.is_dialogue))
        tool_counts.append(sum(1 for t in traj.turns if t.tool_call is not None))
        user_counts.append(sum(1 for t in traj.turns if t.speaker == "human"))
        rewards.append(traj.reward)

    statuses = []
    for audit in audits:
        status = audit.get("status") if isinstance(audit, dict) else None
        if status not in ("accepted", "exhausted", "aborted"):
            skipped += 1
            continue
        statuses.append(status)

    if attempts is not None:
        episode_rewards = []
        for record in attempts:
            reward = record.get("reward")
            if reward not in (0, 1) or isinstance(reward, bool):
                skipped += 1
                continue
            episode_rewards.append(reward)
    else:
        episode_rewards = rewards

    if skipped:
        logger.warning("Skipped %s malformed record(s)", skipped)

    accepted = statuses.count("accepted")
    successes = sum(episode_rewards)
    return StatsSummary(
        tasks_attempted=len(statuses),
        tasks_accepted=accepted,
        task_success_rate=_rate(accepted, len(statuses)),
        episodes=len(episode_rewards),
        successful_episodes=successes,
        trajectory_success_rate=_rate(successes, len(episode_rewards)),
        trajectories=len(turn_counts),
        min_turns=min(turn_counts, default=0),
        max_turns=max(turn_counts, default=0),
        mean_turns=statistics.mean(turn_counts) if turn_counts else None,
        mean_tool_calls=statistics.mean(tool_counts) if tool_counts else None,
        mean_user_turns=statistics.mean(user_counts) if user_counts else None,
        turn_histogram=dict(sorted(Counter(turn_counts).items())),
        skipped_records=skipped,
    )


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_stats_table(summary: StatsSummary) -> str:
    rows = [
        ("Tasks attempted", summary.tasks_attempted),
        ("Tasks accepted", summary.tasks_accepted),
        ("Task success rate", summary.task_success_rate),
        ("Episodes", summary.episodes),
        ("Successful episodes", summary.successful_episodes),
        ("Trajectory success rate", summary.trajectory_success_rate),
        ("Trajectories", summary.trajectories),
        ("Min. turns per trajectory", summary.min_turns),
        ("Max. turns per trajectory", summary.max_turns),
        ("Avg. turns per trajectory", summary.mean_turns),
        ("Avg. tool calls per trajectory", summary.mean_tool_calls),
        ("Avg. user turns per trajectory", summary.mean_user_turns),
        ("Skipped records", summary.skipped_records),
    ]
    width = max(len(label) for label, _ in rows)
    lines = [f"{label.ljust(width)}  {_fmt(value)}" for label, value in rows]
    if summary.turn_histogram:
        lines.append("")
        lines.append("Turns  Trajectories")
        lines.extend(f"{turns:>5}  {count}" for turns, count in summary.turn_histogram.items())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pass^k
# ---------------------------------------------------------------------------


class TrialMatrix(BaseModel):
    """Per task: (trials n, successes c)."""

    trials: Dict[str, Tuple[int, int]]

    @model_validator(mode="after")
    def _valid(self) -> "TrialMatrix":
        for task_id, (n, c) in self.trials.items():
            if n < 1 or not 0 <= c <= n:
                raise ValueError(f"task {task_id}: need 0 <= c <= n and n >= 1, got n={n} c={c}")
        if len({n for n, _ in self.trials.values()}) > 1:
            raise ValueError("every task needs the same number of trials")
        return self

    @property
    def n(self) -> int:
        return next(iter(self.trials.values()))[0] if self.trials else 0


def trial_matrix(records: Iterable[Dict[str, Any]]) -> TrialMatrix:
    """Count trials and successes per task_id from attempt or trajectory records."""
    counts: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    for record in records:
        entry = counts[record["task_id"]]
        entry[0] += 1
        entry[1] += int(record.get("reward") == 1)
    return TrialMatrix(trials={task: (n, c) for task, (n, c) in sorted(counts.items())})


@dataclass
class PassKReport:
    k: int
    per_task: Dict[str, Fraction]
    average: Fraction

    def to_json(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "per_task": {task: float(value) for task, value in self.per_task.items()},
            "average": float(self.average),
        }


def pass_k(matrix: TrialMatrix, k: int) -> PassKReport:
    """C(c, k) / C(n, k) per task, macro-averaged over tasks."""
    if not matrix.trials:
        raise ValueError("trial matrix is empty")
    if not 1 <= k <= matrix.n:
        raise ValueError(f"k must be between 1 and {matrix.n}, got {k}")
    per_task = {
        task: Fraction(math.comb(c, k), math.comb(n, k)) for task, (n, c) in matrix.trials.items()
    }
    average = sum(per_task.values(), Fraction(0)) / len(per_task)
    return PassKReport(k=k, per_task=per_task, average=average)


class TrialStability(BaseModel):
    per_trial: List[float]
    mean: Optional[float] = None
    stdev: Optional[float] = None


def trial_stability(records: Iterable[Dict[str, Any]]) -> TrialStability:
    """Success rate per attempt index, with their mean and population deviation."""
    by_trial: Dict[int, List[int]] = defaultdict(list)
    for record in records:
        by_trial[int(record["attempt"])].append(int(record.get("reward") == 1))
    rates = [statistics.mean(by_trial[i]) for i in sorted(by_trial)]
    if not rates:
        return TrialStability(per_trial=[])
    return TrialStability(per_trial=rates, mean=statistics.mean(rates), stdev=statistics.pstdev(rates))


# ---------------------------------------------------------------------------
# Training view
# ---------------------------------------------------------------------------


def export_training_view(trajectories: Iterable[Trajectory]) -> List[Dict[str, Any]]:
    """One record per assistant message: the prefix context plus that message.

    Context messages are flagged ``masked`` so only the target contributes
    to the loss.
    """
    records = []
    for traj in trajectories:
        messages = [m.to_wire() for m in agent_messages(traj.system, traj.turns)]
        for index, message in enumerate(messages):
            if message["role"] != "assistant":
                continue
            records.append(
                {
                    "task_id": traj.task_id,
                    "attempt": traj.attempt,
                    "target_index": index,
                    "messages": [dict(m, masked=True) for m in messages[:index]] + [dict(message, masked=False)],
                }
            )
    return records
