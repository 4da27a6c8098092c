"""Simulated human / agent / environment episodes and trajectory collection."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .blueprint_gen import TaskBlueprint
from .domain_env import EntityStore, StateSnapshot, ToolCall, ToolResult, ToolSpec, snapshot
from .domain_pack import DomainPack
from .llm_gateway import Backend, ChatMessage, GatewayError, complete, complete_n
from .prompts import load_template, render, section

logger = logging.getLogger(__name__)

STOP = "###STOP###"
GREETING = "Hi! How can I help you today?"
StopReason = Literal["human_stop", "max_turns", "error"]


class InternalInconsistencyError(RuntimeError):
    """An accepted blueprint no longer replays on a fresh store."""


class ToolLoopExceeded(RuntimeError):
    """The agent kept calling tools past the per-turn cap."""

    def __init__(self, records: List["TurnRecord"], cap: int) -> None:
        super().__init__(f"agent exceeded {cap} tool calls in one turn")
        self.records = records


class TurnRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    speaker: Literal["human", "assistant", "tool"] = Field(alias="role")
    content: Optional[str] = None
    tool_call: Optional[ToolCall] = None
    tool_result: Optional[ToolResult] = None
    bon_scores: Optional[List[int]] = None

    @model_validator(mode="after")
    def _fields_for_speaker(self) -> "TurnRecord":
        if self.speaker == "human":
            ok = self.content is not None and self.tool_call is None and self.tool_result is None
        elif self.speaker == "assistant":
            ok = (self.content is None) != (self.tool_call is None) and self.tool_result is None
            ok = ok and self.bon_scores is None
        else:
            ok = self.tool_result is not None and self.content is None and self.tool_call is None
            ok = ok and self.bon_scores is None
        if not ok:
            raise ValueError(f"fields do not match a {self.speaker} turn")
        return self

    @property
    def is_dialogue(self) -> bool:
        return self.speaker == "human" or (self.speaker == "assistant" and self.content is not None)


class Trajectory(BaseModel):
    task_id: str
    attempt: int
    turns: List[TurnRecord]
    final_snapshot: StateSnapshot
    reward: Literal[0, 1] = 0
    stop_reason: StopReason
    system: str = ""
    bon_n: int = 1

    @model_validator(mode="after")
    def _reward_needs_stop(self) -> "Trajectory":
        if self.reward == 1 and self.stop_reason != "human_stop":
            raise ValueError("reward 1 requires the human to have ended the episode")
        return self

    def to_record(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    @classmethod
    def from_record(cls, record: dict) -> "Trajectory":
        return cls.model_validate(record)


class RewardReport(BaseModel):
    state_match: bool
    outputs_found: List[Tuple[str, bool]]
    r: Literal[0, 1]

    @model_validator(mode="after")
    def _consistent(self) -> "RewardReport":
        expected = int(self.state_match and all(found for _, found in self.outputs_found))
        if self.r != expected:
            raise ValueError("r must be 1 exactly when the state matches and every output was found")
        return self


class HumanReply(BaseModel):
    text: str
    bon_scores: Optional[List[int]] = None

    @property
    def stop(self) -> bool:
        return STOP in self.text


@dataclass
class EpisodeTemplates:
    human: str
    bon_judge: str
    agent: str


def load_episode_templates(prompt_dir: Path | None = None) -> EpisodeTemplates:
    return EpisodeTemplates(
        human=load_template("human", prompt_dir),
        bon_judge=load_template("bon_judge", prompt_dir),
        agent=load_template("agent", prompt_dir),
    )


@dataclass
class EpisodeConfig:
    human: Backend
    agent: Backend
    bon_judge: Optional[Backend] = None
    max_turns: int = 30
    attempts: int = 3
    bon_n: int = 4
    tool_cap: int = 10
    workers: int = 1
    templates: EpisodeTemplates = field(default_factory=load_episode_templates)

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        if self.attempts < 1:
            raise ValueError("attempts must be at least 1")
        if self.bon_n < 1:
            raise ValueError("bon_n must be at least 1")
        if self.bon_n > 1 and self.bon_judge is None:
            raise ValueError("bon_n > 1 needs a bon_judge backend")


# ---------------------------------------------------------------------------
# Human simulator
# ---------------------------------------------------------------------------


def _dialogue(history: List[TurnRecord]) -> List[TurnRecord]:
    return [t for t in history if t.is_dialogue]


def parse_score(text: str) -> Optional[int]:
    """Integer in ``<score>`` clamped to [0, 10], or None."""
    match = re.search(r"<score>\s*(-?\d+(?:\.\d+)?)\s*</score>", text or "")
    if match is None:
        return None
    return max(0, min(10, int(float(match.group(1)))))


def _score_candidate(
    bp: TaskBlueprint, candidate: str, cfg: EpisodeConfig, domain: str, conversation: str
) -> Optional[int]:
    prompt = render(cfg.templates.bon_judge, domain=domain, description=bp.instruction, response=candidate)
    messages = [ChatMessage(role="user", content=prompt)]
    for attempt in range(2):
        reply = complete(cfg.bon_judge, messages, conversation=conversation)
        score = parse_score(reply.content or "")
        if score is not None:
            return score
        logger.warning("Unparseable BoN score (attempt %s/2)", attempt + 1)
    return None


def human_turn(
    bp: TaskBlueprint,
    history: List[TurnRecord],
    cfg: EpisodeConfig,
    conversation: str = "episode",
    domain: str = "",
) -> HumanReply:
    """Next user message, chosen by Best-of-N when ``cfg.bon_n > 1``.

    The simulator sees the dialogue with roles flipped: the agent's messages
    are its input and its own earlier messages are its output.
    """
    dialogue = _dialogue(history)
    if dialogue and dialogue[-1].speaker != "assistant":
        raise ValueError("the human speaks only after the assistant")
    messages = [
        ChatMessage(role="system", content=render(cfg.templates.human, intent=bp.instruction)),
        ChatMessage(role="user", content=GREETING),
    ]
    for turn in dialogue:
        role = "assistant" if turn.speaker == "human" else "user"
        messages.append(ChatMessage(role=role, content=turn.content))

    key = f"{conversation}/human"
    if cfg.bon_n == 1:
        reply = complete(cfg.human, messages, conversation=key)
        return HumanReply(text=(reply.content or "").strip())

    candidates = [(m.content or "").strip() for m in complete_n(cfg.human, messages, cfg.bon_n, conversation=key)]
    raw = [_score_candidate(bp, c, cfg, domain, f"{conversation}/bon-judge") for c in candidates]
    if all(score is None for score in raw):
        logger.warning("No BoN candidate could be scored; keeping the first candidate")
        return HumanReply(text=candidates[0], bon_scores=[0] * len(candidates))
    scores = [0 if score is None else score for score in raw]
    best = max(range(len(candidates)), key=lambda i: (scores[i], -i))
    return HumanReply(text=candidates[best], bon_scores=scores)


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------


def agent_messages(system: str, history: List[TurnRecord]) -> List[ChatMessage]:
    """Chat transcript as the agent sees it."""
    messages = [ChatMessage(role="system", content=system)]
    last_call_id: Optional[str] = None
    for turn in history:
        if turn.speaker == "human":
            messages.append(ChatMessage(role="user", content=turn.content))
        elif turn.tool_call is not None:
            last_call_id = turn.tool_call.call_id
            messages.append(ChatMessage(role="assistant", tool_calls=[turn.tool_call]))
        elif turn.speaker == "assistant":
            messages.append(ChatMessage(role="assistant", content=turn.content))
        else:
            messages.append(
                ChatMessage(role="tool", tool_call_id=last_call_id or "", content=turn.tool_result.to_content())
            )
    return messages


def agent_turn(
    history: List[TurnRecord],
    tools: List[ToolSpec],
    system: str,
    backend: Backend,
    store: EntityStore,
    pack: DomainPack,
    cap: int = 10,
    conversation: str = "episode",
) -> List[TurnRecord]:
    """Run the agent until it answers in plain text.

    Raises
    ------
    ToolLoopExceeded
        After ``cap`` tool calls; carries the records produced so far.
    GatewayError
        Propagated from the backend.
    """
    dialogue = _dialogue(history)
    if not dialogue or dialogue[-1].speaker != "human" or STOP in (dialogue[-1].content or ""):
        raise ValueError("the agent answers only a live human message")
    records: List[TurnRecord] = []
    calls = 0
    while True:
        reply = complete(
            backend, agent_messages(system, history + records), tools=tools, conversation=f"{conversation}/agent"
        )
        if not reply.tool_calls:
            records.append(TurnRecord(speaker="assistant", content=reply.content or ""))
            return records
        if reply.content and reply.content.strip():
            # Text sent alongside tool calls is part of what the user hears
            records.append(TurnRecord(speaker="assistant", content=reply.content))
        for call in reply.tool_calls:
            if calls == cap:
                raise ToolLoopExceeded(records, cap)
            calls += 1
            records.append(TurnRecord(speaker="assistant", tool_call=call))
            records.append(TurnRecord(speaker="tool", tool_result=pack.execute(call, store)))


# ---------------------------------------------------------------------------
# Episodes and reward
# ---------------------------------------------------------------------------


def agent_system_prompt(pack: DomainPack, template: str) -> str:
    return render(template, domain=pack.name, policy=section(pack.policy_prose() + pack.domain_rules))


def _normalize(text: str) -> str:
    return " ".join(text.split()).lower()


def evaluate_reward(traj: Trajectory, bp: TaskBlueprint, pack: DomainPack) -> RewardReport:
    """Compare the final state with the replayed groundtruth and look for every expected output."""
    store = pack.fresh_store()
    trace = pack.replay(bp.actions, store)
    failed = next((s for s in trace if s.result.status == "error"), None)
    if failed is not None:
        raise InternalInconsistencyError(
            f"groundtruth of {bp.task_id} fails at {failed.call.name}: {failed.result.message}"
        )
    state_match = traj.final_snapshot.canonical == snapshot(store).canonical
    spoken = _normalize(
        " ".join(t.content for t in traj.turns if t.speaker == "assistant" and t.content is not None)
    )
    found = [(output, _normalize(output) in spoken) for output in bp.outputs]
    r = int(state_match and all(hit for _, hit in found))
    return RewardReport(state_match=state_match, outputs_found=found, r=r)


def _finish(
    bp: TaskBlueprint, pack: DomainPack, turns: List[TurnRecord], store: EntityStore,
    stop_reason: StopReason, attempt: int, system: str, bon_n: int,
) -> Trajectory:
    traj = Trajectory(
        task_id=bp.task_id,
        attempt=attempt,
        turns=turns,
        final_snapshot=snapshot(store),
        stop_reason=stop_reason,
        system=system,
        bon_n=bon_n,
    )
    if stop_reason == "human_stop":
        traj.reward = evaluate_reward(traj, bp, pack).r
    return traj


def run_episode(bp: TaskBlueprint, pack: DomainPack, cfg: EpisodeConfig, attempt: int = 0) -> Trajectory:
    """One conversation on its own forked store."""
    store = pack.fresh_store()
    tools = pack.specs()
    system = agent_system_prompt(pack, cfg.templates.agent)
    key = f"{bp.task_id}/attempt-{attempt}"
    turns: List[TurnRecord] = []
    stop_reason: StopReason = "max_turns"

    try:
        while len(_dialogue(turns)) < cfg.max_turns:
            human = human_turn(bp, turns, cfg, conversation=key, domain=pack.name)
            turns.append(TurnRecord(speaker="human", content=human.text, bon_scores=human.bon_scores))
            if human.stop:
                stop_reason = "human_stop"
                break
            if len(_dialogue(turns)) >= cfg.max_turns:
                break
            turns.extend(agent_turn(turns, tools, system, cfg.agent, store, pack, cfg.tool_cap, key))
    except ToolLoopExceeded as exc:
        turns.extend(exc.records)
        stop_reason = "error"
        logger.warning("Episode %s: %s", key, exc)
    except GatewayError as exc:
        stop_reason = "error"
        logger.warning("Episode %s stopped on backend failure: %s", key, exc)

    traj = _finish(bp, pack, turns, store, stop_reason, attempt, system, cfg.bon_n)
    logger.info("Episode %s finished: %s, reward %s, %s turns", key, stop_reason, traj.reward, len(turns))
    return traj


def oracle_trajectory(bp: TaskBlueprint, pack: DomainPack, attempt: int = 0) -> Trajectory:
    """An agent that replays the groundtruth actions and recites every expected output."""
    store = pack.fresh_store()
    turns = [TurnRecord(speaker="human", content=bp.instruction)]
    for i, call in enumerate(bp.actions):
        call = call.model_copy(update={"call_id": f"call_{i}"})
        turns.append(TurnRecord(speaker="assistant", tool_call=call))
        turns.append(TurnRecord(speaker="tool", tool_result=pack.execute(call, store)))
    turns.append(TurnRecord(speaker="assistant", content=" ".join(["Done."] + list(bp.outputs))))
    turns.append(TurnRecord(speaker="human", content=STOP))
    return _finish(bp, pack, turns, store, "human_stop", attempt, "", 1)


# ---------------------------------------------------------------------------
# Rejection sampling
# ---------------------------------------------------------------------------


def trajectory_key(traj: Trajectory) -> str:
    """Identity of the executed action sequence, ignoring dialogue text."""
    calls = [t.tool_call.canonical() for t in traj.turns if t.tool_call is not None]
    return hashlib.sha1(json.dumps(calls).encode("utf-8")).hexdigest()


def simulate_attempts(bp: TaskBlueprint, cfg: EpisodeConfig, pack: DomainPack) -> List[Trajectory]:
    """Every attempt, successful or not, in attempt order."""

    def _attempt(i: int) -> Optional[Trajectory]:
        try:
            return run_episode(bp, pack, cfg, attempt=i)
        except InternalInconsistencyError as exc:
            logger.error("Attempt %s of %s failed: %s", i, bp.task_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(_attempt, range(cfg.attempts)))
    return [t for t in results if t is not None]


def select_unique_successes(trajectories: List[Trajectory]) -> List[Trajectory]:
    seen = set()
    kept = []
    for traj in trajectories:
        if traj.reward != 1 or traj.stop_reason != "human_stop":
            continue
        key = trajectory_key(traj)
        if key in seen:
            continue
        seen.add(key)
        kept.append(traj)
    return kept


def collect(bp: TaskBlueprint, cfg: EpisodeConfig, pack: DomainPack) -> List[Trajectory]:
    """Unique successful trajectories over ``cfg.attempts`` episodes."""
    if not bp.accepted:
        raise ValueError(f"blueprint {bp.task_id} was not accepted")
    kept = select_unique_successes(simulate_attempts(bp, cfg, pack))
    logger.info("Task %s: kept %s unique successful trajectories", bp.task_id, len(kept))
    return kept
