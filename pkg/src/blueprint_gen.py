"""Task blueprint generation: propose, validate, review, refine and recombine."""
from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
from pydantic import BaseModel, Field, model_validator

from .context_sampler import GenerationContext, Persona, SamplerKnobs, render_prompt, sample_context
from .domain_env import (
    DiffPatch,
    EntityStore,
    PolicyRule,
    ToolCall,
    TraceStep,
    apply_patch,
    diff,
    run_policies,
    snapshot,
)
from .domain_pack import DomainPack
from .llm_gateway import Backend, ChatMessage, GatewayError, complete
from .prompts import load_template, render, section

logger = logging.getLogger(__name__)

METRICS = ("correctness", "completeness", "satisfaction", "creativity")
GENERATOR_SYSTEM = "You generate realistic, verifiable tasks for training tool-use assistants."
JUDGE_SYSTEM = "You are an impartial AI judge."
REVIEWER_SYSTEM = "You summarize judge feedback into an improvement plan."


class BlueprintParseError(ValueError):
    """A model reply did not have the required structure."""

    def __init__(self, component: str, message: str) -> None:
        super().__init__(f"{component}: {message}")
        self.component = component


class RecombinationError(ValueError):
    """The requested tasks cannot be combined at all."""


class TaskBlueprint(BaseModel):
    task_id: str = ""
    thought: str = ""
    instruction: str
    actions: List[ToolCall] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    persona: Optional[Persona] = None
    domain: str = ""
    round: int = 0
    accepted: bool = False
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _not_empty(self) -> "TaskBlueprint":
        if not self.actions and not self.outputs:
            raise ValueError("actions may be empty only when outputs are given")
        return self

    def to_record(self) -> Dict[str, Any]:
        """One line of blueprints.jsonl."""
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "thought": self.thought,
            "actions": [{"name": a.name, "arguments": a.arguments} for a in self.actions],
            "outputs": list(self.outputs),
            "persona_id": self.persona.id if self.persona else None,
            "persona_description": self.persona.description if self.persona else None,
            "domain": self.domain,
            "round": self.round,
            "accepted": self.accepted,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "TaskBlueprint":
        persona = None
        if record.get("persona_id"):
            persona = Persona(id=record["persona_id"], description=record["persona_description"])
        return cls(
            task_id=record.get("task_id", ""),
            thought=record.get("thought", ""),
            instruction=record["instruction"],
            actions=[ToolCall(name=a["name"], arguments=a.get("arguments", {})) for a in record["actions"]],
            outputs=record["outputs"],
            persona=persona,
            domain=record.get("domain", ""),
            round=record.get("round", 0),
            accepted=record.get("accepted", True),
            provenance=record.get("provenance", {}),
        )

    def task_object(self) -> str:
        """The task as shown to judges and reviewers."""
        return json.dumps(
            {
                "intent": self.instruction,
                "actions": [{"name": a.name, "arguments": a.arguments} for a in self.actions],
                "outputs": self.outputs,
            },
            indent=2,
            sort_keys=True,
        )


class ValidationReport(BaseModel):
    stage: Literal["format", "execution", "policy"]
    passed: bool
    failures: List[str] = Field(default_factory=list)
    diff_patch: Optional[DiffPatch] = None
    trace: Optional[List[TraceStep]] = None

    @model_validator(mode="after")
    def _consistent(self) -> "ValidationReport":
        if self.passed == bool(self.failures):
            raise ValueError("passed must hold exactly when there are no failures")
        return self


class JudgeVerdict(BaseModel):
    reflection: str = ""
    correctness: Literal[0, 1]
    completeness: Literal[0, 1]
    satisfaction: Literal[0, 1]
    creativity: Literal[0, 1]
    total: int
    correction: str = ""

    @model_validator(mode="after")
    def _total(self) -> "JudgeVerdict":
        if self.total != sum(getattr(self, m) for m in METRICS):
            raise ValueError("total must equal the sum of the metric scores")
        return self

    @classmethod
    def zero(cls, reason: str) -> "JudgeVerdict":
        return cls(reflection=reason, correctness=0, completeness=0, satisfaction=0, creativity=0, total=0)


class AcceptanceRule(BaseModel):
    min_total: int = Field(default=3, ge=0, le=len(METRICS))
    require_correctness: bool = True

    def accepts(self, majority: Dict[str, int]) -> bool:
        if self.require_correctness and majority["correctness"] != 1:
            return False
        return sum(majority.values()) >= self.min_total


class CommitteeDecision(BaseModel):
    verdicts: List[JudgeVerdict]
    majority_metrics: Dict[str, int]
    majority_total: int
    accepted: bool
    failed_judges: List[int] = Field(default_factory=list)


class FeedbackSummary(BaseModel):
    thought: str = ""
    summary: str


class AuditEntry(BaseModel):
    round: int
    proposal: Optional[str] = None
    reports: List[ValidationReport] = Field(default_factory=list)
    decision: Optional[CommitteeDecision] = None
    feedback: Optional[FeedbackSummary] = None
    error: Optional[str] = None


class RefineResult(BaseModel):
    task_id: str
    status: Literal["accepted", "exhausted", "aborted"]
    round: int
    blueprint: Optional[TaskBlueprint] = None
    audit: List[AuditEntry] = Field(default_factory=list)
    context: Dict[str, Any] = Field(default_factory=dict)


class RefineAborted(RuntimeError):
    """A backend failed mid-loop; ``result`` carries the audit trail so far."""

    def __init__(self, result: RefineResult) -> None:
        super().__init__(f"refinement of {result.task_id} aborted at round {result.round}")
        self.result = result


class Rejected(BaseModel):
    reason: str


@dataclass
class Templates:
    generation: str
    validation: str
    review: str
    recombine: str


def load_templates(prompt_dir: Path | None = None) -> Templates:
    return Templates(
        generation=load_template("generation", prompt_dir),
        validation=load_template("validation", prompt_dir),
        review=load_template("review", prompt_dir),
        recombine=load_template("recombine", prompt_dir),
    )


@dataclass
class PipelineBackends:
    generator: Backend
    judges: List[Backend]
    reviewer: Backend


@dataclass
class GenerationSettings:
    knobs: SamplerKnobs = field(default_factory=SamplerKnobs)
    rule: AcceptanceRule = field(default_factory=AcceptanceRule)
    reflection: bool = True


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _tag(text: str, tag: str) -> Optional[str]:
    match = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.S)
    return match.group(1) if match else None


def parse_blueprint(text: str, **annotations: Any) -> TaskBlueprint:
    """Parse a ``<thought>`` / ``<answer>`` proposal.

    The answer must be a strict JSON object with ``instruction``,
    ``actions`` and ``outputs``. Errors name the offending component so they
    can be fed back to the generator.
    """
    thought = _tag(text, "thought")
    if thought is None:
        raise BlueprintParseError("thought", "missing <thought> tag")
    answer = _tag(text, "answer")
    if answer is None:
        raise BlueprintParseError("answer", "missing <answer> tag")
    try:
        data = json.loads(answer)
    except json.JSONDecodeError as exc:
        raise BlueprintParseError("answer", f"<answer> is not strict JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise BlueprintParseError("answer", "<answer> must be a JSON object")
    extra = sorted(set(data) - {"instruction", "actions", "outputs"})
    if extra:
        raise BlueprintParseError("answer", f"unexpected keys {extra}")

    instruction = data.get("instruction")
    if not isinstance(instruction, str) or not instruction.strip():
        raise BlueprintParseError("instruction", "instruction must be a non-empty string")

    actions = data.get("actions")
    if not isinstance(actions, list):
        raise BlueprintParseError("actions", "actions must be an array")
    calls = []
    for i, entry in enumerate(actions):
        if not isinstance(entry, dict):
            raise BlueprintParseError("actions", f"actions[{i}] is not an object")
        if set(entry) - {"name", "arguments"}:
            raise BlueprintParseError("actions", f"actions[{i}] has keys other than name and arguments")
        if not isinstance(entry.get("name"), str):
            raise BlueprintParseError("actions", f"actions[{i}].name must be a string")
        arguments = entry.get("arguments", {})
        if not isinstance(arguments, dict):
            raise BlueprintParseError("actions", f"actions[{i}].arguments must be an object")
        calls.append(ToolCall(name=entry["name"], arguments=arguments))

    outputs = data.get("outputs")
    if not isinstance(outputs, list):
        raise BlueprintParseError("outputs", "outputs must be an array")
    for i, value in enumerate(outputs):
        if not isinstance(value, str):
            raise BlueprintParseError(
                "outputs",
                f"outputs in <outputs> are strings; outputs[{i}] is {type(value).__name__}",
            )
    if not calls and not outputs:
        raise BlueprintParseError("actions", "actions may be empty only for pure information requests")

    return TaskBlueprint(
        thought=thought.strip(),
        instruction=instruction.strip(),
        actions=calls,
        outputs=outputs,
        **annotations,
    )


def parse_verdict(text: str) -> JudgeVerdict:
    body = _tag(text or "", "scores")
    if body is None:
        raise BlueprintParseError("scores", "missing <scores> tag")
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise BlueprintParseError("scores", f"<scores> is not JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise BlueprintParseError("scores", "<scores> must be a JSON object")
    bits = {}
    for metric in METRICS:
        value = data.get(metric)
        if isinstance(value, bool) or value not in (0, 1):
            raise BlueprintParseError("scores", f"{metric} must be 0 or 1")
        bits[metric] = int(value)
    total = sum(bits.values())
    if data.get("total") != total:
        logger.warning("Judge total %r disagrees with metric sum %s; using the sum", data.get("total"), total)
    return JudgeVerdict(
        reflection=str(data.get("reflection", "")),
        correction=str(data.get("correction", "")),
        total=total,
        **bits,
    )


def parse_feedback(text: str) -> FeedbackSummary:
    summary = _tag(text or "", "summary")
    if summary is None:
        raise BlueprintParseError("summary", "missing <summary> tag")
    if not summary.strip():
        raise BlueprintParseError("summary", "empty <summary>")
    return FeedbackSummary(thought=(_tag(text, "thought") or "").strip(), summary=summary.strip())


# ---------------------------------------------------------------------------
# Proposal and validation stages
# ---------------------------------------------------------------------------


def reflection_block(feedback: Sequence[str]) -> str:
    return "## Improvement plan\n" + section(feedback) + "\n\n"


def propose(
    ctx: GenerationContext,
    backend: Backend,
    pack: DomainPack,
    template: str,
    feedback: Optional[Sequence[str]] = None,
    conversation: str = "generator",
) -> str:
    prompt = render_prompt(ctx, template, pack)
    if feedback:
        prompt = reflection_block(feedback) + prompt
    messages = [
        ChatMessage(role="system", content=GENERATOR_SYSTEM),
        ChatMessage(role="user", content=prompt),
    ]
    reply = complete(backend, messages, conversation=conversation)
    return reply.content or ""


def format_failure(exc: BlueprintParseError) -> ValidationReport:
    return ValidationReport(stage="format", passed=False, failures=[str(exc)])


def stage1_validate(
    bp: TaskBlueprint,
    pack: DomainPack,
    policies: Optional[List[PolicyRule]] = None,
) -> List[ValidationReport]:
    """Format, execution and policy checks, stopping at the first failing stage."""
    reports = [ValidationReport(stage="format", passed=True)]
    store = pack.fresh_store()
    trace = pack.replay(bp.actions, store)
    failures = [
        f"action {i} {step.call.name}: {step.result.message}"
        for i, step in enumerate(trace)
        if step.result.status == "error"
    ]
    if failures:
        reports.append(ValidationReport(stage="execution", passed=False, failures=failures, trace=trace))
        return reports
    patch = diff(snapshot(pack.seed), snapshot(store))
    reports.append(ValidationReport(stage="execution", passed=True, diff_patch=patch, trace=trace))

    rules = pack.policies if policies is None else policies
    violations = run_policies(rules, trace, pack.seed, store)
    reports.append(
        ValidationReport(
            stage="policy",
            passed=not violations,
            failures=[f"{v.rule_id}: {v.message}" for v in violations],
        )
    )
    return reports


def aggregate_verdicts(
    verdicts: Sequence[JudgeVerdict],
    rule: AcceptanceRule,
    failed_judges: Sequence[int] = (),
) -> CommitteeDecision:
    """Per-metric strict majority, then the acceptance rule."""
    if not verdicts:
        raise ValueError("committee has no verdicts")
    majority = {m: int(2 * sum(getattr(v, m) for v in verdicts) > len(verdicts)) for m in METRICS}
    return CommitteeDecision(
        verdicts=list(verdicts),
        majority_metrics=majority,
        majority_total=sum(majority.values()),
        accepted=rule.accepts(majority),
        failed_judges=list(failed_judges),
    )


def stage2_committee(
    bp: TaskBlueprint,
    diff_patch: DiffPatch,
    judges: Sequence[Backend],
    template: str,
    pack: DomainPack,
    rule: AcceptanceRule | None = None,
    conversation: str = "committee",
) -> CommitteeDecision:
    if not judges or len(judges) % 2 == 0:
        raise ValueError("committee size must be odd")
    rule = rule or AcceptanceRule()
    prompt = render(
        template,
        task=bp.task_object(),
        tools="\n\n".join(spec.to_python() for spec in pack.specs()),
        diff_patch=diff_patch.render(),
    )
    messages = [
        ChatMessage(role="system", content=JUDGE_SYSTEM),
        ChatMessage(role="user", content=prompt),
    ]

    def _judge(index: int) -> Optional[JudgeVerdict]:
        key = f"{conversation}/judge-{index}"
        for attempt in range(2):
            reply = complete(judges[index], messages, conversation=key)
            try:
                return parse_verdict(reply.content or "")
            except BlueprintParseError as exc:
                logger.warning("Judge %s verdict unparseable (attempt %s/2): %s", index, attempt + 1, exc)
        return None

    with ThreadPoolExecutor(max_workers=len(judges)) as pool:
        results = list(pool.map(_judge, range(len(judges))))

    failed = [i for i, verdict in enumerate(results) if verdict is None]
    verdicts = [v if v is not None else JudgeVerdict.zero("unparseable verdict") for v in results]
    decision = aggregate_verdicts(verdicts, rule, failed)
    logger.info(
        "Committee for %s: majority %s, total %s, accepted=%s",
        bp.task_id or "task",
        decision.majority_metrics,
        decision.majority_total,
        decision.accepted,
    )
    return decision


def stage3_review(
    bp: TaskBlueprint,
    decision: CommitteeDecision,
    reviewer: Backend,
    template: str,
    diff_patch: DiffPatch,
    conversation: str = "reviewer",
) -> Union[Literal["accepted"], FeedbackSummary]:
    """Accept, or summarize every judge's feedback for the generator."""
    if decision.accepted:
        return "accepted"
    reviews = "\n".join(
        f"Judge {i + 1}: " + verdict.model_dump_json() for i, verdict in enumerate(decision.verdicts)
    )
    prompt = render(template, diff_patch=diff_patch.render(), task=bp.task_object(), reviews=reviews)
    messages = [
        ChatMessage(role="system", content=REVIEWER_SYSTEM),
        ChatMessage(role="user", content=prompt),
    ]
    reply = complete(reviewer, messages, conversation=conversation)
    return parse_feedback(reply.content or "")


# ---------------------------------------------------------------------------
# Refinement loop
# ---------------------------------------------------------------------------


def _fallback_feedback(decision: CommitteeDecision) -> FeedbackSummary:
    corrections = [v.correction for v in decision.verdicts if v.correction]
    summary = " ".join(corrections) or f"Committee rejected the task (majority total {decision.majority_total})."
    return FeedbackSummary(summary=summary)


def refine_loop(
    pack: DomainPack,
    graph: nx.DiGraph,
    backends: PipelineBackends,
    max_rounds: int,
    *,
    seed: int,
    personas: List[Persona],
    templates: Templates,
    settings: GenerationSettings | None = None,
    task_id: str = "task",
) -> RefineResult:
    """Propose and validate until accepted or ``max_rounds`` is used up.

    Raises
    ------
    RefineAborted
        When a backend fails; the exception carries the audit trail.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    settings = settings or GenerationSettings()
    ctx = sample_context(pack, graph, seed, personas, settings.knobs)
    result = RefineResult(task_id=task_id, status="exhausted", round=0, context=ctx.model_dump(mode="json"))
    feedback: List[str] = []

    for round_no in range(1, max_rounds + 1):
        entry = AuditEntry(round=round_no)
        result.audit.append(entry)
        result.round = round_no
        try:
            entry.proposal = propose(
                ctx,
                backends.generator,
                pack,
                templates.generation,
                feedback if settings.reflection else None,
                conversation=f"{task_id}/generator",
            )
            try:
                bp = parse_blueprint(
                    entry.proposal,
                    task_id=task_id,
                    persona=ctx.persona,
                    domain=pack.name,
                    round=round_no,
                    provenance={
                        "seed": seed,
                        "persona_id": ctx.persona.id,
                        "write_apis": ctx.write_apis,
                        "domain_samples": [s.id for s in ctx.domain_samples],
                        "policy_count": len(ctx.policy_excerpts),
                        "example_count": len(ctx.examples),
                    },
                )
            except BlueprintParseError as exc:
                entry.reports = [format_failure(exc)]
                feedback = [str(exc)]
                logger.info("Round %s of %s: format check failed: %s", round_no, task_id, exc)
                continue

            entry.reports = stage1_validate(bp, pack)
            failed = next((r for r in entry.reports if not r.passed), None)
            if failed is not None:
                feedback = [f"{failed.stage} check: {f}" for f in failed.failures]
                logger.info("Round %s of %s: %s check failed", round_no, task_id, failed.stage)
                continue

            patch = entry.reports[1].diff_patch or DiffPatch()
            entry.decision = stage2_committee(
                bp, patch, backends.judges, templates.validation, pack, settings.rule,
                conversation=f"{task_id}/committee",
            )
            try:
                outcome = stage3_review(
                    bp, entry.decision, backends.reviewer, templates.review, patch,
                    conversation=f"{task_id}/reviewer",
                )
            except BlueprintParseError as exc:
                logger.warning("Reviewer reply for %s unusable (%s); using judge corrections", task_id, exc)
                outcome = _fallback_feedback(entry.decision)
        except GatewayError as exc:
            entry.error = str(exc)
            result.status = "aborted"
            logger.error("Refinement of %s aborted at round %s: %s", task_id, round_no, exc)
            raise RefineAborted(result) from exc

        if outcome == "accepted":
            result.status = "accepted"
            result.blueprint = bp.model_copy(update={"accepted": True})
            logger.info("Task %s accepted at round %s", task_id, round_no)
            return result
        entry.feedback = outcome
        feedback = [outcome.summary]

    logger.info("Task %s exhausted after %s rounds", task_id, max_rounds)
    return result


# ---------------------------------------------------------------------------
# Reverse task recombination
# ---------------------------------------------------------------------------


def _overlapping(paths_a: set[str], paths_b: set[str]) -> bool:
    for a in paths_a:
        for b in paths_b:
            if a == b or a.startswith(b + "/") or b.startswith(a + "/"):
                return True
    return False


def recombine(
    tasks: Sequence[TaskBlueprint],
    backend: Backend,
    judges: Sequence[Backend],
    pack: DomainPack,
    templates: Templates,
    rule: AcceptanceRule | None = None,
    reviewer: Optional[Backend] = None,
    policies: Optional[List[PolicyRule]] = None,
    conversation: str = "recombine",
) -> Union[TaskBlueprint, Rejected]:
    """Concatenate validated tasks into one and re-validate its semantics.

    Constituents whose state changes touch disjoint paths skip the
    format/execution stage; overlapping ones are re-executed in full.
    """
    if not tasks:
        raise RecombinationError("nothing to recombine")
    for task in tasks:
        if not task.accepted:
            raise RecombinationError(f"task {task.task_id or '?'} was not accepted")
    persona_ids = {task.persona.id if task.persona else None for task in tasks}
    if len(persona_ids) != 1:
        raise RecombinationError("tasks belong to different personas")
    rules = pack.policies if policies is None else policies

    combined = TaskBlueprint(
        task_id="+".join(t.task_id for t in tasks),
        thought="",
        instruction=" ".join(t.instruction for t in tasks),
        actions=[a for t in tasks for a in t.actions],
        outputs=[o for t in tasks for o in t.outputs],
        persona=tasks[0].persona,
        domain=tasks[0].domain or pack.name,
        round=max(t.round for t in tasks),
        provenance={"recombined_from": [t.task_id for t in tasks]},
    )

    seed_snapshot = snapshot(pack.seed)
    traces: List[List[TraceStep]] = []
    patches: List[DiffPatch] = []
    for task in tasks:
        store = pack.fresh_store()
        trace = pack.replay(task.actions, store)
        if any(step.result.status == "error" for step in trace):
            return Rejected(reason=f"constituent {task.task_id} no longer executes")
        traces.append(trace)
        patches.append(diff(seed_snapshot, snapshot(store)))

    overlap = any(
        _overlapping(patches[i].paths(), patches[j].paths())
        for i in range(len(patches))
        for j in range(i + 1, len(patches))
    )
    if overlap:
        logger.info("Constituents of %s touch overlapping paths; re-running stage 1", combined.task_id)
        reports = stage1_validate(combined, pack, rules)
        failed = next((r for r in reports if not r.passed), None)
        if failed is not None:
            return Rejected(reason=f"{failed.stage} check failed: " + "; ".join(failed.failures))
        patch = reports[1].diff_patch or DiffPatch()
    else:
        after = seed_snapshot
        for p in patches:
            after = apply_patch(after, p)
        trace = [step for t in traces for step in t]
        violations = run_policies(rules, trace, pack.seed, EntityStore(after.load()))
        if violations:
            return Rejected(
                reason="policy check failed: " + "; ".join(f"{v.rule_id}: {v.message}" for v in violations)
            )
        patch = DiffPatch(hunks=sorted((h for p in patches for h in p.hunks), key=lambda h: h.path))

    prompt = render(
        templates.recombine,
        domain=combined.domain,
        persona=combined.persona.description if combined.persona else "(none)",
        instructions=section(t.instruction for t in tasks),
        actions=json.dumps([{"name": a.name, "arguments": a.arguments} for a in combined.actions], indent=2),
        outputs=section(combined.outputs),
    )
    reply = complete(
        backend,
        [ChatMessage(role="system", content=GENERATOR_SYSTEM), ChatMessage(role="user", content=prompt)],
        conversation=f"{conversation}/generator",
    )
    instruction = _tag(reply.content or "", "instruction")
    if instruction is None or not instruction.strip():
        return Rejected(reason="instruction synthesis failed: missing <instruction> tag")
    combined = combined.model_copy(
        update={"instruction": instruction.strip(), "thought": (_tag(reply.content or "", "thought") or "").strip()}
    )

    decision = stage2_committee(
        combined, patch, judges, templates.validation, pack, rule, conversation=f"{conversation}/committee"
    )
    if not decision.accepted:
        reason = f"committee rejected the combined task (majority total {decision.majority_total})"
        if reviewer is not None:
            outcome = stage3_review(
                combined, decision, reviewer, templates.review, patch, conversation=f"{conversation}/reviewer"
            )
            if not isinstance(outcome, str):
                reason += f": {outcome.summary}"
        return Rejected(reason=reason)
    return combined.model_copy(update={"accepted": True})
