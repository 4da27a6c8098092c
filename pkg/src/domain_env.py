"""Executable domain environment: entity store, tools, snapshots and policies."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model, model_validator
from pydantic import StrictBool, StrictFloat, StrictInt, StrictStr

logger = logging.getLogger(__name__)

ParamType = Literal["string", "integer", "number", "boolean", "array", "object"]


class SnapshotError(ValueError):
    """Raised for snapshot text that cannot be parsed or patched."""


class ToolError(Exception):
    """Raised by tool implementations for domain-rule failures."""


# ---------------------------------------------------------------------------
# Tool call / result wire types
# ---------------------------------------------------------------------------


class ToolCall(BaseModel):
    """A structured tool invocation."""

    name: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    # Transport id linking a tool message to its call; not part of the canonical form
    call_id: Optional[str] = None

    def canonical(self) -> str:
        return json.dumps(
            {"name": self.name, "arguments": self.arguments},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @classmethod
    def from_canonical(cls, text: str) -> "ToolCall":
        data = json.loads(text)
        return cls(name=data["name"], arguments=data.get("arguments", {}))


class ToolResult(BaseModel):
    status: Literal["ok", "error"]
    payload: Any = None
    message: Optional[str] = None

    @model_validator(mode="after")
    def _one_of(self) -> "ToolResult":
        if self.status == "ok" and (self.payload is None or self.message is not None):
            raise ValueError("ok results carry a payload and no message")
        if self.status == "error" and (self.message is None or self.payload is not None):
            raise ValueError("error results carry a message and no payload")
        return self

    @classmethod
    def ok(cls, payload: Any) -> "ToolResult":
        return cls(status="ok", payload=payload)

    @classmethod
    def error(cls, message: str) -> "ToolResult":
        return cls(status="error", message=message)

    def to_content(self) -> str:
        """Observation text handed back to the agent."""
        body = self.payload if self.status == "ok" else {"error": self.message}
        return json.dumps(body, sort_keys=True, ensure_ascii=False)


class TraceStep(BaseModel):
    call: ToolCall
    result: ToolResult


class ToolParam(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    type: ParamType
    required: bool = True
    description: str = ""


class ToolSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    kind: Literal["read", "write"]
    params: Tuple[ToolParam, ...] = ()
    returns: str = ""
    # Documented payload field names; used to infer API dependencies
    outputs: Tuple[str, ...] = ()
    doc: str = ""

    @model_validator(mode="after")
    def _unique_params(self) -> "ToolSpec":
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate parameter names in tool {self.name}")
        return self

    def to_openai(self) -> Dict[str, Any]:
        """Function schema in the chat-completions ``tools`` format."""
        properties = {
            p.name: {"type": p.type, "description": p.description} for p in self.params
        }
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.doc,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": [p.name for p in self.params if p.required],
                },
            },
        }

    def to_python(self) -> str:
        """Python-style signature with docstring, used in generation prompts."""
        pytypes = {
            "string": "str",
            "integer": "int",
            "number": "float",
            "boolean": "bool",
            "array": "list",
            "object": "dict",
        }
        args = ", ".join(
            f"{p.name}: {pytypes[p.type]}" if p.required else f"{p.name}: {pytypes[p.type]} = None"
            for p in self.params
        )
        lines = [f"def {self.name}({args}) -> dict:", f'    """{self.doc}']
        for p in self.params:
            lines.append(f"    {p.name}: {p.description}")
        if self.returns:
            lines.append(f"    Returns: {self.returns}")
        lines.append('    """')
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Entity store and schema
# ---------------------------------------------------------------------------

_FIELD_TYPES: Dict[str, Any] = {
    "string": StrictStr,
    "integer": StrictInt,
    "number": Union[StrictFloat, StrictInt],
    "boolean": StrictBool,
    "array": list,
    "object": dict,
}


class StoreSchema:
    """Per-collection document schemas compiled to strict pydantic models."""

    def __init__(self, spec: Dict[str, Any]) -> None:
        self.spec = spec
        self.models: Dict[str, type[BaseModel]] = {}
        for collection, body in spec.items():
            fields: Dict[str, Any] = {}
            for field, info in body.get("fields", {}).items():
                ftype = _FIELD_TYPES[info["type"]]
                if info.get("required", True):
                    fields[field] = (ftype, ...)
                else:
                    fields[field] = (Optional[ftype], None)
            self.models[collection] = create_model(
                f"{collection.title()}Document",
                __config__=ConfigDict(extra="forbid"),
                **fields,
            )

    def id_field(self, collection: str) -> Optional[str]:
        return self.spec.get(collection, {}).get("id_field")

    def validate(self, store: "EntityStore") -> None:
        """Raise ``ValueError`` naming the first document that breaks its schema."""
        for collection, docs in store.collections.items():
            model = self.models.get(collection)
            if model is None:
                raise ValueError(f"unknown collection '{collection}'")
            id_field = self.id_field(collection)
            for entity_id, doc in docs.items():
                try:
                    model.model_validate(doc)
                except ValidationError as exc:
                    raise ValueError(f"{collection}/{entity_id}: {exc.errors()[0]['msg']}") from exc
                if id_field and doc.get(id_field) != entity_id:
                    raise ValueError(f"{collection}/{entity_id}: {id_field} does not match entity id")


class EntityStore:
    """Collections of documents keyed by entity id."""

    def __init__(self, collections: Optional[Dict[str, Dict[str, Any]]] = None) -> None:
        self.collections: Dict[str, Dict[str, Any]] = collections if collections is not None else {}

    def get(self, collection: str, entity_id: str) -> Optional[Dict[str, Any]]:
        return self.collections.get(collection, {}).get(entity_id)

    def require(self, collection: str, entity_id: str, label: str) -> Dict[str, Any]:
        doc = self.get(collection, entity_id)
        if doc is None:
            raise ToolError(f"{label} not found")
        return doc

    def fork(self) -> "EntityStore":
        return fork(self)

    def snapshot(self) -> "StateSnapshot":
        return snapshot(self)


def fork(store: EntityStore) -> EntityStore:
    """Deep, independent copy of ``store``."""
    return EntityStore(copy.deepcopy(store.collections))


# ---------------------------------------------------------------------------
# Snapshots and diff patches
# ---------------------------------------------------------------------------


class StateSnapshot(BaseModel):
    model_config = ConfigDict(frozen=True)

    canonical: str

    def load(self) -> Dict[str, Any]:
        try:
            data = json.loads(self.canonical)
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"malformed snapshot: {exc}") from exc
        if not isinstance(data, dict):
            raise SnapshotError("malformed snapshot: top level is not an object")
        return data


def _canonical(data: Any) -> str:
    # json emits ints unpadded and floats via repr (shortest round trip)
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def snapshot(store: EntityStore) -> StateSnapshot:
    return StateSnapshot(canonical=_canonical(store.collections))


class Hunk(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["add", "remove", "replace"]
    path: str
    before: Any = None
    after: Any = None


class DiffPatch(BaseModel):
    hunks: List[Hunk] = Field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.hunks)

    def paths(self) -> set[str]:
        return {h.path for h in self.hunks}

    def render(self) -> str:
        """Readable listing for prompts."""
        if not self.hunks:
            return "(empty)"
        lines = []
        for h in self.hunks:
            if h.op == "add":
                lines.append(f"+ {h.path}: {json.dumps(h.after, sort_keys=True)}")
            elif h.op == "remove":
                lines.append(f"- {h.path}: {json.dumps(h.before, sort_keys=True)}")
            else:
                lines.append(
                    f"~ {h.path}: {json.dumps(h.before, sort_keys=True)} -> {json.dumps(h.after, sort_keys=True)}"
                )
        return "\n".join(lines)


def _escape(segment: str) -> str:
    return segment.replace("~", "~0").replace("/", "~1")


def _unescape(segment: str) -> str:
    return segment.replace("~1", "/").replace("~0", "~")


def _join(path: str, key: str) -> str:
    return f"{path}/{_escape(key)}" if path else _escape(key)


def _same(a: Any, b: Any) -> bool:
    return _canonical(a) == _canonical(b)


def _diff_values(before: Any, after: Any, path: str, hunks: List[Hunk]) -> None:
    if isinstance(before, dict) and isinstance(after, dict):
        for key in sorted(set(before) | set(after)):
            sub = _join(path, key)
            if key not in after:
                hunks.append(Hunk(op="remove", path=sub, before=before[key]))
            elif key not in before:
                hunks.append(Hunk(op="add", path=sub, after=after[key]))
            else:
                _diff_values(before[key], after[key], sub, hunks)
        return
    if not _same(before, after):
        hunks.append(Hunk(op="replace", path=path, before=before, after=after))


def diff(before: StateSnapshot, after: StateSnapshot) -> DiffPatch:
    """Hunks for every changed path; maps recurse, lists and scalars are leaves."""
    hunks: List[Hunk] = []
    _diff_values(before.load(), after.load(), "", hunks)
    return DiffPatch(hunks=hunks)


def apply_patch(before: StateSnapshot, patch: DiffPatch) -> StateSnapshot:
    data = before.load()
    for hunk in patch.hunks:
        parts = [_unescape(p) for p in hunk.path.split("/")]
        parent = data
        for part in parts[:-1]:
            node = parent.get(part) if isinstance(parent, dict) else None
            if not isinstance(node, dict):
                raise SnapshotError(f"path {hunk.path} does not resolve")
            parent = node
        leaf = parts[-1]
        if hunk.op == "add":
            if leaf in parent:
                raise SnapshotError(f"add at existing path {hunk.path}")
            parent[leaf] = copy.deepcopy(hunk.after)
            continue
        if leaf not in parent or not _same(parent[leaf], hunk.before):
            raise SnapshotError(f"hunk at {hunk.path} does not match the snapshot")
        if hunk.op == "remove":
            del parent[leaf]
        else:
            parent[leaf] = copy.deepcopy(hunk.after)
    return StateSnapshot(canonical=_canonical(data))


# ---------------------------------------------------------------------------
# Tool registry and execution
# ---------------------------------------------------------------------------

ToolImpl = Callable[..., Any]


def _type_ok(expected: str, value: Any) -> bool:
    if expected == "string":
        return isinstance(value, str)
    if expected == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if expected == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected == "boolean":
        return isinstance(value, bool)
    if expected == "array":
        return isinstance(value, list)
    return isinstance(value, dict)


class ToolRegistry:
    """Registered tool specs and their implementations."""

    def __init__(self) -> None:
        self.specs: Dict[str, ToolSpec] = {}
        self.impls: Dict[str, ToolImpl] = {}

    def register(self, spec: ToolSpec, impl: ToolImpl) -> None:
        if spec.name in self.specs:
            raise ValueError(f"tool {spec.name} already registered")
        self.specs[spec.name] = spec
        self.impls[spec.name] = impl

    def tool(
        self,
        kind: Literal["read", "write"],
        params: Iterable[ToolParam] = (),
        returns: str = "",
        outputs: Iterable[str] = (),
    ) -> Callable[[ToolImpl], ToolImpl]:
        """Decorator form of :meth:`register`; the docstring becomes the tool doc."""

        def wrap(fn: ToolImpl) -> ToolImpl:
            spec = ToolSpec(
                name=fn.__name__,
                kind=kind,
                params=tuple(params),
                returns=returns,
                outputs=tuple(outputs),
                doc=(fn.__doc__ or "").strip(),
            )
            self.register(spec, fn)
            return fn

        return wrap

    def names(self, kind: Optional[str] = None) -> List[str]:
        return sorted(n for n, s in self.specs.items() if kind is None or s.kind == kind)

    def check_arguments(self, call: ToolCall) -> Optional[str]:
        spec = self.specs.get(call.name)
        if spec is None:
            return f"unknown tool '{call.name}'"
        known = {p.name: p for p in spec.params}
        for name in call.arguments:
            if name not in known:
                return f"unexpected argument '{name}' for {call.name}"
        for param in spec.params:
            if param.name not in call.arguments:
                if param.required:
                    return f"missing required argument '{param.name}' for {call.name}"
                continue
            if not _type_ok(param.type, call.arguments[param.name]):
                return f"argument '{param.name}' of {call.name} expects {param.type}"
        return None


def execute(
    call: ToolCall,
    store: EntityStore,
    registry: ToolRegistry,
    schema: Optional[StoreSchema] = None,
) -> ToolResult:
    """Run ``call`` against ``store``; failures come back as error results.

    The tool runs on a working copy which replaces the store contents only
    for a successful write, so read tools and failed writes leave the store
    untouched.
    """
    problem = registry.check_arguments(call)
    if problem:
        return ToolResult.error(problem)
    spec = registry.specs[call.name]
    working = fork(store)
    try:
        payload = registry.impls[call.name](working, **call.arguments)
    except ToolError as exc:
        return ToolResult.error(str(exc))
    except Exception as exc:  # tool bugs must not escape the call boundary
        logger.warning("Tool %s raised %r", call.name, exc)
        return ToolResult.error(f"internal tool error: {exc}")
    if payload is None:
        logger.warning("Tool %s returned no payload", call.name)
        return ToolResult.error(f"internal tool error: {call.name} returned no payload")
    if spec.kind == "write":
        if schema is not None:
            try:
                schema.validate(working)
            except ValueError as exc:
                return ToolResult.error(f"schema violation: {exc}")
        store.collections = working.collections
    return ToolResult.ok(copy.deepcopy(payload))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

PolicyCheck = Callable[[List[TraceStep], EntityStore, EntityStore], Optional[str]]


@dataclass(frozen=True)
class PolicyRule:
    id: str
    description: str
    check: PolicyCheck


class Violation(BaseModel):
    rule_id: str
    message: str
    rule_error: bool = False


def run_policies(
    rules: Iterable[PolicyRule],
    trace: List[TraceStep],
    store_before: EntityStore,
    store_after: EntityStore,
) -> List[Violation]:
    """Evaluate every rule; a rule that crashes counts as violated."""
    violations: List[Violation] = []
    for rule in rules:
        try:
            message = rule.check(trace, store_before, store_after)
        except Exception as exc:
            logger.warning("Policy rule %s failed to evaluate: %r", rule.id, exc)
            violations.append(
                Violation(rule_id=rule.id, message=f"rule-error: {exc}", rule_error=True)
            )
            continue
        if message:
            violations.append(Violation(rule_id=rule.id, message=message))
    return violations
