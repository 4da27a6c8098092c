"""Domain pack loading: schema, seed store, manifest and registered tools."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import retail_pack
from .domain_env import (
    EntityStore,
    PolicyRule,
    StoreSchema,
    ToolCall,
    ToolRegistry,
    ToolResult,
    ToolSpec,
    TraceStep,
    execute,
    fork,
)

logger = logging.getLogger(__name__)

# Tool sets are registered in code; manifests refer to them by name.
TOOLSETS: Dict[str, Tuple[ToolRegistry, Dict[str, Callable], Callable]] = {
    "retail": (retail_pack.registry, retail_pack.POLICY_CHECKS, retail_pack.sample_metadata),
}


@dataclass(frozen=True)
class SamplingSpec:
    """Which collection feeds the domain-data sampler, and how its documents
    point at their owners."""

    collection: str
    owner_field: Optional[str] = None
    owner_collection: Optional[str] = None


@dataclass
class DomainPack:
    name: str
    path: Path
    schema: StoreSchema
    seed: EntityStore
    registry: ToolRegistry
    policies: List[PolicyRule]
    domain_rules: List[str]
    forbidden_pairs: List[Tuple[str, str]]
    declared_edges: List[Tuple[str, str]]
    sampling: SamplingSpec
    max_rounds: int = 3
    examples: List[str] = field(default_factory=list)
    metadata_fn: Callable[[str, Dict[str, Any]], Dict[str, Any]] = lambda c, d: {}

    def fresh_store(self) -> EntityStore:
        return fork(self.seed)

    def execute(self, call: ToolCall, store: EntityStore) -> ToolResult:
        return execute(call, store, self.registry, self.schema)

    def replay(self, actions: List[ToolCall], store: EntityStore) -> List[TraceStep]:
        """Execute ``actions`` in order, stopping after the first error."""
        trace: List[TraceStep] = []
        for call in actions:
            result = self.execute(call, store)
            trace.append(TraceStep(call=call, result=result))
            if result.status == "error":
                break
        return trace

    def specs(self, names: Optional[List[str]] = None) -> List[ToolSpec]:
        wanted = names if names is not None else self.registry.names()
        return [self.registry.specs[n] for n in wanted]

    def policy_prose(self) -> List[str]:
        return [rule.description for rule in self.policies]


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"Domain pack file not found at {path}") from None


def _sampling_spec(entry: Any, schema: StoreSchema, where: Path) -> SamplingSpec:
    if not isinstance(entry, dict) or not entry.get("collection"):
        raise ValueError(f"{where}: 'sampling' must name the sampled collection")
    spec = SamplingSpec(
        collection=entry["collection"],
        owner_field=entry.get("owner_field"),
        owner_collection=entry.get("owner_collection"),
    )
    if spec.collection not in schema.models:
        raise ValueError(f"{where}: sampled collection '{spec.collection}' is not in the schema")
    if (spec.owner_field is None) != (spec.owner_collection is None):
        raise ValueError(f"{where}: owner_field and owner_collection go together")
    if spec.owner_collection is not None and spec.owner_collection not in schema.models:
        raise ValueError(f"{where}: owner collection '{spec.owner_collection}' is not in the schema")
    return spec


def load_domain_pack(path: str | Path) -> DomainPack:
    """Load a domain pack directory.

    Raises
    ------
    FileNotFoundError
        If the directory or one of schema.json, seed.json, manifest.json is missing.
    ValueError
        If the manifest names an unknown tool set or policy, or the seed
        store breaks the schema.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"Domain pack directory not found at {root}")
    manifest = _read_json(root / "manifest.json")
    schema = StoreSchema(_read_json(root / "schema.json"))
    seed = EntityStore(_read_json(root / "seed.json"))
    schema.validate(seed)

    toolset = manifest.get("tools", manifest["name"])
    if toolset not in TOOLSETS:
        raise ValueError(f"Unknown tool set '{toolset}' in {root / 'manifest.json'}")
    registry, checks, metadata_fn = TOOLSETS[toolset]

    policies = []
    for entry in manifest.get("policies", []):
        check = checks.get(entry["id"])
        if check is None:
            raise ValueError(f"Policy '{entry['id']}' has no registered check")
        policies.append(PolicyRule(id=entry["id"], description=entry["description"], check=check))

    def _pairs(key: str) -> List[Tuple[str, str]]:
        pairs = [(a, b) for a, b in manifest.get(key, [])]
        for a, b in pairs:
            for name in (a, b):
                if name not in registry.specs:
                    raise ValueError(f"{key} references unknown tool '{name}'")
        return pairs

    sampling = _sampling_spec(manifest.get("sampling"), schema, root / "manifest.json")

    examples_path = root / "examples.json"
    examples = _read_json(examples_path) if examples_path.exists() else []
    pack = DomainPack(
        name=manifest["name"],
        path=root,
        schema=schema,
        seed=seed,
        registry=registry,
        policies=policies,
        domain_rules=list(manifest.get("domain_rules", [])),
        forbidden_pairs=_pairs("forbidden_pairs"),
        declared_edges=_pairs("declared_edges"),
        sampling=sampling,
        max_rounds=int(manifest.get("max_rounds", 3)),
        examples=examples,
        metadata_fn=metadata_fn,
    )
    logger.info(
        "Loaded domain pack '%s': %s read / %s write tools, %s policies",
        pack.name,
        len(registry.names("read")),
        len(registry.names("write")),
        len(policies),
    )
    return pack
