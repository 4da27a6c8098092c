"""Assemble the task-generation context from the persona, API, policy,
domain-data and example samplers."""
from __future__ import annotations

import json
import logging
import random
from pathlib import Path
from typing import Any, Dict, List, Tuple

import networkx as nx
from pydantic import BaseModel, Field, field_validator, model_validator

from config import settings

from .api_graph import WalkConfig, random_walk
from .domain_pack import DomainPack
from .prompts import render, section

logger = logging.getLogger(__name__)

Range = Tuple[int, int]


class Persona(BaseModel):
    id: str
    description: str

    @field_validator("description")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("persona description is empty")
        return value


class SamplerKnobs(BaseModel):
    """Inclusive [min, max] ranges each sampler draws its count from."""

    policies: Range = (1, 3)
    domain_samples: Range = (2, 5)
    examples: Range = (1, 2)
    write_apis: Range = (1, 3)
    restart_probability: float = Field(default=0.15, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> "SamplerKnobs":
        for name in ("policies", "domain_samples", "examples", "write_apis"):
            low, high = getattr(self, name)
            if low < 0 or low > high:
                raise ValueError(f"invalid range for {name}: [{low}, {high}]")
        if self.write_apis[0] < 1:
            raise ValueError("write_apis range must start at 1 or more")
        return self


class DomainSample(BaseModel):
    collection: str
    id: str
    document: Dict[str, Any]
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def render(self) -> str:
        return json.dumps(
            {"id": self.id, "document": self.document, "metadata": self.metadata},
            sort_keys=True,
        )


class GenerationContext(BaseModel):
    domain: str
    write_apis: List[str]
    read_apis_available: List[str]
    policy_excerpts: List[str]
    domain_samples: List[DomainSample]
    user_samples: List[DomainSample] = Field(default_factory=list)
    persona: Persona
    examples: List[str]
    seed: int

    @field_validator("write_apis")
    @classmethod
    def _has_writes(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("write_apis is empty")
        return value

    def manifest(self) -> str:
        """Deterministic serialization recorded in blueprint provenance."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)


def load_personas(path: Path | None = None) -> List[Persona]:
    path = Path(path or settings.DATA_DIR / "personas.json")
    with open(path, encoding="utf-8") as fh:
        return [Persona.model_validate(p) for p in json.load(fh)]


def _draw(rng: random.Random, bounds: Range, pool: int) -> int:
    return min(rng.randint(bounds[0], bounds[1]), pool)


def _sample(pack: DomainPack, collection: str, doc_id: str, document: Dict[str, Any]) -> DomainSample:
    return DomainSample(
        collection=collection,
        id=doc_id,
        document=document,
        metadata=pack.metadata_fn(collection, document),
    )


def sample_context(
    pack: DomainPack,
    graph: nx.DiGraph,
    seed: int,
    personas: List[Persona],
    knobs: SamplerKnobs | None = None,
    examples: List[str] | None = None,
) -> GenerationContext:
    """Draw one generation context; a pure function of its inputs."""
    knobs = knobs or SamplerKnobs()
    examples = pack.examples if examples is None else examples
    if not personas:
        raise ValueError("persona pool is empty")
    if not examples:
        raise ValueError("example pool is empty")
    rng = random.Random(seed)

    walk = WalkConfig(
        length=rng.randint(*knobs.write_apis),
        seed=rng.randrange(2**32),
        restart_probability=knobs.restart_probability,
    )
    write_apis = random_walk(graph, walk)
    read_apis = pack.registry.names("read")

    policy_pool = pack.policy_prose() + pack.domain_rules
    policies = rng.sample(policy_pool, _draw(rng, knobs.policies, len(policy_pool)))

    sampling = pack.sampling
    pool = pack.seed.collections.get(sampling.collection, {})
    if not pool:
        logger.warning("Domain pack '%s' has no '%s' documents to sample", pack.name, sampling.collection)
    doc_ids = rng.sample(sorted(pool), _draw(rng, knobs.domain_samples, len(pool)))
    samples = [_sample(pack, sampling.collection, did, pool[did]) for did in doc_ids]

    users: List[DomainSample] = []
    if sampling.owner_field is not None:
        owner_pool = pack.seed.collections.get(sampling.owner_collection, {})
        owners = sorted({s.document[sampling.owner_field] for s in samples if sampling.owner_field in s.document})
        for oid in owners:
            if oid not in owner_pool:
                raise ValueError(f"{sampling.collection} references unknown {sampling.owner_collection} '{oid}'")
            users.append(_sample(pack, sampling.owner_collection, oid, owner_pool[oid]))

    persona = personas[rng.randrange(len(personas))]
    shots = rng.sample(examples, _draw(rng, knobs.examples, len(examples)))

    return GenerationContext(
        domain=pack.name,
        write_apis=write_apis,
        read_apis_available=read_apis,
        policy_excerpts=policies,
        domain_samples=samples,
        user_samples=users,
        persona=persona,
        examples=shots,
        seed=seed,
    )


def render_prompt(ctx: GenerationContext, template: str, pack: DomainPack) -> str:
    """Fill the generation template from ``ctx``.

    Every tool named in the context appears in the tools section; empty
    samples render as the explicit none marker.
    """
    tool_names = list(dict.fromkeys(ctx.write_apis + ctx.read_apis_available))
    tools = "\n\n".join(spec.to_python() for spec in pack.specs(tool_names))
    return render(
        template,
        domain=ctx.domain,
        persona=ctx.persona.description,
        guidelines=section(ctx.policy_excerpts),
        user_data=section((s.render() for s in ctx.user_samples), bullet=""),
        order_data=section((s.render() for s in ctx.domain_samples), bullet=""),
        write_apis=", ".join(dict.fromkeys(ctx.write_apis)),
        tools=tools,
        examples=section(ctx.examples, bullet=""),
    )
