"""API dependency graph and random-walk sampling of write-tool sequences."""
from __future__ import annotations

import logging
import random
from typing import Iterable, List, NamedTuple, Tuple

import networkx as nx
from pydantic import BaseModel, Field

from .domain_env import ToolSpec

logger = logging.getLogger(__name__)


class WalkConfig(BaseModel):
    length: int = Field(default=1, ge=1)
    seed: int = 0
    restart_probability: float = Field(default=0.15, ge=0.0, le=1.0)


class WalkStep(NamedTuple):
    name: str
    restarted: bool


def build_graph(
    specs: Iterable[ToolSpec],
    forbidden_pairs: Iterable[Tuple[str, str]] = (),
    declared_edges: Iterable[Tuple[str, str]] = (),
) -> nx.DiGraph:
    """Connect A -> B when an output field of A names an input of B.

    Names match case-insensitively. Pairs listed as forbidden never get an
    edge, inferred or declared.
    """
    specs = list(specs)
    graph = nx.DiGraph()
    for spec in specs:
        if graph.has_node(spec.name):
            raise ValueError(f"duplicate tool name {spec.name}")
        graph.add_node(spec.name, kind=spec.kind)
    forbidden = {(a, b) for a, b in forbidden_pairs}

    for a in specs:
        produced = {field.lower() for field in a.outputs}
        for b in specs:
            if a.name == b.name or (a.name, b.name) in forbidden:
                continue
            if produced & {p.name.lower() for p in b.params}:
                graph.add_edge(a.name, b.name, reason="output-feeds-input")

    for a, b in declared_edges:
        for name in (a, b):
            if name not in graph:
                raise ValueError(f"declared edge references unknown tool '{name}'")
        if (a, b) not in forbidden:
            graph.add_edge(a, b, reason="declared")
    graph.graph["forbidden_pairs"] = sorted(forbidden)
    return nx.freeze(graph)


def write_nodes(graph: nx.DiGraph) -> List[str]:
    return sorted(n for n, kind in graph.nodes(data="kind") if kind == "write")


def _write_successors(graph: nx.DiGraph, node: str) -> List[str]:
    return sorted(s for s in graph.successors(node) if graph.nodes[s]["kind"] == "write")


def random_walk_steps(graph: nx.DiGraph, cfg: WalkConfig) -> List[WalkStep]:
    """Walk the write-only part of the graph, marking restart jumps."""
    writes = write_nodes(graph)
    if not writes:
        raise ValueError("graph has no write tools to walk")
    rng = random.Random(cfg.seed)
    starts = writes
    if cfg.length > 1:
        starts = [n for n in writes if _write_successors(graph, n)] or writes
    current = rng.choice(starts)
    steps = [WalkStep(current, False)]
    while len(steps) < cfg.length:
        successors = _write_successors(graph, current)
        if not successors or rng.random() < cfg.restart_probability:
            current = rng.choice(writes)
            steps.append(WalkStep(current, True))
        else:
            current = rng.choice(successors)
            steps.append(WalkStep(current, False))
    return steps


def random_walk(graph: nx.DiGraph, cfg: WalkConfig) -> List[str]:
    return [step.name for step in random_walk_steps(graph, cfg)]


def to_dot(graph: nx.DiGraph) -> str:
    lines = ["digraph api {"]
    for node, kind in sorted(graph.nodes(data="kind")):
        shape = "box" if kind == "write" else "ellipse"
        lines.append(f'  "{node}" [shape={shape}];')
    for a, b, reason in sorted(graph.edges(data="reason")):
        style = "dashed" if reason == "declared" else "solid"
        lines.append(f'  "{a}" -> "{b}" [style={style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
