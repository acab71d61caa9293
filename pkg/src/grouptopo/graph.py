"""Core graph types: candidate groups, group-level graphs, agent graphs.

A group-level graph is an ordered sequence of selected groups plus directed
edges (i, t) with i < t; it is materialized into an executable agent graph
either as one composite agent per group or as one agent per member role.

Serialization uses line-delimited JSON records. Every record carries a
schema version field ``"v": "v1"`` and a ``kind`` discriminator; edges are
encoded as ``"i->t"`` strings.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import ValidationError

RECORD_VERSION = "v1"

DEFAULT_SUMMARIZER_PROMPT = (
    "You are the final summarizer. Read the upstream replies, reconcile any "
    "disagreements, and state the final answer clearly on the last line."
)


class IntraPattern(str, Enum):
    """Wiring pattern for the roles inside a single group."""

    SINGLE = "single"
    CHAIN = "chain"
    STAR = "star"
    FULL = "full"


@dataclass(frozen=True)
class RoleSpec:
    """One member role: a display name and its system prompt."""

    name: str
    prompt: str


@dataclass(frozen=True)
class CandidateGroup:
    name: str
    description: str
    roles: tuple[RoleSpec, ...]
    pattern: IntraPattern

    def __post_init__(self) -> None:
        if not self.roles:
            raise ValidationError(f"group '{self.name}' has no roles")
        object.__setattr__(self, "pattern", IntraPattern(self.pattern))

    def text(self) -> str:
        """Canonical text used to embed this group as a selection candidate."""
        roles = ", ".join(r.name for r in self.roles)
        return f"{self.name} | {self.description} | {roles} | {self.pattern.value}"

    def intra_edges(self) -> tuple[tuple[int, int], ...]:
        """Directed edges among member roles, as local index pairs."""
        n = len(self.roles)
        if n == 1 or self.pattern is IntraPattern.SINGLE:
            return ()
        if self.pattern is IntraPattern.CHAIN:
            return tuple((k, k + 1) for k in range(n - 1))
        if self.pattern is IntraPattern.STAR:
            return tuple((k, n - 1) for k in range(n - 1))
        return tuple((j, k) for j in range(n) for k in range(j + 1, n))

    def sources(self) -> tuple[int, ...]:
        """Local indices of roles with no intra-group predecessor."""
        targets = {t for _, t in self.intra_edges()}
        return tuple(k for k in range(len(self.roles)) if k not in targets)

    def sinks(self) -> tuple[int, ...]:
        """Local indices of roles with no intra-group successor."""
        origins = {i for i, _ in self.intra_edges()}
        return tuple(k for k in range(len(self.roles)) if k not in origins)


@dataclass(frozen=True)
class GroupPool:
    """The fixed candidate set; index K (== size) is reserved for STOP."""

    groups: tuple[CandidateGroup, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.groups:
            raise ValidationError("group pool is empty")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValidationError("group pool contains duplicate names")

    @property
    def size(self) -> int:
        return len(self.groups)

    @property
    def end_index(self) -> int:
        """Index of the STOP pseudo-candidate in the scoring matrix."""
        return len(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, idx: int) -> CandidateGroup:
        return self.groups[idx]


@dataclass(frozen=True)
class GroupGraph:
    """Ordered group selections plus inter-step edges (i, t) with i < t.

    Repeated selections are legal; each occurrence is a distinct step.
    ``truncated`` marks graphs cut off at the step budget rather than
    terminated by a STOP decision.
    """

    selected: tuple[int, ...] = ()
    edges: tuple[tuple[int, int], ...] = ()
    truncated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "selected", tuple(int(s) for s in self.selected))
        canon = sorted((int(i), int(t)) for i, t in self.edges)
        object.__setattr__(self, "edges", tuple(canon))

    @property
    def n_steps(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class Trajectory:
    """A query paired with a target group graph, for teacher forcing."""

    query: str
    graph: GroupGraph


def validate_group_graph(graph: GroupGraph, pool_size: int, max_steps: int) -> None:
    """Check executability invariants; raise ValidationError on the first hit.

    Invariants: at most ``max_steps`` steps, selections within the pool,
    edges strictly forward (i < t) into existing steps with no duplicates,
    and every step after the first has at least one incoming edge.
    """
    n = graph.n_steps
    if n > max_steps:
        raise ValidationError(f"graph has {n} steps, budget is {max_steps}")
    for t, gid in enumerate(graph.selected):
        if not 0 <= gid < pool_size:
            raise ValidationError(
                f"step {t} selects group {gid}, pool has {pool_size} groups"
            )
    seen: set[tuple[int, int]] = set()
    incoming = [0] * n
    for i, t in graph.edges:
        if not 0 <= i < t < n:
            raise ValidationError(f"edge {i}->{t} is out of range for {n} steps")
        if (i, t) in seen:
            raise ValidationError(f"duplicate edge {i}->{t}")
        seen.add((i, t))
        incoming[t] += 1
    for t in range(1, n):
        if incoming[t] == 0:
            raise ValidationError(f"step {t} has no incoming edge")


# ---------------------------------------------------------------------------
# Agent-level graphs.


@dataclass(frozen=True)
class AgentNode:
    name: str
    prompt: str
    step: int | None
    role: str


@dataclass(frozen=True)
class AgentGraph:
    """Executable DAG of agents; ``summarizer`` indexes the terminal node."""

    nodes: tuple[AgentNode, ...]
    edges: tuple[tuple[int, int], ...]
    summarizer: int | None = None

    def predecessors(self, idx: int) -> tuple[int, ...]:
        return tuple(i for i, t in self.edges if t == idx)

    def successors(self, idx: int) -> tuple[int, ...]:
        return tuple(t for i, t in self.edges if i == idx)


def topological_schedule(agent_graph: AgentGraph) -> tuple[int, ...]:
    """Deterministic topological order (Kahn; ties broken by node index)."""
    n = len(agent_graph.nodes)
    indegree = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, t in agent_graph.edges:
        if not (0 <= i < n and 0 <= t < n):
            raise ValidationError(f"agent edge {i}->{t} is out of range")
        indegree[t] += 1
        succ[i].append(t)
    ready = sorted(i for i in range(n) if indegree[i] == 0)
    order: list[int] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for t in succ[node]:
            indegree[t] -= 1
            if indegree[t] == 0:
                ready.append(t)
                changed = True
        if changed:
            ready.sort()
    if len(order) != n:
        raise ValidationError("agent graph contains a cycle")
    return tuple(order)


_PATTERN_NOTES = {
    IntraPattern.SINGLE: "A single member handles the task end to end.",
    IntraPattern.CHAIN: (
        "Members work in sequence; each builds on the previous member's output."
    ),
    IntraPattern.STAR: (
        "Supporting members work the task independently, then the final member "
        "integrates their contributions."
    ),
    IntraPattern.FULL: (
        "Every member reviews all earlier members' contributions before the "
        "final member concludes."
    ),
}


def compose_group_prompt(group: CandidateGroup) -> str:
    """One system prompt covering a whole group, for composite execution."""
    lines = [
        f"You are a team acting as one unit: {group.description}",
        "Team members:",
    ]
    for k, role in enumerate(group.roles, start=1):
        lines.append(f"{k}. {role.name}: {role.prompt}")
    lines.append(f"Internal workflow: {_PATTERN_NOTES[group.pattern]}")
    lines.append(
        "Carry out the full workflow yourself and reply once for the whole "
        "team, ending with the team's final answer."
    )
    return "\n".join(lines)


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")


def materialize_agent_graph(
    graph: GroupGraph,
    pool: GroupPool,
    mode: str = "composite",
    *,
    summarizer_prompt: str | None = None,
    summarizer_sees_all: bool = False,
) -> AgentGraph:
    """Expand a group graph into an executable agent graph.

    ``mode="composite"`` creates one agent per selected group with a composed
    system prompt; ``mode="expanded"`` creates one agent per member role and
    wires the group's internal pattern explicitly. Either way a summarizer
    node is appended, fed by the sink agents (or every agent when
    ``summarizer_sees_all`` is set).

    Raises:
        ValidationError: if the graph is empty, fails validation, or ``mode``
            is unknown.
    """
    if mode not in ("composite", "expanded"):
        raise ValidationError(f"unknown execution mode '{mode}'")
    validate_group_graph(graph, pool.size, max_steps=max(graph.n_steps, 1))
    if graph.n_steps == 0:
        raise ValidationError("cannot materialize an empty graph")

    nodes: list[AgentNode] = []
    edges: list[tuple[int, int]] = []

    if mode == "composite":
        for t, gid in enumerate(graph.selected):
            group = pool[gid]
            nodes.append(
                AgentNode(
                    name=f"s{t}-{_slug(group.name)}",
                    prompt=compose_group_prompt(group),
                    step=t,
                    role=group.name,
                )
            )
        edges.extend(graph.edges)
    else:
        step_locals: list[list[int]] = []
        for t, gid in enumerate(graph.selected):
            group = pool[gid]
            base = len(nodes)
            local = []
            for k, role in enumerate(group.roles):
                nodes.append(
                    AgentNode(
                        name=f"s{t}-{_slug(group.name)}-{_slug(role.name)}",
                        prompt=role.prompt,
                        step=t,
                        role=role.name,
                    )
                )
                local.append(base + k)
            for j, k in group.intra_edges():
                edges.append((local[j], local[k]))
            step_locals.append(local)
        for i, t in graph.edges:
            src_group = pool[graph.selected[i]]
            dst_group = pool[graph.selected[t]]
            for j in src_group.sinks():
                for k in dst_group.sources():
                    edges.append((step_locals[i][j], step_locals[t][k]))

    summarizer_idx = len(nodes)
    nodes.append(
        AgentNode(
            name="summarizer",
            prompt=summarizer_prompt or DEFAULT_SUMMARIZER_PROMPT,
            step=None,
            role="summarizer",
        )
    )
    if summarizer_sees_all:
        feeders = list(range(summarizer_idx))
    else:
        with_out = {i for i, _ in edges}
        feeders = [i for i in range(summarizer_idx) if i not in with_out]
    edges.extend((i, summarizer_idx) for i in feeders)

    agent_graph = AgentGraph(
        nodes=tuple(nodes), edges=tuple(edges), summarizer=summarizer_idx
    )
    topological_schedule(agent_graph)  # rejects cycles early
    return agent_graph


def render_diagram(graph: GroupGraph, pool: GroupPool) -> str:
    """Static text description of a group graph (nodes, then edges)."""
    validate_group_graph(graph, pool.size, max_steps=max(graph.n_steps, 1))
    lines = []
    for t, gid in enumerate(graph.selected):
        group = pool[gid]
        lines.append(f"step {t}: {group.name} [{group.pattern.value}]")
    if graph.edges:
        lines.append("edges: " + ", ".join(f"{i}->{t}" for i, t in graph.edges))
    else:
        lines.append("edges: none")
    if graph.truncated:
        lines.append("(truncated at step budget)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Record codecs (line-delimited JSON, schema version "v1").


def format_edge(edge: tuple[int, int]) -> str:
    return f"{edge[0]}->{edge[1]}"


def parse_edge(text: str) -> tuple[int, int]:
    """Parse an ``"i->t"`` edge string; rejects i >= t."""
    match = re.fullmatch(r"\s*(\d+)\s*->\s*(\d+)\s*", str(text))
    if not match:
        raise ValidationError(f"malformed edge '{text}', expected 'i->t'")
    i, t = int(match.group(1)), int(match.group(2))
    if i >= t:
        raise ValidationError(f"edge '{text}' must point forward (i < t)")
    return i, t


def _require(record: dict, key: str, kind: str):
    if key not in record:
        raise ValidationError(f"{kind} record is missing '{key}'")
    return record[key]


def _check_header(record: dict, kind: str | None = None) -> str:
    if not isinstance(record, dict):
        raise ValidationError("record is not an object")
    version = record.get("v")
    if version is None:
        raise ValidationError("record is missing schema version 'v'")
    if version != RECORD_VERSION:
        raise ValidationError(f"unsupported schema version '{version}'")
    actual = record.get("kind")
    if actual is None:
        raise ValidationError("record is missing 'kind'")
    if kind is not None and actual != kind:
        raise ValidationError(f"expected kind '{kind}', found '{actual}'")
    return str(actual)


def group_graph_to_record(graph: GroupGraph) -> dict:
    return {
        "v": RECORD_VERSION,
        "kind": "group_graph",
        "selected": list(graph.selected),
        "edges": [format_edge(e) for e in graph.edges],
        "truncated": bool(graph.truncated),
    }


def group_graph_from_record(record: dict) -> GroupGraph:
    _check_header(record, "group_graph")
    selected = _require(record, "selected", "group_graph")
    if not isinstance(selected, list) or any(
        isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in selected
    ):
        raise ValidationError("'selected' must be a list of non-negative integers")
    edges_raw = _require(record, "edges", "group_graph")
    if not isinstance(edges_raw, list):
        raise ValidationError("'edges' must be a list of 'i->t' strings")
    edges = tuple(parse_edge(e) for e in edges_raw)
    n = len(selected)
    for i, t in edges:
        if t >= n:
            raise ValidationError(f"edge {i}->{t} exceeds the {n} recorded steps")
    return GroupGraph(
        selected=tuple(selected),
        edges=edges,
        truncated=bool(record.get("truncated", False)),
    )


def group_to_record(group: CandidateGroup) -> dict:
    return {
        "v": RECORD_VERSION,
        "kind": "group",
        "name": group.name,
        "description": group.description,
        "pattern": group.pattern.value,
        "roles": [{"name": r.name, "prompt": r.prompt} for r in group.roles],
    }


def group_from_record(record: dict) -> CandidateGroup:
    _check_header(record, "group")
    roles_raw = _require(record, "roles", "group")
    if not isinstance(roles_raw, list) or not roles_raw:
        raise ValidationError("'roles' must be a non-empty list")
    roles = []
    for r in roles_raw:
        if not isinstance(r, dict) or "name" not in r or "prompt" not in r:
            raise ValidationError("each role needs 'name' and 'prompt'")
        roles.append(RoleSpec(name=str(r["name"]), prompt=str(r["prompt"])))
    try:
        pattern = IntraPattern(str(_require(record, "pattern", "group")))
    except ValueError as exc:
        raise ValidationError(f"unknown intra pattern '{record['pattern']}'") from exc
    return CandidateGroup(
        name=str(_require(record, "name", "group")),
        description=str(record.get("description", "")),
        roles=tuple(roles),
        pattern=pattern,
    )


def pool_to_records(pool: GroupPool) -> list[dict]:
    return [group_to_record(g) for g in pool]


def pool_from_records(records: Sequence[dict]) -> GroupPool:
    groups = tuple(group_from_record(r) for r in records)
    return GroupPool(groups=groups)


def trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "v": RECORD_VERSION,
        "kind": "trajectory",
        "query": traj.query,
        "graph": group_graph_to_record(traj.graph),
    }


def trajectory_from_record(record: dict) -> Trajectory:
    _check_header(record, "trajectory")
    query = _require(record, "query", "trajectory")
    graph = group_graph_from_record(_require(record, "graph", "trajectory"))
    return Trajectory(query=str(query), graph=graph)


def read_records(path: str | os.PathLike) -> list[dict]:
    """Read line-delimited JSON records, checking the schema version.

    Raises:
        ValidationError: on unreadable files, malformed JSON, or version
            mismatches; the message carries the 1-based line number.
    """
    if not os.path.exists(path):
        raise ValidationError(f"record file not found: {os.fspath(path)}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            try:
                _check_header(record)
            except ValidationError as exc:
                raise ValidationError(str(exc), line=lineno) from exc
            records.append(record)
    return records


def write_records(path: str | os.PathLike, records: Iterable[dict]) -> None:
    """Write records as one JSON object per line (atomic replace)."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)
