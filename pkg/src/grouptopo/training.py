"""Training pipeline: topology exploration, label curation, optimization.

Supervision is built by running a few structured topology families per query
against a backend, keeping the cheapest successful graph per query, and then
teacher-forcing the generator on those trajectories. The bottleneck KL terms
ramp in linearly over the first warm-up epochs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as model_mod
from . import nn
from .embedding import CandidateMatrix, EmbeddingProvider, build_candidate_matrix
from .errors import ValidationError
from .graph import (
    RECORD_VERSION,
    GroupGraph,
    GroupPool,
    Trajectory,
    group_graph_from_record,
    group_graph_to_record,
    materialize_agent_graph,
    validate_group_graph,
)
from .harness import AgentBackend, EvalExample, answer_matches, run_graph
from .model import ModelConfig
from .nn import OptimizerState, Params, make_rng

# Teacher-forced objective for one trajectory, with exact manual gradients.
teacher_forced_loss = model_mod.loss_and_grads

TOPOLOGY_FAMILIES = ("chain", "star", "full")


def kl_warmup(epoch: int, warmup_epochs: int, target: float) -> float:
    """Linear KL weight ramp: 0 at epoch 0, ``target`` from ``warmup_epochs`` on."""
    if epoch < 0:
        raise ValidationError(f"epoch must be non-negative, got {epoch}")
    if warmup_epochs <= 0:
        return float(target)
    return float(target) * min(1.0, epoch / warmup_epochs)


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 40
    lr: float = 1e-4
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be non-negative")
        if self.lr <= 0.0:
            raise ValidationError("lr must be positive")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    group_nll: float
    edge_bce: float
    kl_group: float
    kl_edge: float
    beta_group: float
    beta_edge: float
    grad_norm: float


@dataclass
class TrainResult:
    params: Params
    opt_state: OptimizerState
    history: list[EpochLog] = field(default_factory=list)
    candidates: CandidateMatrix | None = None


def train(
    pool: GroupPool,
    provider: EmbeddingProvider,
    dataset: Sequence[Trajectory],
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    params: Params | None = None,
    opt_state: OptimizerState | None = None,
    callback: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Teacher-force the generator on labeled trajectories.

    Fully deterministic for a fixed seed: shuffling and latent noise come
    from one counter-based stream, so two runs with identical inputs produce
    bit-identical loss histories.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if model_config.pool_size != pool.size:
        raise ValidationError(
            f"model expects pool of {model_config.pool_size}, got {pool.size}"
        )
    for traj in dataset:
        validate_group_graph(traj.graph, pool.size, model_config.max_steps)

    candidates = build_candidate_matrix(provider, pool)
    task_vecs = provider.encode([traj.query for traj in dataset])
    if params is None:
        params = model_mod.init_params(model_config)
    if opt_state is None:
        opt_state = OptimizerState.for_params(params)

    rng = make_rng(train_config.seed)
    n = len(dataset)
    history: list[EpochLog] = []

    for epoch in range(train_config.epochs):
        beta_g = kl_warmup(epoch, train_config.warmup_epochs, model_config.beta_group)
        beta_e = kl_warmup(epoch, train_config.warmup_epochs, model_config.beta_edge)
        order = rng.permutation(n)
        sums = {"loss": 0.0, "nll": 0.0, "bce": 0.0, "klg": 0.0, "kle": 0.0}
        last_norm = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            grads_sum: dict[str, np.ndarray] = {}
            for idx in batch:
                traj = dataset[int(idx)]
                breakdown, grads = model_mod.loss_and_grads(
                    params,
                    model_config,
                    candidates,
                    task_vecs[int(idx)],
                    traj.graph,
                    beta_group=beta_g,
                    beta_edge=beta_e,
                    rng=rng,
                )
                for name, g in grads.items():
                    nn.accumulate(grads_sum, name, g)
                sums["loss"] += breakdown.total
                sums["nll"] += breakdown.group_nll
                sums["bce"] += breakdown.edge_bce
                sums["klg"] += breakdown.kl_group
                sums["kle"] += breakdown.kl_edge
            scale = 1.0 / len(batch)
            for name in grads_sum:
                grads_sum[name] *= scale
            last_norm = nn.adamw_step(
                params,
                grads_sum,
                opt_state,
                lr=train_config.lr,
                weight_decay=train_config.weight_decay,
                clip_norm=train_config.clip_norm,
            )
        log = EpochLog(
            epoch=epoch,
            loss=sums["loss"] / n,
            group_nll=sums["nll"] / n,
            edge_bce=sums["bce"] / n,
            kl_group=sums["klg"] / n,
            kl_edge=sums["kle"] / n,
            beta_group=beta_g,
            beta_edge=beta_e,
            grad_norm=last_norm,
        )
        history.append(log)
        if callback is not None:
            callback(log)

    return TrainResult(
        params=params, opt_state=opt_state, history=history, candidates=candidates
    )


# ---------------------------------------------------------------------------
# Exploration over structured topology families.


@dataclass
class ExplorationConfig:
    families: tuple[str, ...] = TOPOLOGY_FAMILIES
    n_steps: int = 3
    samples_per_family: int = 1
    rounds: int = 1
    mode: str = "composite"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.families:
            raise ValidationError("families must not be empty")
        for fam in self.families:
            if fam not in TOPOLOGY_FAMILIES:
                raise ValidationError(f"unknown topology family '{fam}'")
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")
        if self.samples_per_family < 1:
            raise ValidationError("samples_per_family must be >= 1")


def family_edges(family: str, n_steps: int) -> tuple[tuple[int, int], ...]:
    """Edge template for one structured family over ``n_steps`` steps."""
    if family == "chain":
        return tuple((i, i + 1) for i in range(n_steps - 1))
    if family == "star":
        return tuple((0, t) for t in range(1, n_steps))
    if family == "full":
        return tuple((i, t) for i in range(n_steps) for t in range(i + 1, n_steps))
    raise ValidationError(f"unknown topology family '{family}'")


def sample_candidate_topology(
    rng: np.random.Generator, pool_size: int, family: str, n_steps: int
) -> GroupGraph:
    """Uniformly choose groups (with repeats) into a family edge template."""
    if pool_size < 1:
        raise ValidationError("pool_size must be >= 1")
    selected = tuple(int(g) for g in rng.integers(0, pool_size, size=n_steps))
    return GroupGraph(selected=selected, edges=family_edges(family, n_steps))


@dataclass(frozen=True)
class ExplorationResult:
    query: str
    answer: str
    graph: GroupGraph
    family: str
    correct: bool
    final_text: str
    prompt_tokens: int
    completion_tokens: int


def exploration_result_to_record(result: ExplorationResult) -> dict:
    return {
        "v": RECORD_VERSION,
        "kind": "exploration",
        "query": result.query,
        "answer": result.answer,
        "graph": group_graph_to_record(result.graph),
        "family": result.family,
        "correct": bool(result.correct),
        "final_text": result.final_text,
        "prompt_tokens": int(result.prompt_tokens),
        "completion_tokens": int(result.completion_tokens),
    }


def exploration_result_from_record(record: dict) -> ExplorationResult:
    if record.get("kind") != "exploration":
        raise ValidationError(
            f"expected kind 'exploration', found '{record.get('kind')}'"
        )
    for key in ("query", "graph", "correct"):
        if key not in record:
            raise ValidationError(f"exploration record is missing '{key}'")
    return ExplorationResult(
        query=str(record["query"]),
        answer=str(record.get("answer", "")),
        graph=group_graph_from_record(record["graph"]),
        family=str(record.get("family", "")),
        correct=bool(record["correct"]),
        final_text=str(record.get("final_text", "")),
        prompt_tokens=int(record.get("prompt_tokens", 0)),
        completion_tokens=int(record.get("completion_tokens", 0)),
    )


def explore_and_label(
    pool: GroupPool,
    dataset: Sequence[EvalExample],
    backend: AgentBackend,
    config: ExplorationConfig,
    *,
    max_workers: int | None = None,
) -> list[ExplorationResult]:
    """Run every (query, family, sample) combination and mark correctness.

    Sampling happens up front from one seeded stream, so results are
    reproducible and independent of worker scheduling; execution order is
    dataset-major, family-minor.
    """
    rng = make_rng(config.seed)
    tasks: list[tuple[EvalExample, str, GroupGraph]] = []
    for example in dataset:
        for family in config.families:
            for _ in range(config.samples_per_family):
                graph = sample_candidate_topology(
                    rng, pool.size, family, config.n_steps
                )
                tasks.append((example, family, graph))

    def run_one(task: tuple[EvalExample, str, GroupGraph]) -> ExplorationResult:
        example, family, graph = task
        agent_graph = materialize_agent_graph(graph, pool, config.mode)
        transcript = run_graph(
            agent_graph, example.query, backend, rounds=config.rounds
        )
        correct = answer_matches(example.answer, transcript.final_text, example.match)
        return ExplorationResult(
            query=example.query,
            answer=example.answer,
            graph=graph,
            family=family,
            correct=correct,
            final_text=transcript.final_text,
            prompt_tokens=transcript.stats.prompt_tokens,
            completion_tokens=transcript.stats.completion_tokens,
        )

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool_exec:
            return list(pool_exec.map(run_one, tasks))
    return [run_one(t) for t in tasks]


def curate_minimal(
    results: Sequence[ExplorationResult],
) -> tuple[list[Trajectory], list[str]]:
    """Keep the cheapest correct graph per query.

    Cheapest means fewest steps, then fewest edges, then lexicographically
    smallest (selection tuple, edge list), which makes curation a pure
    function of the result set. Queries with no correct graph are excluded
    and reported back.
    """
    by_query: dict[str, list[ExplorationResult]] = {}
    order: list[str] = []
    for result in results:
        if result.query not in by_query:
            by_query[result.query] = []
            order.append(result.query)
        by_query[result.query].append(result)

    trajectories: list[Trajectory] = []
    excluded: list[str] = []
    for query in order:
        correct = [r for r in by_query[query] if r.correct]
        if not correct:
            excluded.append(query)
            continue
        best = min(
            correct,
            key=lambda r: (
                r.graph.n_steps,
                len(r.graph.edges),
                r.graph.selected,
                r.graph.edges,
            ),
        )
        trajectories.append(Trajectory(query=query, graph=best.graph))
    return trajectories, excluded
