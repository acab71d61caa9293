"""Autoregressive group-topology generator with a conditional latent bottleneck.

The model factorizes a graph's probability into per-step group selections and
per-pair edge decisions. Each step fuses a recurrent history summary with the
projected task vector through a scalar gate, refines the fused state, and
passes it through a stochastic bottleneck whose prior is conditioned on the
task. Selection scores come from similarity against the candidate matrix; a
learnable STOP row terminates generation.

All gradients are derived by hand; :func:`loss_and_grads` returns the exact
gradient of the teacher-forced objective for a fixed noise draw, which the
test suite verifies coordinate-by-coordinate against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import nn
from .embedding import CandidateMatrix
from .errors import ValidationError
from .graph import GroupGraph
from .nn import Grads, Params, accumulate, make_rng

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0
LOG_FLOOR = 1e-12

ModelParams = Params


@dataclass
class ModelConfig:
    """Shapes and objective weights; serialized into every checkpoint."""

    pool_size: int
    dim: int = 384
    hidden: int = 256
    max_steps: int = 8
    beta_group: float = 0.0
    beta_edge: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ValidationError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.dim < 1 or self.hidden < 1:
            raise ValidationError("dim and hidden must be positive")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.beta_group < 0.0 or self.beta_edge < 0.0:
            raise ValidationError("bottleneck weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "dim": self.dim,
            "hidden": self.hidden,
            "max_steps": self.max_steps,
            "beta_group": self.beta_group,
            "beta_edge": self.beta_edge,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        try:
            return cls(**{k: data[k] for k in cls.__dataclass_fields__})
        except KeyError as exc:
            raise ValidationError(f"model config is missing {exc}") from exc


def init_params(config: ModelConfig) -> Params:
    """Fresh parameters, seeded from ``config.seed``.

    Weight matrices are drawn at scale 1/sqrt(fan_in); biases start at zero.
    """
    rng = make_rng(config.seed)
    d, h = config.dim, config.hidden
    p: Params = {}
    p["task_ffn.l1.w"] = nn.init_matrix(rng, h, d)
    p["task_ffn.l1.b"] = np.zeros(h)
    p["task_ffn.l2.w"] = nn.init_matrix(rng, d, h)
    p["task_ffn.l2.b"] = np.zeros(d)
    for prefix in ("his_gru", "grp_gru", "edge_gru"):
        for key, value in nn.init_gru(rng, d).items():
            p[f"{prefix}.{key}"] = value
    p["edge_mlp.l1.w"] = nn.init_matrix(rng, h, 3 * d)
    p["edge_mlp.l1.b"] = np.zeros(h)
    p["edge_mlp.l2.w"] = nn.init_matrix(rng, d, h)
    p["edge_mlp.l2.b"] = np.zeros(d)
    p["step_embed"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.max_steps, d))
    for prefix in ("enc_g", "prior_g", "enc_e", "prior_e"):
        p[f"{prefix}.mu.w"] = nn.init_matrix(rng, d, d)
        p[f"{prefix}.mu.b"] = np.zeros(d)
        p[f"{prefix}.ls.w"] = nn.init_matrix(rng, d, d)
        p[f"{prefix}.ls.b"] = np.zeros(d)
    p["edge_head.l1.w"] = nn.init_matrix(rng, h, d)
    p["edge_head.l1.b"] = np.zeros(h)
    p["edge_head.l2.w"] = nn.init_matrix(rng, 1, h)
    p["edge_head.l2.b"] = np.zeros(1)
    p["end_embed"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=d)
    return p


# ---------------------------------------------------------------------------
# Diagonal Gaussians.


@dataclass(frozen=True)
class GaussianDiag:
    """Mean and log standard deviation, one scalar pair per coordinate."""

    mu: np.ndarray
    log_sigma: np.ndarray

    @classmethod
    def standard(cls, dim: int) -> "GaussianDiag":
        return cls(mu=np.zeros(dim), log_sigma=np.zeros(dim))


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> float:
    """KL(q || p) between diagonal Gaussians, in nats."""
    lq, lp = q.log_sigma, p.log_sigma
    diff = q.mu - p.mu
    terms = lp - lq + 0.5 * (np.exp(2.0 * lq) + diff * diff) * np.exp(-2.0 * lp) - 0.5
    return float(np.sum(terms))


def _kl_diag_backward(
    q: GaussianDiag, p: GaussianDiag, weight: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``weight * KL(q || p)`` wrt (mu_q, ls_q, mu_p, ls_p)."""
    lq, lp = q.log_sigma, p.log_sigma
    diff = q.mu - p.mu
    inv_var_p = np.exp(-2.0 * lp)
    d_mu_q = weight * diff * inv_var_p
    d_ls_q = weight * (np.exp(2.0 * lq - 2.0 * lp) - 1.0)
    d_ls_p = weight * (1.0 - (np.exp(2.0 * lq) + diff * diff) * inv_var_p)
    return d_mu_q, d_ls_q, -d_mu_q, d_ls_p


def reparameterize(dist: GaussianDiag, eps: np.ndarray) -> np.ndarray:
    """Pathwise sample ``mu + exp(log_sigma) * eps``; eps = 0 gives the mean."""
    return dist.mu + np.exp(dist.log_sigma) * eps


# ---------------------------------------------------------------------------
# Forward building blocks (each with a cache consumed by the backward pass).


@dataclass
class _BottleneckCache:
    x: np.ndarray
    ls_raw: np.ndarray


def _bottleneck(
    params: Params, prefix: str, x: np.ndarray
) -> tuple[GaussianDiag, _BottleneckCache]:
    mu = nn.affine(params, f"{prefix}.mu", x)
    ls_raw = nn.affine(params, f"{prefix}.ls", x)
    ls = np.clip(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return GaussianDiag(mu=mu, log_sigma=ls), _BottleneckCache(x=x, ls_raw=ls_raw)


def _bottleneck_backward(
    params: Params,
    prefix: str,
    cache: _BottleneckCache,
    d_mu: np.ndarray,
    d_ls: np.ndarray,
    grads: Grads,
) -> np.ndarray:
    # The clamp blocks gradient outside the open interval.
    inside = (cache.ls_raw > LOG_SIGMA_MIN) & (cache.ls_raw < LOG_SIGMA_MAX)
    d_ls_raw = np.where(inside, d_ls, 0.0)
    dx = nn.affine_backward(params, f"{prefix}.mu", cache.x, d_mu, grads)
    dx += nn.affine_backward(params, f"{prefix}.ls", cache.x, d_ls_raw, grads)
    return dx


def bottleneck_encode(
    params: Params, prefix: str, x: np.ndarray
) -> GaussianDiag:
    """Posterior over the latent code for a refined state ``x``."""
    dist, _ = _bottleneck(params, prefix, x)
    return dist


def conditional_prior(params: Params, prefix: str, z: np.ndarray) -> GaussianDiag:
    """Task-conditioned prior; all-zero weights give the standard normal."""
    dist, _ = _bottleneck(params, prefix, z)
    return dist


@dataclass
class _TaskCache:
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray


def project_task(params: Params, task_vec: np.ndarray) -> tuple[np.ndarray, _TaskCache]:
    """Two-layer projection of the raw sentence vector into model space."""
    x = np.asarray(task_vec, dtype=np.float64)
    a1 = nn.affine(params, "task_ffn.l1", x)
    h1 = nn.relu(a1)
    z = nn.affine(params, "task_ffn.l2", h1)
    return z, _TaskCache(x=x, a1=a1, h1=h1)


def _project_task_backward(
    params: Params, cache: _TaskCache, dz: np.ndarray, grads: Grads
) -> None:
    dh1 = nn.affine_backward(params, "task_ffn.l2", cache.h1, dz, grads)
    da1 = nn.relu_backward(cache.a1, dh1)
    nn.affine_backward(params, "task_ffn.l1", cache.x, da1, grads)


@dataclass(frozen=True)
class StepState:
    """Per-step fusion output: history summary, gate value, fused vector."""

    history: np.ndarray
    gate: float
    fused: np.ndarray


@dataclass
class _FuseCache:
    h_his: np.ndarray
    z: np.ndarray
    step: int
    gate: float
    scale: float


def fuse_step(
    params: Params, h_his: np.ndarray, z: np.ndarray, step: int
) -> tuple[StepState, _FuseCache]:
    """Gate the history summary against the task vector, add step embedding.

    The gate is sigmoid(<h_his, z> / sqrt(dim)), a scalar; the fused state is
    ``(1 - g) * h_his + g * z + step_embed[step]``.
    """
    table = params["step_embed"]
    if not 0 <= step < table.shape[0]:
        raise ValidationError(
            f"step {step} outside the embedding table ({table.shape[0]} rows)"
        )
    scale = 1.0 / math.sqrt(z.shape[0])
    raw = float(h_his @ z) * scale
    gate = float(nn.sigmoid(np.array([raw]))[0])
    fused = (1.0 - gate) * h_his + gate * z + table[step]
    state = StepState(history=h_his, gate=gate, fused=fused)
    return state, _FuseCache(h_his=h_his, z=z, step=step, gate=gate, scale=scale)


def _fuse_backward(
    cache: _FuseCache, d_fused: np.ndarray, grads: Grads, table: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (d_h_his, d_z); accumulates the step-embedding gradient."""
    if "step_embed" not in grads:
        grads["step_embed"] = np.zeros_like(table)
    grads["step_embed"][cache.step] += d_fused
    g = cache.gate
    d_gate = float(d_fused @ (cache.z - cache.h_his))
    d_h = (1.0 - g) * d_fused
    d_z = g * d_fused
    d_raw = d_gate * g * (1.0 - g)
    d_h = d_h + d_raw * cache.scale * cache.z
    d_z = d_z + d_raw * cache.scale * cache.h_his
    return d_h, d_z


def scoring_matrix(params: Params, candidates: CandidateMatrix) -> np.ndarray:
    """Candidate rows with the learnable STOP embedding swapped in."""
    if candidates.dim != params["end_embed"].shape[0]:
        raise ValidationError(
            f"candidate dim {candidates.dim} does not match model dim "
            f"{params['end_embed'].shape[0]}"
        )
    matrix = candidates.matrix.copy()
    matrix[candidates.end_index] = params["end_embed"]
    return matrix


# ---------------------------------------------------------------------------
# Group-selection and edge sites.


@dataclass
class _GroupSiteCache:
    gru: nn.GruCache
    enc: _BottleneckCache
    q: GaussianDiag
    eps: np.ndarray
    code: np.ndarray
    probs: np.ndarray


def _group_site(
    params: Params, matrix: np.ndarray, fused: np.ndarray, eps: np.ndarray
) -> tuple[np.ndarray, _GroupSiteCache]:
    zero = np.zeros_like(fused)
    x_g, gru_cache = nn.gru_step(params, "grp_gru", fused, zero)
    q, enc_cache = _bottleneck(params, "enc_g", x_g)
    code = reparameterize(q, eps)
    logits = matrix @ code
    probs = nn.softmax(logits)
    return probs, _GroupSiteCache(
        gru=gru_cache, enc=enc_cache, q=q, eps=eps, code=code, probs=probs
    )


def _group_site_backward(
    params: Params,
    cache: _GroupSiteCache,
    matrix: np.ndarray,
    end_index: int,
    d_logits: np.ndarray,
    kl_weight: float,
    prior: GaussianDiag,
    prior_acc: list[np.ndarray],
    grads: Grads,
) -> np.ndarray:
    """Backward for one selection site; returns the gradient wrt fused state."""
    d_code = matrix.T @ d_logits
    accumulate(grads, "end_embed", d_logits[end_index] * cache.code)
    d_mu = d_code.copy()
    d_ls = d_code * cache.eps * np.exp(cache.q.log_sigma)
    if kl_weight != 0.0:
        kq_mu, kq_ls, kp_mu, kp_ls = _kl_diag_backward(cache.q, prior, kl_weight)
        d_mu += kq_mu
        d_ls += kq_ls
        prior_acc[0] += kp_mu
        prior_acc[1] += kp_ls
    dx_g = _bottleneck_backward(params, "enc_g", cache.enc, d_mu, d_ls, grads)
    d_fused, _ = nn.gru_backward(params, "grp_gru", cache.gru, dx_g, grads)
    return d_fused


@dataclass
class _EdgeSiteCache:
    features: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    gru: nn.GruCache
    enc: _BottleneckCache
    q: GaussianDiag
    eps: np.ndarray
    code: np.ndarray
    head_a: np.ndarray
    head_h: np.ndarray
    prob: float


def _edge_site(
    params: Params,
    fused_source: np.ndarray,
    group_vec: np.ndarray,
    z: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, _EdgeSiteCache]:
    features = np.concatenate([fused_source, group_vec, z])
    a1 = nn.affine(params, "edge_mlp.l1", features)
    h1 = nn.relu(a1)
    x_pre = nn.affine(params, "edge_mlp.l2", h1)
    zero = np.zeros_like(x_pre)
    x_e, gru_cache = nn.gru_step(params, "edge_gru", x_pre, zero)
    q, enc_cache = _bottleneck(params, "enc_e", x_e)
    code = reparameterize(q, eps)
    head_a = nn.affine(params, "edge_head.l1", code)
    head_h = nn.relu(head_a)
    logit = float(nn.affine(params, "edge_head.l2", head_h)[0])
    prob = float(nn.sigmoid(np.array([logit]))[0])
    return prob, _EdgeSiteCache(
        features=features,
        a1=a1,
        h1=h1,
        gru=gru_cache,
        enc=enc_cache,
        q=q,
        eps=eps,
        code=code,
        head_a=head_a,
        head_h=head_h,
        prob=prob,
    )


def _edge_site_backward(
    params: Params,
    cache: _EdgeSiteCache,
    d_logit: float,
    kl_weight: float,
    prior: GaussianDiag,
    prior_acc: list[np.ndarray],
    grads: Grads,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward for one edge site; returns (d_fused_source, d_z)."""
    dim = cache.code.shape[0]
    d_head_h = nn.affine_backward(
        params, "edge_head.l2", cache.head_h, np.array([d_logit]), grads
    )
    d_head_a = nn.relu_backward(cache.head_a, d_head_h)
    d_code = nn.affine_backward(params, "edge_head.l1", cache.code, d_head_a, grads)
    d_mu = d_code.copy()
    d_ls = d_code * cache.eps * np.exp(cache.q.log_sigma)
    if kl_weight != 0.0:
        kq_mu, kq_ls, kp_mu, kp_ls = _kl_diag_backward(cache.q, prior, kl_weight)
        d_mu += kq_mu
        d_ls += kq_ls
        prior_acc[0] += kp_mu
        prior_acc[1] += kp_ls
    dx_e = _bottleneck_backward(params, "enc_e", cache.enc, d_mu, d_ls, grads)
    dx_pre, _ = nn.gru_backward(params, "edge_gru", cache.gru, dx_e, grads)
    dh1 = nn.affine_backward(params, "edge_mlp.l2", cache.h1, dx_pre, grads)
    da1 = nn.relu_backward(cache.a1, dh1)
    d_features = nn.affine_backward(params, "edge_mlp.l1", cache.features, da1, grads)
    # Feature layout: [fused_source, group embedding (frozen), task vector].
    return d_features[:dim], d_features[2 * dim :]


def _resolve_eps(
    dim: int, mode: str, eps: np.ndarray | None, rng: np.random.Generator | None
) -> np.ndarray:
    if mode == "infer":
        return np.zeros(dim)
    if mode != "train":
        raise ValidationError(f"unknown mode '{mode}'")
    if eps is not None:
        return np.asarray(eps, dtype=np.float64)
    if rng is not None:
        return rng.standard_normal(dim)
    raise ValidationError("train mode needs an eps vector or an rng")


def predict_group(
    params: Params,
    candidates: CandidateMatrix,
    fused: np.ndarray,
    *,
    mode: str = "infer",
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Selection probabilities over the K groups plus the STOP entry.

    ``mode="infer"`` uses the posterior mean; ``mode="train"`` draws the
    latent code pathwise from ``eps`` (or ``rng``).
    """
    matrix = scoring_matrix(params, candidates)
    resolved = _resolve_eps(fused.shape[0], mode, eps, rng)
    probs, _ = _group_site(params, matrix, fused, resolved)
    return probs


def predict_edge(
    params: Params,
    fused_source: np.ndarray,
    group_vec: np.ndarray,
    z: np.ndarray,
    *,
    mode: str = "infer",
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Probability of wiring an earlier step into the current group."""
    resolved = _resolve_eps(z.shape[0], mode, eps, rng)
    prob, _ = _edge_site(params, fused_source, group_vec, z, resolved)
    return prob


# ---------------------------------------------------------------------------
# Generation.


def _as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(int(seed))


def generate_graph(
    params: Params,
    config: ModelConfig,
    candidates: CandidateMatrix,
    task_vec: np.ndarray,
    seed: int | np.random.Generator = 0,
    *,
    forced_steps: int | None = None,
) -> GroupGraph:
    """Sample one group graph autoregressively.

    Group selection is greedy over the mean-latent probabilities (ties go to
    the lowest index); edges are Bernoulli draws, with the single
    highest-probability edge forced whenever a later step would otherwise be
    unreachable. Generation stops at STOP or at ``config.max_steps``
    (``truncated`` marks the latter).

    ``forced_steps`` suppresses STOP and runs exactly that many steps; it is
    capped by the step-embedding table, so it must not exceed
    ``config.max_steps``.
    """
    if candidates.pool_size != config.pool_size:
        raise ValidationError(
            f"candidate pool size {candidates.pool_size} does not match "
            f"config pool_size {config.pool_size}"
        )
    limit = config.max_steps
    if forced_steps is not None:
        if not 1 <= forced_steps <= config.max_steps:
            raise ValidationError(
                f"forced_steps must be in [1, {config.max_steps}], got {forced_steps}"
            )
        limit = forced_steps
    rng = _as_rng(seed)
    matrix = scoring_matrix(params, candidates)
    z, _ = project_task(params, task_vec)
    end_index = candidates.end_index
    zeros_eps = np.zeros(config.dim)

    history = np.zeros(config.dim)
    fused_states: list[np.ndarray] = []
    selected: list[int] = []
    edges: list[tuple[int, int]] = []
    truncated = False

    for t in range(limit):
        state, _ = fuse_step(params, history, z, t)
        probs, _ = _group_site(params, matrix, state.fused, zeros_eps)
        if forced_steps is not None:
            choice = int(np.argmax(probs[:end_index]))
        else:
            choice = int(np.argmax(probs))
            if choice == end_index:
                break
        selected.append(choice)
        group_vec = matrix[choice]
        if t > 0:
            hit = False
            best_prob = -1.0
            best_source = 0
            for i in range(t):
                p_edge, _ = _edge_site(params, fused_states[i], group_vec, z, zeros_eps)
                if p_edge > best_prob:
                    best_prob = p_edge
                    best_source = i
                if rng.random() < p_edge:
                    edges.append((i, t))
                    hit = True
            if not hit:
                # Connectivity fallback: force the most likely source.
                edges.append((best_source, t))
        fused_states.append(state.fused)
        history, _ = nn.gru_step(params, "his_gru", group_vec, history)
    else:
        if forced_steps is None and len(selected) == config.max_steps:
            truncated = True

    return GroupGraph(selected=tuple(selected), edges=tuple(edges), truncated=truncated)


# ---------------------------------------------------------------------------
# Likelihood and the teacher-forced objective.


def _check_structure(graph: GroupGraph, config: ModelConfig) -> None:
    """Structural checks only; edge patterns violating reachability are legal
    here because the factorization assigns them probability mass."""
    n = graph.n_steps
    if n > config.max_steps:
        raise ValidationError(f"graph has {n} steps, model budget is {config.max_steps}")
    for t, gid in enumerate(graph.selected):
        if not 0 <= gid < config.pool_size:
            raise ValidationError(f"step {t} selects group {gid} outside the pool")
    seen = set()
    for i, t in graph.edges:
        if not 0 <= i < t < n:
            raise ValidationError(f"edge {i}->{t} is out of range")
        if (i, t) in seen:
            raise ValidationError(f"duplicate edge {i}->{t}")
        seen.add((i, t))


def graph_log_likelihood(
    params: Params,
    config: ModelConfig,
    candidates: CandidateMatrix,
    task_vec: np.ndarray,
    graph: GroupGraph,
) -> float:
    """Log probability of ``graph`` under mean-latent decoding.

    Sums the log of each step's selection probability and of every pairwise
    edge decision (presence or absence). A STOP factor applies only when the
    graph ends before ``max_steps``; length-``max_steps`` graphs terminate by
    budget, so the measure over the whole outcome space sums to one.
    """
    _check_structure(graph, config)
    matrix = scoring_matrix(params, candidates)
    z, _ = project_task(params, task_vec)
    zeros_eps = np.zeros(config.dim)
    edge_set = set(graph.edges)
    history = np.zeros(config.dim)
    fused_states: list[np.ndarray] = []
    total = 0.0
    for t, gid in enumerate(graph.selected):
        state, _ = fuse_step(params, history, z, t)
        probs, _ = _group_site(params, matrix, state.fused, zeros_eps)
        total += math.log(max(float(probs[gid]), LOG_FLOOR))
        group_vec = matrix[gid]
        for i in range(t):
            p_edge, _ = _edge_site(params, fused_states[i], group_vec, z, zeros_eps)
            p_event = p_edge if (i, t) in edge_set else 1.0 - p_edge
            total += math.log(max(p_event, LOG_FLOOR))
        fused_states.append(state.fused)
        history, _ = nn.gru_step(params, "his_gru", group_vec, history)
    if graph.n_steps < config.max_steps:
        state, _ = fuse_step(params, history, z, graph.n_steps)
        probs, _ = _group_site(params, matrix, state.fused, zeros_eps)
        total += math.log(max(float(probs[candidates.end_index]), LOG_FLOOR))
    return total


@dataclass
class LossBreakdown:
    group_nll: float
    edge_bce: float
    kl_group: float
    kl_edge: float
    beta_group: float
    beta_edge: float
    n_group_sites: int
    n_edge_sites: int

    @property
    def total(self) -> float:
        return (
            self.group_nll
            + self.edge_bce
            + self.beta_group * self.kl_group
            + self.beta_edge * self.kl_edge
        )


def trajectory_noise(
    rng: np.random.Generator, graph: GroupGraph, config: ModelConfig
) -> list[np.ndarray]:
    """Draw the latent noise for every site of a teacher-forced pass.

    Site order is fixed: for each step, the selection site first, then its
    edge sites by ascending source; the STOP site (present when the graph
    ends before the budget) comes last. The draw count depends only on the
    graph shape, so a fixed seed yields the same noise for any parameters.
    """
    draws = []
    for t in range(graph.n_steps):
        draws.append(rng.standard_normal(config.dim))
        for _ in range(t):
            draws.append(rng.standard_normal(config.dim))
    if graph.n_steps < config.max_steps:
        draws.append(rng.standard_normal(config.dim))
    return draws


def loss_and_grads(
    params: Params,
    config: ModelConfig,
    candidates: CandidateMatrix,
    task_vec: np.ndarray,
    graph: GroupGraph,
    *,
    beta_group: float | None = None,
    beta_edge: float | None = None,
    noise: list[np.ndarray] | None = None,
    rng: np.random.Generator | int | None = None,
    compute_grads: bool = True,
) -> tuple[LossBreakdown, Grads]:
    """Teacher-forced loss for one trajectory, with exact gradients.

    The objective is selection NLL + edge BCE + weighted KL between the
    latent posteriors and the task-conditioned priors. Noise can be passed
    explicitly (one vector per site, see :func:`trajectory_noise`) or drawn
    from ``rng``; with neither, the posterior means are used.
    """
    if beta_group is None:
        beta_group = config.beta_group
    if beta_edge is None:
        beta_edge = config.beta_edge
    _check_structure(graph, config)
    if noise is None and rng is not None:
        noise = trajectory_noise(_as_rng(rng), graph, config)

    matrix = scoring_matrix(params, candidates)
    end_index = candidates.end_index
    n = graph.n_steps
    edge_set = set(graph.edges)
    zeros_eps = np.zeros(config.dim)

    def next_eps(stream: Iterator[np.ndarray] | None) -> np.ndarray:
        if stream is None:
            return zeros_eps
        try:
            return next(stream)
        except StopIteration:
            raise ValidationError("noise stream shorter than the site count")

    stream = iter(noise) if noise is not None else None

    z, task_cache = project_task(params, task_vec)
    prior_g, prior_g_cache = _bottleneck(params, "prior_g", z)
    prior_e, prior_e_cache = _bottleneck(params, "prior_e", z)

    # History fold over the selected groups' embeddings.
    states = [np.zeros(config.dim)]
    his_caches: list[nn.GruCache] = []
    for gid in graph.selected:
        nxt, cache = nn.gru_step(params, "his_gru", matrix[gid], states[-1])
        states.append(nxt)
        his_caches.append(cache)

    group_sites: list[tuple[int, int, _FuseCache, _GroupSiteCache]] = []
    edge_sites: list[tuple[int, int, int, _EdgeSiteCache]] = []
    fused_states: list[np.ndarray] = []
    group_nll = 0.0
    edge_bce = 0.0
    kl_group = 0.0
    kl_edge = 0.0

    site_steps = list(range(n)) + ([n] if n < config.max_steps else [])
    for t in site_steps:
        target = graph.selected[t] if t < n else end_index
        state, fuse_cache = fuse_step(params, states[t], z, t)
        probs, g_cache = _group_site(params, matrix, state.fused, next_eps(stream))
        group_nll += -math.log(max(float(probs[target]), LOG_FLOOR))
        kl_group += kl_diag(g_cache.q, prior_g)
        group_sites.append((t, target, fuse_cache, g_cache))
        if t < n:
            group_vec = matrix[target]
            for i in range(t):
                label = 1 if (i, t) in edge_set else 0
                prob, e_cache = _edge_site(
                    params, fused_states[i], group_vec, z, next_eps(stream)
                )
                p_event = prob if label else 1.0 - prob
                edge_bce += -math.log(max(p_event, LOG_FLOOR))
                kl_edge += kl_diag(e_cache.q, prior_e)
                edge_sites.append((i, t, label, e_cache))
            fused_states.append(state.fused)

    breakdown = LossBreakdown(
        group_nll=group_nll,
        edge_bce=edge_bce,
        kl_group=kl_group,
        kl_edge=kl_edge,
        beta_group=beta_group,
        beta_edge=beta_edge,
        n_group_sites=len(group_sites),
        n_edge_sites=len(edge_sites),
    )
    if not compute_grads:
        return breakdown, {}

    grads: Grads = {}
    d_fused_acc = [np.zeros(config.dim) for _ in site_steps]
    d_state_acc = [np.zeros(config.dim) for _ in range(n + 1)]
    dz = np.zeros(config.dim)
    prior_g_acc = [np.zeros(config.dim), np.zeros(config.dim)]
    prior_e_acc = [np.zeros(config.dim), np.zeros(config.dim)]

    for site_idx, (t, target, _, g_cache) in enumerate(group_sites):
        if float(g_cache.probs[target]) > LOG_FLOOR:
            d_logits = g_cache.probs.copy()
            d_logits[target] -= 1.0
        else:
            d_logits = np.zeros(end_index + 1)
        d_fused_acc[site_idx] += _group_site_backward(
            params,
            g_cache,
            matrix,
            end_index,
            d_logits,
            beta_group,
            prior_g,
            prior_g_acc,
            grads,
        )

    for i, t, label, e_cache in edge_sites:
        p = e_cache.prob
        p_event = p if label else 1.0 - p
        d_logit = (p - float(label)) if p_event > LOG_FLOOR else 0.0
        d_src, d_z_part = _edge_site_backward(
            params, e_cache, d_logit, beta_edge, prior_e, prior_e_acc, grads
        )
        d_fused_acc[i] += d_src
        dz += d_z_part

    # Fusion sites, in any order; each feeds one history state and z.
    for site_idx, (t, _, fuse_cache, _) in enumerate(group_sites):
        d_his, d_z_part = _fuse_backward(
            fuse_cache, d_fused_acc[site_idx], grads, params["step_embed"]
        )
        d_state_acc[t] += d_his
        dz += d_z_part

    # Backprop through time over the history fold. State 0 is a constant.
    carry = np.zeros(config.dim)
    for j in range(n - 1, -1, -1):
        total = carry + d_state_acc[j + 1]
        _, carry = nn.gru_backward(params, "his_gru", his_caches[j], total, grads)

    # Task-conditioned priors, then the task projection itself.
    dz += _bottleneck_backward(
        params, "prior_g", prior_g_cache, prior_g_acc[0], prior_g_acc[1], grads
    )
    dz += _bottleneck_backward(
        params, "prior_e", prior_e_cache, prior_e_acc[0], prior_e_acc[1], grads
    )
    _project_task_backward(params, task_cache, dz, grads)

    return breakdown, grads
