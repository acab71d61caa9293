from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

import grouptopo as gt


@pytest.fixture
def pool4() -> gt.GroupPool:
    return gt.GroupPool(groups=tuple(gt.default_pool().groups[:4]))


@pytest.fixture
def hash16() -> gt.HashingTextEmbedder:
    return gt.HashingTextEmbedder(16)


@dataclass
class TinySetup:
    pool: gt.GroupPool
    provider: gt.HashingTextEmbedder
    candidates: gt.CandidateMatrix
    config: gt.ModelConfig
    params: dict
    task_vec: np.ndarray


def make_tiny(
    pool_size: int = 4,
    dim: int = 16,
    hidden: int = 8,
    max_steps: int = 4,
    seed: int = 5,
    beta_group: float = 0.0,
    beta_edge: float = 0.0,
    query: str = "inspect the pipeline output",
) -> TinySetup:
    pool = gt.GroupPool(groups=tuple(gt.default_pool().groups[:pool_size]))
    provider = gt.HashingTextEmbedder(dim)
    candidates = gt.build_candidate_matrix(provider, pool)
    config = gt.ModelConfig(
        pool_size=pool_size,
        dim=dim,
        hidden=hidden,
        max_steps=max_steps,
        beta_group=beta_group,
        beta_edge=beta_edge,
        seed=seed,
    )
    params = gt.init_params(config)
    task_vec = provider.encode([query])[0]
    return TinySetup(
        pool=pool,
        provider=provider,
        candidates=candidates,
        config=config,
        params=params,
        task_vec=task_vec,
    )


@pytest.fixture
def tiny() -> TinySetup:
    return make_tiny()
