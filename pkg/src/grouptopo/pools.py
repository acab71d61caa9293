"""Bundled default candidate pool.

Sixteen groups built from four base roles (solver, analyst, programmer,
inspector) arranged in five internal patterns: solo work, two- and
three-stage chains, stars that fan into a finisher, and fully connected
review. Kept deliberately small so selection stays tractable while covering
clearly different collaboration styles and costs.
"""

from __future__ import annotations

import os

from .graph import (
    CandidateGroup,
    GroupPool,
    IntraPattern,
    RoleSpec,
    pool_from_records,
    pool_to_records,
    read_records,
    write_records,
)

SOLVER = RoleSpec(
    name="solver",
    prompt=(
        "You are a careful problem solver. Work step by step, keep every "
        "intermediate result explicit, and finish with the final answer on "
        "its own line."
    ),
)

ANALYST = RoleSpec(
    name="analyst",
    prompt=(
        "You are an analyst. Break the problem into smaller parts, pick a "
        "solution strategy, and lay out the key relationships before any "
        "heavy computation happens."
    ),
)

PROGRAMMER = RoleSpec(
    name="programmer",
    prompt=(
        "You are a programming expert. Translate the problem into precise "
        "code or pseudocode, trace it mentally, and report exactly what it "
        "would output."
    ),
)

INSPECTOR = RoleSpec(
    name="inspector",
    prompt=(
        "You are an inspector. Re-derive or spot-check the reasoning you "
        "are given, call out any error you find, and state the corrected "
        "final answer."
    ),
)

BASE_ROLES = (SOLVER, ANALYST, PROGRAMMER, INSPECTOR)


def _group(name, description, roles, pattern) -> CandidateGroup:
    return CandidateGroup(
        name=name, description=description, roles=tuple(roles), pattern=pattern
    )


def default_pool() -> GroupPool:
    """The 16-group default pool."""
    g = []
    # Solo specialists.
    g.append(_group("solo-solver", "one solver works alone",
                    [SOLVER], IntraPattern.SINGLE))
    g.append(_group("solo-analyst", "one analyst works alone",
                    [ANALYST], IntraPattern.SINGLE))
    g.append(_group("solo-programmer", "one programmer works alone",
                    [PROGRAMMER], IntraPattern.SINGLE))
    g.append(_group("solo-inspector", "one inspector works alone",
                    [INSPECTOR], IntraPattern.SINGLE))
    # Two-stage chains.
    g.append(_group("chain-solve-check", "a solver hands off to an inspector",
                    [SOLVER, INSPECTOR], IntraPattern.CHAIN))
    g.append(_group("chain-plan-solve", "an analyst plans, a solver executes",
                    [ANALYST, SOLVER], IntraPattern.CHAIN))
    g.append(_group("chain-code-check", "a programmer codes, an inspector verifies",
                    [PROGRAMMER, INSPECTOR], IntraPattern.CHAIN))
    g.append(_group("chain-plan-code", "an analyst plans, a programmer implements",
                    [ANALYST, PROGRAMMER], IntraPattern.CHAIN))
    # Three-stage chains.
    g.append(_group("pipeline-plan-solve-check",
                    "plan, solve, then verify in sequence",
                    [ANALYST, SOLVER, INSPECTOR], IntraPattern.CHAIN))
    g.append(_group("pipeline-plan-code-check",
                    "plan, implement, then verify in sequence",
                    [ANALYST, PROGRAMMER, INSPECTOR], IntraPattern.CHAIN))
    g.append(_group("pipeline-solve-code-check",
                    "solve by hand, cross-check in code, then verify",
                    [SOLVER, PROGRAMMER, INSPECTOR], IntraPattern.CHAIN))
    # Stars: independent attempts fanned into a finisher.
    g.append(_group("star-dual-attempt",
                    "a solver and a programmer attempt independently, an "
                    "inspector reconciles",
                    [SOLVER, PROGRAMMER, INSPECTOR], IntraPattern.STAR))
    g.append(_group("star-plan-and-attempt",
                    "an analyst and a programmer work independently, a solver "
                    "integrates",
                    [ANALYST, PROGRAMMER, SOLVER], IntraPattern.STAR))
    g.append(_group("star-triple-attempt",
                    "three independent attempts reconciled by an inspector",
                    [SOLVER, ANALYST, PROGRAMMER, INSPECTOR], IntraPattern.STAR))
    # Fully connected review circles.
    g.append(_group("panel-solve",
                    "solver, analyst, and inspector each see all prior "
                    "contributions",
                    [SOLVER, ANALYST, INSPECTOR], IntraPattern.FULL))
    g.append(_group("panel-code",
                    "analyst, programmer, and inspector each see all prior "
                    "contributions",
                    [ANALYST, PROGRAMMER, INSPECTOR], IntraPattern.FULL))
    return GroupPool(groups=tuple(g))


def load_pool(path: str | os.PathLike) -> GroupPool:
    return pool_from_records(read_records(path))


def save_pool(path: str | os.PathLike, pool: GroupPool) -> None:
    write_records(path, pool_to_records(pool))
