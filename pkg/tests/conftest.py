from __future__ import annotations

import pytest

from tagforge.clustering import HashingProvider
from tagforge.gateway import AgentRole, Gateway
from tagforge.mockllm import MockLLMBackend
from tagforge.planted import make_world


def make_gateway(world, seed=0, false_negative_rate=0.0, hidden=(),
                 **gateway_kwargs) -> Gateway:
    backend = MockLLMBackend(world.taxonomy, seed=seed,
                             false_negative_rate=false_negative_rate,
                             hidden_categories=frozenset(hidden))
    return Gateway({AgentRole.ARCHITECT: backend,
                    AgentRole.ANNOTATOR: backend}, **gateway_kwargs)


@pytest.fixture(scope="session")
def small_world():
    """3x3 taxonomy, 270 items: fast enough for per-module tests."""
    return make_world(branching=(3, 3), n_items=270, seed=5)


@pytest.fixture(scope="session")
def provider():
    return HashingProvider(dim=256)


@pytest.fixture()
def small_gateway(small_world):
    return make_gateway(small_world)


@pytest.fixture(scope="session")
def small_build(small_world):
    """One shared noise-free build over the 3x3 world. Treat as read-only."""
    from tagforge.builder import build_vocabulary
    from tagforge.vocab import BuildConfig

    gateway = make_gateway(small_world)
    state = build_vocabulary(small_world.corpus, BuildConfig(d_max=2, tau_split=20),
                             gateway, HashingProvider(dim=256))
    return small_world, state


@pytest.fixture(scope="session")
def small_semids(small_build):
    """Assignments, resolver ranks, and the exported table for the 3x3 world."""
    from tagforge.assignment import (assign_paths, export_semids,
                                     resolve_collisions)

    world, state = small_build
    gateway = make_gateway(world)
    records = assign_paths(world.corpus, state.tree, gateway, parallelism=8)
    records = resolve_collisions(records)
    table = export_semids(records, state.tree)
    return world, state.tree, records, table
