from __future__ import annotations

import pytest

from dualcare.agents import Pipeline
from dualcare.dataset.fixture import FixtureSpec, generate_fixture
from dualcare.kb import build_indexes
from dualcare.llm.client import RetryPolicy
from dualcare.llm.mock import HashEmbedder, OverlapReranker, ScriptedChat

NO_SLEEP = RetryPolicy(sleep=lambda s: None)


def make_pipeline(fixture, *, dim: int = 128, seed: int = 0, chat=None, **kw) -> Pipeline:
    emb = HashEmbedder(dim=dim, seed=seed)
    chat = chat if chat is not None else ScriptedChat(fixture.script)
    kb = build_indexes(fixture.corpus, emb, chat)
    return Pipeline(kb, chat, emb, OverlapReranker(), retry=NO_SLEEP, **kw)


@pytest.fixture(scope="session")
def small_fixture():
    return generate_fixture(FixtureSpec(seed=3, n_cases=6))


@pytest.fixture
def no_sleep():
    return NO_SLEEP


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
