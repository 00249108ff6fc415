import os
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ghan.hypergraph import build_snapshot
from ghan.ingest import EmbeddingStore, NewsEvent
from ghan.model import ModelConfig, init_params

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DAY = date(2021, 3, 1)


def make_event(eid, tickers, sentiment=0, minute=0, text="", day=DAY):
    ts = datetime(day.year, day.month, day.day, 14, 0, tzinfo=timezone.utc) + timedelta(minutes=minute)
    return NewsEvent(eid, ts, text or f"news {eid}", sentiment, tuple(tickers))


def random_snapshot(rng, n_stocks=4, n_events=3, text_dim=6, feature_dim=8, max_mentions=3, p_empty=0.0):
    """Snapshot over tickers S0..S{n-1} with random mentions, features and text vectors."""
    universe = [f"S{k}" for k in range(n_stocks)]
    events, store = [], EmbeddingStore(dim=text_dim)
    for j in range(n_events):
        if rng.random() < p_empty:
            tickers = ["OUTSIDE"]
        else:
            k = int(rng.integers(1, min(max_mentions, n_stocks) + 1))
            tickers = [universe[i] for i in rng.choice(n_stocks, size=k, replace=False)]
        eid = f"e{j:03d}"
        events.append(make_event(eid, tickers, int(rng.integers(-1, 2)), minute=int(rng.integers(0, 300))))
        store.add(eid, rng.normal(size=text_dim))
    feats = rng.normal(size=(n_stocks, feature_dim))
    return build_snapshot(DAY, events, feats, universe, store)


def random_params(config, rng, scale=1.0):
    """Initial params perturbed so attention logits are not all tiny."""
    base = init_params(config)
    return {k: v + scale * 0.3 * rng.normal(size=v.shape) for k, v in base.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(n_stocks=4, hidden_dim=6, text_dim=6, feature_dim=8, layers=2, dropout_p=0.5, seed=3)


@pytest.fixture(scope="session")
def small_synth():
    from ghan.synth import SynthConfig, generate

    return generate(SynthConfig(n_stocks=6, n_days=110, text_dim=8, seed=7))


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    from ghan.dataset import IngestConfig, assemble_dataset

    return assemble_dataset(small_synth.prices, small_synth.events, small_synth.embeddings, IngestConfig(text_dim=8))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
