import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params, random_snapshot
from ghan.explain import (
    DEFAULT_GROUPS,
    ExplainError,
    FeatureGrouping,
    exact_shapley,
    exact_shapley_values,
    mask_inputs,
    model_score_fn,
    report_table,
    sampled_shapley,
    sampled_shapley_values,
    shapley_weight,
)
from ghan.model import ModelConfig, node_embedding, positional_encoding


def table_value(table):
    return lambda s: table[sum(1 << i for i in s)]


def permutation_oracle(value, m):
    """Shapley values by averaging marginal contributions over all orderings."""
    phi = np.zeros(m)
    perms = list(itertools.permutations(range(m)))
    for order in perms:
        seen = set()
        for i in order:
            phi[i] += value(frozenset(seen | {i})) - value(frozenset(seen))
            seen.add(i)
    return phi / len(perms)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def test_weight_example():
    assert shapley_weight(1, 3) == pytest.approx(1 / 6)


@given(st.integers(1, 10))
def test_weights_sum_to_one_over_subsets(m):
    assert math.fsum(math.comb(m - 1, s) * shapley_weight(s, m) for s in range(m)) == pytest.approx(1.0)


def test_additive_score_recovers_coefficients():
    c = [0.7, -1.3]
    phi, _ = exact_shapley_values(lambda s: sum(c[i] for i in s), 2)
    assert phi.tolist() == c


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_exact_matches_permutation_oracle_and_is_efficient(m, seed):
    table = np.random.default_rng(seed).normal(size=1 << m)
    v = table_value(table)
    phi, _ = exact_shapley_values(v, m)
    np.testing.assert_allclose(phi, permutation_oracle(v, m), atol=1e-12)
    assert abs(math.fsum(phi) - (table[-1] - table[0])) <= 1e-9


def test_dummy_and_symmetry():
    # group 2 never matters; groups 0 and 1 are interchangeable
    def v(s):
        return 2.0 * (0 in s) * (1 in s) + 0.5 * ((0 in s) + (1 in s)) + 0.3 * (3 in s)

    phi, _ = exact_shapley_values(v, 4)
    assert abs(phi[2]) <= 1e-12
    assert abs(phi[0] - phi[1]) <= 1e-12


def test_exact_rejects_too_many_groups():
    with pytest.raises(ExplainError, match="sampled"):
        exact_shapley_values(lambda s: 0.0, 21)


def test_sampled_single_group_exact():
    v = lambda s: 3.0 if s else 1.25
    for n in (1, 7, 100):
        assert sampled_shapley_values(v, 1, n, seed=n).tolist() == [1.75]


def test_sampled_close_to_exact_m8():
    table = np.random.default_rng(8).normal(size=256)
    v = table_value(table)
    exact, _ = exact_shapley_values(v, 8)
    approx = sampled_shapley_values(v, 8, 20_000, seed=1)
    assert np.max(np.abs(approx - exact)) <= 0.05 * (table.max() - table.min())


def test_sampled_deterministic_given_seed():
    v = table_value(np.random.default_rng(2).normal(size=32))
    a = sampled_shapley_values(v, 5, 300, seed=4)
    assert np.array_equal(a, sampled_shapley_values(v, 5, 300, seed=4))
    assert not np.array_equal(a, sampled_shapley_values(v, 5, 300, seed=5))


def test_sampled_error_shrinks_with_more_samples():
    table = np.random.default_rng(3).normal(size=256)
    v = table_value(table)
    exact, _ = exact_shapley_values(v, 8)
    dev = {n: np.mean([np.max(np.abs(sampled_shapley_values(v, 8, n, s) - exact)) for s in range(10)]) for n in (1000, 20_000)}
    assert dev[20_000] <= dev[1000]


def test_sampled_unbiased_at_3_sigma():
    table = np.random.default_rng(5).normal(size=32)
    v = table_value(table)
    exact, _ = exact_shapley_values(v, 5)
    runs = np.array([sampled_shapley_values(v, 5, 50, seed) for seed in range(30)])
    se = runs.std(axis=0, ddof=1) / math.sqrt(30)
    assert np.all(np.abs(runs.mean(axis=0) - exact) <= 3 * se + 1e-12)


def test_sampled_needs_a_sample():
    with pytest.raises(ExplainError):
        sampled_shapley_values(lambda s: 0.0, 2, 0, 0)


# ---------------------------------------------------------------------------
# masking and the model wrapper
# ---------------------------------------------------------------------------


@pytest.fixture
def setup(rng):
    cfg = ModelConfig(n_stocks=4, hidden_dim=6, text_dim=6)
    snap = random_snapshot(rng, n_stocks=4, n_events=4)
    return cfg, snap, random_params(cfg, rng)


def test_grouping_validation():
    assert FeatureGrouping().names == DEFAULT_GROUPS
    with pytest.raises(ExplainError):
        FeatureGrouping(("geometric", "colour"))
    with pytest.raises(ExplainError):
        FeatureGrouping(("geometric", "geometric"))
    with pytest.raises(ExplainError):
        mask_inputs(random_snapshot(np.random.default_rng(0)), FeatureGrouping(), ["nope"])


def test_mask_all_kept_is_identity(setup):
    _, snap, _ = setup
    assert mask_inputs(snap, FeatureGrouping(), DEFAULT_GROUPS) is snap


def test_mask_nothing_kept_is_baseline(setup):
    _, snap, _ = setup
    base = mask_inputs(snap, FeatureGrouping(), [])
    assert not base.stock_features.any() and not base.news_text.any()
    assert not base.use_geometric and not base.use_positional
    assert np.array_equal(snap.incidence().toarray(), base.incidence().toarray())


def test_mask_text_only(setup):
    cfg, snap, p = setup
    keep = [g for g in DEFAULT_GROUPS if g != "text_embedding"]
    masked = mask_inputs(snap, FeatureGrouping(), keep)
    for k in range(snap.n_news):
        want = p["g_news"] + positional_encoding(int(snap.news_rank[k]), cfg.hidden_dim)
        assert np.array_equal(node_embedding(4 + k, masked, p, cfg), want)
    assert np.array_equal(masked.stock_features, snap.stock_features)


def test_model_efficiency(setup):
    cfg, snap, p = setup
    fn = model_score_fn(p, cfg)
    for target in (None, "S1", 2):
        rep = exact_shapley(fn, snap, FeatureGrouping(), target)
        assert abs(rep.efficiency_residual) <= 1e-9
        score = fn(snap)
        want = score.mean() if target is None else score[snap.tickers.index(target) if isinstance(target, str) else target]
        assert rep.f_x == pytest.approx(want, abs=1e-15)


def test_unknown_target(setup):
    cfg, snap, p = setup
    with pytest.raises(ExplainError):
        exact_shapley(model_score_fn(p, cfg), snap, FeatureGrouping(), "ZZZ")


def test_sampled_report_fields(setup):
    cfg, snap, p = setup
    rep = sampled_shapley(model_score_fn(p, cfg), snap, FeatureGrouping(), "S0", n_samples=50, seed=9)
    assert rep.method == "sampled" and rep.n_samples == 50 and rep.seed == 9
    assert rep.target == "S0"


def test_report_table_sorted_with_residual(setup):
    cfg, snap, p = setup
    rep = exact_shapley(model_score_fn(p, cfg), snap, FeatureGrouping(), "S0")
    text = report_table(rep)
    lines = text.splitlines()
    body = [l for l in lines[3:] if l.split()[0] in DEFAULT_GROUPS]
    vals = [abs(float(l.split()[-1])) for l in body]
    assert vals == sorted(vals, reverse=True)
    assert "efficiency residual" in text and "exact" in lines[0]
    assert text == report_table(rep)
    csv_lines = rep.to_csv().splitlines()
    assert csv_lines[0] == "group,phi" and csv_lines[-1].startswith("efficiency_residual,")


def test_subset_of_groups(setup):
    cfg, snap, p = setup
    grouping = FeatureGrouping(("daily_return", "text_embedding"))
    rep = exact_shapley(model_score_fn(p, cfg), snap, grouping, "S0")
    assert len(rep.phi) == 2 and abs(rep.efficiency_residual) <= 1e-9
