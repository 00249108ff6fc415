"""Acceptance criteria, one test per criterion.

Each test prints a single ``[C<n>] PASS|FAIL`` line with the measured values
and then asserts. The lines are repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, DAY, make_event, random_params, random_snapshot
from ghan.dataset import IngestConfig, assemble_dataset
from ghan.evaluate import (
    backtest,
    classification_metrics,
    equal_weight_baseline,
    select_portfolio,
    sharpe,
    standard_error,
    UndefinedSharpeError,
)
from ghan.explain import FeatureGrouping, exact_shapley, exact_shapley_values, model_score_fn, sampled_shapley_values
from ghan.hypergraph import build_snapshot, edges_of_node, members_of_edge
from ghan.model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    layer_forward,
    load_checkpoint,
    loss,
    loss_and_grad,
    save_checkpoint,
)
from ghan.numerics import Tensor, finite_diff_grad
from ghan.synth import SynthConfig, generate
from ghan.train import TrainConfig, dataset_samples, evaluate_days, train
from test_evaluate import expand, rational_oracle
from test_hypergraph import brute_incidence


def report(n, ok, detail):
    line = f"[C{n}] {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------------------
# 1-5: correctness of the building blocks
# ---------------------------------------------------------------------------


def test_c1_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cfg = ModelConfig(n_stocks=3, hidden_dim=4, text_dim=3, layers=2, dropout_p=0.3)
    snap = random_snapshot(rng, n_stocks=3, n_events=2, text_dim=3)
    assert snap.n_edges == 2
    p = ModelParams(random_params(cfg, rng))
    labels = np.array([0, 2, 1])
    _, grads = loss_and_grad(snap, labels, p, cfg, training=True, dropout_key=(1,))
    worst, bad = 0.0, []
    for name in p:

        def f(x, name=name):
            q = dict(p)
            q[name] = x
            return loss(forward(snap, q, cfg, training=True, dropout_key=(1,)), labels).item()

        fd = finite_diff_grad(f, np.array(p[name]))
        tol = np.maximum(1e-4 * np.maximum(np.abs(grads[name]), np.abs(fd)), 1e-7)
        ratio = float(np.max(np.abs(grads[name] - fd) / tol))
        worst = max(worst, ratio)
        if ratio > 1.0:
            bad.append(name)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10
    report(1, ok, f"{len(p)} tensors, worst error/tolerance {worst:.3f} (<=1; 1e-4 rel, 1e-7 abs floor), failing={bad}, {elapsed:.1f}s (<10s)")
    assert ok


def test_c2_attention_normalisation():
    violations, groups = 0, 0
    for seed in range(1000):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 7))
        cfg = ModelConfig(n_stocks=n, hidden_dim=4, text_dim=5, layers=2)
        snap = random_snapshot(r, n_stocks=n, n_events=int(r.integers(0, 8)), text_dim=5, p_empty=0.15)
        out = forward(snap, random_params(cfg, r, scale=3.0), cfg)
        if not snap.n_edges:
            continue
        members = np.unique(snap.pair_node)
        for tr in out.attention:
            a = np.bincount(snap.pair_edge, tr.alpha, minlength=snap.n_edges)
            b = np.bincount(snap.pair_node, tr.beta, minlength=snap.n_nodes)[members]
            violations += int(np.sum(np.abs(a - 1) > 1e-9) + np.sum(np.abs(b - 1) > 1e-9))
            groups += a.size + b.size
    ok = violations == 0
    report(2, ok, f"1000 snapshots, {groups} alpha/beta groups, {violations} violations (tol 1e-9)")
    assert ok


def test_c3_incidence_oracle():
    universe = ["A", "B", "C", "D", "E"]
    mismatches = 0
    for seed in range(500):
        r = np.random.default_rng(seed)
        events = []
        for j in range(int(r.integers(0, 10))):
            k = int(r.integers(0, 4))
            tickers = sorted(set(r.choice(universe + ["X", "Y"], size=k, replace=True).tolist()))
            events.append(make_event(f"e{j:02d}", tickers, minute=int(r.integers(0, 500))))
        snap = build_snapshot(DAY, events, np.zeros((5, 8)), universe)
        H = snap.incidence().toarray().astype(int)
        same = np.array_equal(H, brute_incidence(universe, events))
        for v in range(snap.n_nodes):
            for e in edges_of_node(snap, v):
                same &= v in [m.index for m in members_of_edge(snap, e)]
        for e in range(snap.n_edges):
            for m in members_of_edge(snap, e):
                same &= e in edges_of_node(snap, m.index)
        mismatches += not same
    ok = mismatches == 0
    report(3, ok, f"500 random event sets, {mismatches} mismatches against brute-force incidence")
    assert ok


def test_c4_shapley():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        cfg = ModelConfig(n_stocks=4, hidden_dim=6, text_dim=6, layers=2)
        snap = random_snapshot(r, n_stocks=4, n_events=int(r.integers(0, 5)))
        target = None if seed % 2 else f"S{seed % 4}"
        rep = exact_shapley(model_score_fn(random_params(cfg, r), cfg), snap, FeatureGrouping(), target)
        worst = max(worst, abs(rep.efficiency_residual))
    table = np.random.default_rng(2024).normal(size=256)
    value = lambda s: table[sum(1 << i for i in s)]
    exact, _ = exact_shapley_values(value, 8)
    approx = sampled_shapley_values(value, 8, 20_000, seed=0)
    dev = float(np.max(np.abs(approx - exact)))
    bound = 0.05 * float(table.max() - table.min())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and dev <= bound and elapsed < 60
    report(4, ok, f"max |efficiency residual| {worst:.1e} (<=1e-9); sampled M=8 n=20000 max dev {dev:.4f} "
                  f"(<= {bound:.4f}); {elapsed:.1f}s (<60s)")
    assert ok


def test_c5_metrics_oracle():
    rng = np.random.default_rng(5)
    mismatches = 0
    for k in range(50):
        cm = rng.integers(0, 15, size=(3, 3))
        if k < 5:
            cm[:, k % 3] = 0  # never predicted
        if 5 <= k < 10:
            cm[k % 3, :] = 0  # never true
        if cm.sum() == 0:
            cm[0, 0] = 1
        cm = cm.tolist()
        preds, labels = expand(cm)
        rep = classification_metrics(preds, labels)
        want = rational_oracle(cm)
        got = (rep.accuracy, list(rep.precision), list(rep.recall), list(rep.f1), rep.macro_f1)
        exp = (
            float(want["accuracy"]),
            [float(x) for x in want["p"]],
            [float(x) for x in want["r"]],
            [float(x) for x in want["f1"]],
            float(want["macro_f1"]),
        )
        mismatches += got != exp
    ok = mismatches == 0
    report(5, ok, f"50 confusion matrices (10 with empty classes), {mismatches} inexact results")
    assert ok


# ---------------------------------------------------------------------------
# 6-8: end-to-end on the synthetic defaults
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_run():
    t0 = time.perf_counter()
    sc = SynthConfig()
    data = generate(sc)
    ds = assemble_dataset(data.prices, data.events, data.embeddings, IngestConfig(text_dim=sc.text_dim))
    mc = ModelConfig(n_stocks=len(ds.tickers), text_dim=ds.text_dim, feature_dim=ds.feature_dim, layers=2)
    r = ds.ranges()
    tr = dataset_samples(ds, r["train"], mc.dead_zone)
    va = dataset_samples(ds, r["val"], mc.dead_zone)
    te = dataset_samples(ds, r["test"], mc.dead_zone)
    tc = TrainConfig()
    untrained = init_params(mc)
    labelled = [(i, s) for i, s in enumerate(tr) if (s[1] >= 0).any()]
    train_mc = ModelConfig(**{**mc.to_dict(), "dropout_p": tc.dropout})
    initial_loss = float(np.mean([
        loss_and_grad(s, l, untrained, train_mc, training=True, dropout_key=(0, i))[0] for i, (s, l) in labelled
    ]))
    res = train(tr, va, mc, tc)
    elapsed = time.perf_counter() - t0
    return {"ds": ds, "mc": res.model_config, "res": res, "test": te, "elapsed": elapsed, "initial_loss": initial_loss}


@pytest.mark.slow
def test_c6_synthetic_recoverability(synthetic_run):
    run = synthetic_run
    rep = evaluate_days(run["test"], run["res"].params, run["mc"])
    ok = rep.accuracy >= 0.80 and rep.macro_f1 >= 0.75 and run["elapsed"] < 300
    report(6, ok, f"test accuracy {rep.accuracy:.4f} (>=0.80), macro-F1 {rep.macro_f1:.4f} (>=0.75), "
                  f"best epoch {run['res'].best_epoch}, {run['elapsed']:.0f}s (<300s)")
    assert ok


@pytest.mark.slow
def test_c6_threshold_exceeds_bayes_ceiling(synthetic_run):
    """Context for C6: even a classifier told the planted shocks cannot reach 0.80.

    Returns are shock + N(0, noise^2), so given the shock the best guess is the
    most probable of the three label bands. Its expected accuracy is the Bayes
    ceiling for any model of this data.
    """
    from scipy.stats import norm

    sc, ds = SynthConfig(), synthetic_run["ds"]
    data = generate(sc)
    dates = [d.isoformat() for d in next(iter(data.prices.values())).dates]
    col = {t: k for k, t in enumerate(data.tickers)}
    shock = np.zeros_like(data.returns)
    for rec in data.truth:
        shock[dates.index(rec["date"]), col[rec["ticker"]]] += rec["shock"]
    eps, sigma = synthetic_run["mc"].dead_zone, sc.noise
    best = []
    for t in _test_days(ds):
        k = dates.index(ds.dates[t].isoformat()) + 1
        s = shock[k, [col[tk] for tk in ds.tickers]] + sc.drift
        lo, hi = norm.cdf((-eps - s) / sigma), norm.sf((eps - s) / sigma)
        best.extend(np.maximum.reduce([lo, 1 - lo - hi, hi]))
    ceiling = float(np.mean(best))
    se = float(np.sqrt(ceiling * (1 - ceiling) / len(best)))
    print(f"Bayes accuracy ceiling on the test range: {ceiling:.4f} (SE {se:.4f}, n={len(best)})")
    assert ceiling + 5 * se < 0.80


@pytest.mark.slow
def test_train_loss_halves_within_30_epochs(synthetic_run):
    run = synthetic_run
    start, at30 = run["initial_loss"], run["res"].history[29]["train_loss"]
    assert at30 <= 0.5 * start, (start, at30)


def _test_days(ds):
    return [t for t in ds.ranges()["test"] if ds.realized(t)]


@pytest.mark.slow
def test_c7_profitability(synthetic_run):
    ds, params, mc = synthetic_run["ds"], synthetic_run["res"].params, synthetic_run["mc"]
    days = _test_days(ds)
    scores = {t: dict(zip(ds.tickers, forward(ds.snapshot(t), params, mc).score)) for t in days}
    dates = [ds.dates[t] for t in days]
    realized = [ds.realized(t) for t in days]
    ghan = backtest(scores.__getitem__, days, dates, realized, 0.2)
    again = backtest(scores.__getitem__, days, dates, realized, 0.2)
    base = equal_weight_baseline(dates, realized)
    se = standard_error(base.returns)
    margin = ghan.average_return - base.average_return
    ok = (
        margin >= 2 * se
        and ghan.sharpe is not None
        and base.sharpe is not None
        and ghan.sharpe > base.sharpe
        and ghan.summary() == again.summary()
    )
    report(7, ok, f"theta=0.2 avg return {ghan.average_return:.5f} vs baseline {base.average_return:.5f} "
                  f"(margin {margin:.5f} >= 2*SE {2 * se:.5f}); Sharpe {ghan.sharpe:.3f} vs {base.sharpe:.3f}")
    assert ok


@pytest.mark.slow
def test_c8_theta_monotone(synthetic_run):
    ds, params, mc = synthetic_run["ds"], synthetic_run["res"].params, synthetic_run["mc"]
    thetas = np.linspace(-1, 1, 41)
    violations, checks = 0, 0
    days = list(ds.ranges()["test"]) + list(ds.ranges()["val"])
    for t in days:
        sc = dict(zip(ds.tickers, forward(ds.snapshot(t), params, mc).score))
        sels = [select_portfolio(sc, th) for th in thetas]
        for a in range(len(thetas)):
            for b in range(a + 1, len(thetas)):
                checks += 1
                violations += not sels[b] <= sels[a]
    rng = np.random.default_rng(8)
    for _ in range(2000):
        sc = dict(zip("ABCDEFGH", rng.uniform(-1, 1, 8)))
        t1, t2 = np.sort(rng.uniform(-1, 1, 2))
        checks += 1
        violations += not select_portfolio(sc, t2) <= select_portfolio(sc, t1)
    ok = violations == 0
    report(8, ok, f"{checks} (theta1<theta2, day) containment checks, {violations} violations")
    assert ok


# ---------------------------------------------------------------------------
# 9-10: determinism, persistence, degenerate inputs
# ---------------------------------------------------------------------------


def test_c9_determinism_and_persistence(small_dataset, tmp_path):
    ds = small_dataset
    mc = ModelConfig(n_stocks=len(ds.tickers), hidden_dim=8, text_dim=ds.text_dim)
    r = ds.ranges()
    tr, va, te = (dataset_samples(ds, r[k], mc.dead_zone) for k in ("train", "val", "test"))
    csvs = []
    for _ in range(2):
        res = train(tr, va, mc, TrainConfig(epochs=3, batch_size=8, seed=11))
        rows = evaluate_days(te, res.params, res.model_config).rows()
        csvs.append((res.history_csv(), repr(rows)))
    identical = csvs[0] == csvs[1]

    path = tmp_path / "m.ghc"
    save_checkpoint(path, res.params, res.model_config)
    params2, mc2, _ = load_checkpoint(path)
    rng = np.random.default_rng(9)
    cfg = ModelConfig(**{**mc2.to_dict(), "n_stocks": 4})
    p = ModelParams(random_params(cfg, rng))
    save_checkpoint(tmp_path / "r.ghc", p, cfg)
    q, cfg2, _ = load_checkpoint(tmp_path / "r.ghc")
    diffs = 0
    for k in range(100):
        snap = random_snapshot(rng, n_stocks=4, n_events=int(rng.integers(0, 6)), text_dim=ds.text_dim)
        a, b = forward(snap, p, cfg), forward(snap, q, cfg2)
        diffs += a.probs.tobytes() != b.probs.tobytes()
    for t in range(len(ds)):
        diffs += forward(ds.snapshot(t), res.params, mc).probs.tobytes() != forward(ds.snapshot(t), params2, mc2).probs.tobytes()
    ok = identical and diffs == 0
    report(9, ok, f"rerun reports identical={identical}; checkpoint round-trip forward mismatches {diffs} "
                  f"(100 random + {len(ds)} dataset snapshots)")
    assert ok


def test_c10_degenerate_inputs(rng):
    found = {}
    cfg = ModelConfig(n_stocks=3, hidden_dim=4, text_dim=6)
    p = random_params(cfg, rng)
    T = {k: Tensor(v) for k, v in p.items()}

    # zero-hyperedge day: every node takes the self-connection path
    snap = random_snapshot(rng, n_stocks=3, n_events=0)
    X = Tensor(rng.normal(size=(3, 4)))
    Xn, En, _ = layer_forward(0, snap, X, None, Tensor(np.zeros((3, 4))), T, cfg)
    lin = X.data @ p["W.0"]
    found["zero-hyperedge day"] = En is None and np.array_equal(Xn.data, np.where(lin > 0, lin, 0.2 * lin))
    found["zero-hyperedge forward"] = bool(np.all(np.isfinite(forward(snap, p, cfg).probs)))

    # events mentioning no stocks are kept as news but form no hyperedge
    snap = build_snapshot(DAY, [make_event("e1", []), make_event("e2", ["ZZZ"])], np.zeros((3, 8)), ["S0", "S1", "S2"])
    found["events mentioning no stocks"] = snap.n_edges == 0 and snap.n_events == 2

    # one-stock event: hyperedge {event, stock}; alpha over two members, stock beta = 1
    snap = build_snapshot(DAY, [make_event("e1", ["S1"])], np.zeros((3, 8)), ["S0", "S1", "S2"])
    cfg0 = ModelConfig(n_stocks=3, hidden_dim=4, text_dim=0)
    out = forward(snap, random_params(cfg0, rng), cfg0)
    tr = out.attention[0]
    found["single-stock hyperedge"] = (
        snap.n_edges == 1
        and snap.incidence().toarray()[:, 0].tolist() == [0, 1, 0, 1]
        and abs(tr.alpha.sum() - 1) <= 1e-12
        and np.allclose(tr.beta, 1.0)
    )

    # empty portfolios and an undefined Sharpe ratio are flagged, not raised
    realized = [{"S0": 0.01, "S1": -0.01}] * 3
    rep = backtest(lambda t: {"S0": -0.5, "S1": 0.0}, range(3), [DAY] * 3, realized, theta=0.9)
    found["empty portfolio"] = rep.average_return == 0.0 and "empty_portfolio_days" in rep.flags
    found["undefined Sharpe flag"] = rep.sharpe is None and "sharpe_undefined" in rep.flags
    try:
        sharpe([0.01] * 5)
        found["zero-variance Sharpe"] = False
    except UndefinedSharpeError:
        found["zero-variance Sharpe"] = True

    failed = [k for k, v in found.items() if not v]
    ok = not failed
    report(10, ok, f"{len(found)} degenerate cases, failing={failed}")
    assert ok

