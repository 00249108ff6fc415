"""Command-line pipeline: ``ghan {synth,ingest,train,evaluate,backtest,explain,report}``.

Every command that writes files also writes ``manifest.json`` in its output
directory. Errors go to stderr as ``error: <CODE>: <message>`` with a nonzero
exit status.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, fields, replace
from datetime import date
from pathlib import Path

from . import __version__
from .container import FORMAT_VERSION as CONTAINER_VERSION
from .container import ContainerError
from .dataset import DATASET_VERSION, Dataset, IngestConfig, assemble_dataset
from .evaluate import (
    backtest,
    equal_weight_baseline,
    format_table,
    selection_log_rows,
    standard_error,
    to_csv,
)
from .explain import FeatureGrouping, ExplainError, exact_shapley, model_score_fn, report_table, sampled_shapley
from .hypergraph import HypergraphError
from .ingest import IngestError, load_embeddings, load_news, load_prices
from .model import CHECKPOINT_VERSION, ModelConfig, ModelError, forward, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate, write_synth
from .train import SplitSpec, TrainConfig, TrainingDivergedError, dataset_samples, evaluate_days, train

CONFIG_SECTIONS = {
    "synth": SynthConfig,
    "ingest": IngestConfig,
    "split": SplitSpec,
    "train": TrainConfig,
}
MODEL_KEYS = {"hidden_dim", "layers", "leaky_slope", "dead_zone", "seed"}
BACKTEST_KEYS = {"theta", "thetas", "risk_free", "range"}
EXPLAIN_KEYS = {"mode", "n_samples", "seed", "groups"}


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config and manifest
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError("E_IO", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError("E_CONFIG", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise CLIError("E_CONFIG", f"{path}: top level must be an object")
    allowed = {
        **{k: {f.name for f in fields(v)} for k, v in CONFIG_SECTIONS.items()},
        "model": MODEL_KEYS,
        "backtest": BACKTEST_KEYS,
        "explain": EXPLAIN_KEYS,
    }
    for section, body in cfg.items():
        if section not in allowed:
            raise CLIError("E_CONFIG", f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise CLIError("E_CONFIG", f"config section {section!r} must be an object")
        extra = set(body) - allowed[section]
        if extra:
            raise CLIError("E_CONFIG", f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")
    return cfg


def _section(cfg, name, **overrides):
    cls = CONFIG_SECTIONS[name]
    values = dict(cfg.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError("E_CONFIG", f"[{name}] {exc}") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, artifacts: dict) -> Path:
    manifest = {
        "tool": "ghan",
        "version": __version__,
        "formats": {"container": CONTAINER_VERSION, "checkpoint": CHECKPOINT_VERSION, "dataset": DATASET_VERSION},
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        "artifacts": {k: {"path": Path(p).name, "sha256": sha256_file(p)} for k, p in sorted(artifacts.items())},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("E_IO", f"{what} not found: {p}")
    return p


def _load_run(args):
    ds = Dataset.load(_require(args.dataset, "dataset"))
    params, mconfig, extra = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if extra.get("layout_digest") != ds.layout_digest():
        raise CLIError(
            "E_INCOMPATIBLE",
            "checkpoint was trained on a different feature layout than this dataset (layout digest mismatch)",
        )
    return ds, params, mconfig


def _range(ds, name):
    ranges = ds.ranges()
    if name not in ranges:
        raise CLIError("E_CONFIG", f"unknown range {name!r}; choose from {', '.join(ranges)}")
    return ranges[name]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    sc = _section(cfg, "synth", seed=args.seed)
    out = _out_dir(args.out)
    paths = write_synth(generate(sc), out)
    write_manifest(out, "synth", {"synth": asdict(sc)}, sc.seed, {}, paths)
    print(f"wrote synthetic dataset ({sc.n_stocks} stocks, {sc.n_days} days) to {out}")


def cmd_ingest(args, cfg):
    ic = _section(cfg, "ingest")
    spec = _section(cfg, "split")
    out = _out_dir(args.out)
    prices = load_prices(_require(args.prices, "prices file"), min_bars=ic.min_bars)
    events = load_news(_require(args.news, "news file"))
    store = None
    inputs = {"prices": Path(args.prices), "news": Path(args.news)}
    if args.embeddings:
        store = load_embeddings(_require(args.embeddings, "embeddings file"))
        inputs["embeddings"] = Path(args.embeddings)
    ds = assemble_dataset(prices, events, store, ic, spec)
    path = out / "dataset.ghd"
    ds.save(path)
    write_manifest(out, "ingest", {"ingest": asdict(ic), "split": asdict(spec)}, None, inputs, {"dataset": path})
    a, b, c = ds.split_counts
    print(f"dataset: {len(ds.tickers)} stocks, {len(ds)} days (train {a}, val {b}, test {c}) -> {path}")


def _model_config(cfg, ds, seed_override=None) -> ModelConfig:
    m = dict(cfg.get("model", {}))
    if seed_override is not None:
        m["seed"] = seed_override
    try:
        return ModelConfig(n_stocks=len(ds.tickers), text_dim=ds.text_dim, feature_dim=ds.feature_dim, **m)
    except (TypeError, ValueError) as exc:
        raise CLIError("E_CONFIG", f"[model] {exc}") from None


def cmd_train(args, cfg):
    ds = Dataset.load(_require(args.dataset, "dataset"))
    tc = _section(cfg, "train", epochs=args.epochs, seed=args.seed, threads=args.threads)
    mc = _model_config(cfg, ds, args.seed)
    r = ds.ranges()
    tr = dataset_samples(ds, r["train"], mc.dead_zone)
    va = dataset_samples(ds, r["val"], mc.dead_zone)

    def log(rec):
        if not args.quiet:
            print(
                f"epoch {rec['epoch']:4d}  train_loss {rec['train_loss']:.5f}  val_macro_f1 {rec['val_macro_f1']:.4f}",
                file=sys.stderr,
            )

    result = train(tr, va, mc, tc, on_epoch=log)
    out = _out_dir(args.out)
    ckpt = out / "checkpoint.ghc"
    save_checkpoint(
        ckpt,
        result.params,
        result.model_config,
        {"layout_digest": ds.layout_digest(), "layout": ds.layout(), "best_epoch": result.best_epoch},
    )
    hist = out / "history.csv"
    hist.write_text(result.history_csv(), encoding="utf-8")
    write_manifest(
        out,
        "train",
        {"train": asdict(tc), "model": result.model_config.to_dict()},
        tc.seed,
        {"dataset": Path(args.dataset)},
        {"checkpoint": ckpt, "history": hist},
    )
    print(f"best epoch {result.best_epoch}; checkpoint -> {ckpt}")


def cmd_evaluate(args, cfg):
    ds, params, mc = _load_run(args)
    days = _range(ds, args.range)
    rep = evaluate_days(dataset_samples(ds, days, mc.dead_zone), params, mc)
    rows = rep.rows()
    out = _out_dir(args.out)
    path = out / "metrics.csv"
    path.write_text(to_csv(rows, ["metric", "class", "value"]), encoding="utf-8")
    write_manifest(
        out,
        "evaluate",
        {"range": args.range},
        mc.seed,
        {"dataset": Path(args.dataset), "checkpoint": Path(args.checkpoint)},
        {"metrics": path},
    )
    sys.stdout.write(format_table(rows, ["metric", "class", "value"]))


def _parse_thetas(args, cfg) -> list[float]:
    bt = cfg.get("backtest", {})
    if args.thetas:
        try:
            return [float(x) for tok in args.thetas for x in tok.split(",") if x.strip()]
        except ValueError:
            raise CLIError("E_CONFIG", f"--thetas must be numbers, got {' '.join(args.thetas)!r}") from None
    if args.theta is not None:
        return [args.theta]
    if "thetas" in bt:
        return [float(x) for x in bt["thetas"]]
    return [float(bt.get("theta", 0.2))]


def cmd_backtest(args, cfg):
    ds, params, mc = _load_run(args)
    bt = cfg.get("backtest", {})
    rf = args.risk_free if args.risk_free is not None else float(bt.get("risk_free", 0.0))
    thetas = _parse_thetas(args, cfg)
    for th in thetas:
        if not -1.0 <= th <= 1.0:
            raise CLIError("E_CONFIG", f"theta must lie in [-1, 1], got {th}")
    days = [t for t in _range(ds, args.range or bt.get("range", "test")) if ds.realized(t)]
    if not days:
        raise CLIError("E_DATA", "no days with realised next-day returns in the selected range")
    scores = {t: dict(zip(ds.tickers, forward(ds.snapshot(t), params, mc).score)) for t in days}
    dates = [ds.dates[t] for t in days]
    realized = [ds.realized(t) for t in days]

    out = _out_dir(args.out)
    artifacts = {}
    rows = []
    for th in thetas:
        rep = backtest(scores.__getitem__, days, dates, realized, th, rf)
        rows.append({"portfolio": "ghan", **rep.summary()})
        log = out / f"selections_theta{th:+.3f}.csv"
        log.write_text(
            to_csv(selection_log_rows(rep), ["date", "n_selected", "selected", "portfolio_return"]), encoding="utf-8"
        )
        artifacts[f"selections_{th:+.3f}"] = log
    base = equal_weight_baseline(dates, realized, rf)
    rows.append({"portfolio": "equal_weight", **base.summary(), "theta": None})
    cols = [
        "portfolio",
        "theta",
        "days",
        "empty_days",
        "mean_selected",
        "average_daily_return",
        "return_std",
        "sharpe",
        "flags",
    ]
    path = out / "backtest.csv"
    path.write_text(to_csv(rows, cols), encoding="utf-8")
    artifacts["backtest"] = path
    write_manifest(
        out,
        "backtest",
        {"thetas": thetas, "risk_free": rf, "range": args.range or bt.get("range", "test"),
         "baseline_standard_error": standard_error(base.returns) if len(days) > 1 else None},
        mc.seed,
        {"dataset": Path(args.dataset), "checkpoint": Path(args.checkpoint)},
        artifacts,
    )
    sys.stdout.write(format_table(rows, cols))


def cmd_explain(args, cfg):
    ds, params, mc = _load_run(args)
    ex = cfg.get("explain", {})
    mode = args.mode or ex.get("mode", "exact")
    n = args.n or int(ex.get("n_samples", 2000))
    seed = args.seed if args.seed is not None else int(ex.get("seed", 0))
    try:
        grouping = FeatureGrouping(tuple(ex["groups"])) if "groups" in ex else FeatureGrouping()
    except ExplainError as exc:
        raise CLIError("E_CONFIG", str(exc)) from None
    try:
        day = date.fromisoformat(args.date)
    except ValueError:
        raise CLIError("E_CONFIG", f"--date must be YYYY-MM-DD, got {args.date!r}") from None
    if day not in ds.dates:
        raise CLIError("E_DATA", f"{day.isoformat()} is not a trading day in the dataset")
    snap = ds.snapshot(ds.dates.index(day))
    target = None if args.stock in (None, "mean") else args.stock
    fn = model_score_fn(params, mc)
    if mode == "exact":
        rep = exact_shapley(fn, snap, grouping, target)
    elif mode == "sampled":
        rep = sampled_shapley(fn, snap, grouping, target, n, seed)
    else:
        raise CLIError("E_CONFIG", f"--mode must be exact or sampled, got {mode!r}")
    out = _out_dir(args.out)
    path = out / "shap.csv"
    path.write_text(rep.to_csv(), encoding="utf-8")
    write_manifest(
        out,
        "explain",
        {"mode": mode, "n_samples": n if mode == "sampled" else None, "stock": rep.target, "date": day.isoformat(),
         "groups": list(grouping.names)},
        seed if mode == "sampled" else None,
        {"dataset": Path(args.dataset), "checkpoint": Path(args.checkpoint)},
        {"shap": path},
    )
    sys.stdout.write(report_table(rep))


def cmd_report(args, cfg):
    run = _require(args.run_dir, "run directory")
    manifest_path = _require(run / "manifest.json", "manifest")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    print(f"command: {manifest['command']}  (ghan {manifest['version']})")
    stale = []
    for name, rec in manifest["inputs"].items():
        p = Path(rec["path"])
        state = "missing" if not p.exists() else ("ok" if sha256_file(p) == rec["sha256"] else "CHANGED")
        if state != "ok":
            stale.append(name)
        print(f"input {name}: {rec['path']} [{state}]")
    for name, rec in manifest["artifacts"].items():
        p = run / rec["path"]
        if p.suffix == ".csv" and p.exists():
            with open(p, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            if rows:
                print(f"\n{name} ({rec['path']})")
                sys.stdout.write(format_table([{k: _number(v) for k, v in r.items()} for r in rows], list(rows[0])))
    if stale:
        raise CLIError("E_STALE", f"inputs changed or missing since the run: {', '.join(stale)}")


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghan", description="Geometric hypergraph attention network pipeline")
    p.add_argument(
        "--version",
        action="version",
        version=f"ghan {__version__} (container format {CONTAINER_VERSION}, "
        f"checkpoint format {CHECKPOINT_VERSION}, dataset format {DATASET_VERSION})",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: synth, ingest, split, model, train, backtest, explain)")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("ingest", parents=[common], help="assemble a dataset archive from raw files")
    s.add_argument("--prices", required=True)
    s.add_argument("--news", required=True)
    s.add_argument("--embeddings")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")

    for name, help_ in (
        ("evaluate", "classification metrics"),
        ("backtest", "threshold portfolio backtest"),
        ("explain", "Shapley attributions"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--dataset", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        if name == "evaluate":
            s.add_argument("--range", default="test", help="train, val, test or all")
        if name == "backtest":
            s.add_argument("--range", default=None, help="train, val, test or all (default test)")
            s.add_argument("--theta", type=float)
            s.add_argument("--thetas", nargs="+", help="threshold sweep, e.g. --thetas -0.2 0 0.2 0.4")
            s.add_argument("--risk-free", type=float, dest="risk_free")
        if name == "explain":
            s.add_argument("--stock", help="ticker to explain; 'mean' or omitted averages over stocks")
            s.add_argument("--date", required=True)
            s.add_argument("--mode", choices=["exact", "sampled"])
            s.add_argument("--n", type=int, help="samples for sampled mode")
            s.add_argument("--seed", type=int)

    s = sub.add_parser("report", parents=[common], help="show a run's manifest and report tables")
    s.add_argument("run_dir", type=Path)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "explain": cmd_explain,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            COMMANDS[args.command](args, cfg)
    except CLIError as exc:
        return _fail(exc.code, str(exc))
    except (IngestError, HypergraphError) as exc:
        return _fail("E_DATA", str(exc))
    except ContainerError as exc:
        return _fail("E_FORMAT", str(exc))
    except ModelError as exc:
        return _fail("E_INCOMPATIBLE", str(exc))
    except TrainingDivergedError as exc:
        return _fail("E_DIVERGED", str(exc))
    except (ExplainError, ValueError) as exc:
        return _fail("E_INVALID", str(exc))
    except OSError as exc:
        return _fail("E_IO", f"{exc.strerror or exc}: {exc.filename or ''}".rstrip(": "))
    return 0


def _fail(code: str, message: str) -> int:
    print(f"error: {code}: {message.splitlines()[0] if message else code}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
