"""Command-line entry point: ``pipebench <subcommand> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import torch

from . import evalreport, gradcheck, pipelines
from .config import Resolved, convert_train_value, parse_overrides, resolve_config
from .errors import ConfigError, DataError, PipebenchError
from .models import images_to_input
from .scenegen import generate_dataset, load_images, load_manifest

log = logging.getLogger("pipebench")

STAGES_FOR = {
    "train-cnn": ("cnn",),
    "train-transformer": ("transformer",),
    "train-chained": ("cnn", "transformer"),
    "train-composite": ("composite",),
    "train-baseline": ("baseline",),
    "sweep": None,  # decided by --regime
}
REGIME_FOR = {
    "train-cnn": "cnn",
    "train-transformer": "transformer",
    "train-chained": "chained",
    "train-composite": "composite",
    "train-baseline": "baseline",
}


def thread_cap() -> int | None:
    raw = os.environ.get("PIPEBENCH_THREADS")
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PIPEBENCH_THREADS must be an integer, got {raw!r}") from None


def _workers(requested: int, serial: bool) -> int:
    if serial:
        return 1
    cap = thread_cap()
    return min(requested, cap) if cap else requested


def _resolve(args, stages) -> Resolved:
    overrides = parse_overrides(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "data", None):
        overrides["data.dir"] = args.data
    return resolve_config(args.config, overrides, stages) if stages else resolve_config(args.config, overrides)


def _out(args, cfg: Resolved) -> Path:
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return Path(out)


def _manifest(cfg: Resolved):
    if not cfg.data_dir:
        raise ConfigError("no dataset: pass --data or set data.dir")
    root = Path(cfg.data_dir)
    if not (root / "train.csv").exists():
        raise DataError(f"no dataset manifests under {root}")
    return load_manifest(root)


def _coords(cfg: Resolved, tr: pipelines.TrainConfig):
    if tr.coord_samples <= 0:
        return None
    return pipelines.coordinate_training_set(cfg.dataset, tr.coord_samples, cfg.dataset.n_eval, cfg.dataset.n_test)


def cmd_generate(args) -> int:
    cfg = _resolve(args, ())
    out = _out(args, cfg)
    workers = _workers(cfg.workers, args.serial)
    m = generate_dataset(cfg.dataset, out, workers=workers)
    (out / "config").write_text(cfg.dump())
    log.info("wrote %d/%d/%d samples to %s", len(m.train), len(m.eval), len(m.test), out)
    print(out)
    return 0


def cmd_train(args) -> int:
    stages = STAGES_FOR[args.command]
    regime = REGIME_FOR[args.command]
    cfg = _resolve(args, stages)
    coords = _coords(cfg, cfg.train["transformer"]) if regime in ("transformer", "chained") else None
    # the transformer stage alone needs no images when it trains on coordinate-only scenes
    manifest = coords if regime == "transformer" and coords is not None else _manifest(cfg)
    store = pipelines.RunStore(_out(args, cfg))
    if regime == "chained":
        train_cfg = (cfg.train["cnn"], cfg.train["transformer"])
        seed = train_cfg[0].seed
    else:
        train_cfg = cfg.train[regime]
        seed = train_cfg.seed
    run_id, writer = store.new_run(regime, cfg.values, seed)
    (writer.dir / "config").write_text(cfg.dump())
    record, _ = pipelines.run_regime(regime, train_cfg, manifest, writer, run_id, coords)
    log.info("%s finished: %s=%.5f", run_id, record.metric_name, record.final_metric)
    print(writer.dir)
    return 0


def _nearest_predicted(row) -> tuple[float, float]:
    pts = [(float(row[i]), float(row[i + 1])) for i in range(0, len(row), 2)]
    *squares, tri = pts
    d = [(x - tri[0]) ** 2 + (y - tri[1]) ** 2 for x, y in squares]
    return squares[d.index(min(d))]


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "result.json").exists():
        raise DataError(f"{run_dir} is not a run directory")
    rec = pipelines.RunRecord.from_dir(run_dir)
    cfg_file = run_dir / "config"
    overrides = {"data.dir": args.data} if args.data else {}
    cfg = resolve_config(cfg_file if cfg_file.exists() else None, overrides)
    coords = _coords(cfg, cfg.train["transformer"]) if rec.regime == "transformer" and not args.data else None
    manifest = coords if coords is not None else _manifest(cfg)
    records = manifest.split(args.split)
    if rec.regime in ("chained",):
        cnn = pipelines.load_run_model(run_dir, "cnn")
        tr = pipelines.load_run_model(run_dir, "transformer")
        predict = pipelines.chained_predictor(cnn, tr, cfg.train["transformer"].decimals, manifest.root)
    elif rec.regime == "transformer":
        stage = pipelines.SymbolicStage(pipelines.load_run_model(run_dir, "transformer"), cfg.train["transformer"].decimals)
        predict = lambda recs: stage.predict_values(pipelines._context_values(recs))  # noqa: E731
    elif rec.regime == "baseline":
        cnn = pipelines.load_run_model(run_dir, "cnn")

        def predict(recs):
            return [tuple(p) for p in pipelines.cnn_predict(cnn, load_images(recs, manifest.root))]
    elif rec.regime == "composite":
        predict = pipelines.composite_predictor(pipelines.load_run_model(run_dir, "composite"), manifest.root)
    elif rec.regime == "cnn":
        cnn = pipelines.load_run_model(run_dir, "cnn")
        # score the stage through exact selection: its predicted square nearest its predicted triangle
        def predict(recs):
            out = pipelines.cnn_predict(cnn, load_images(recs, manifest.root))
            return [_nearest_predicted(row) for row in out]
    else:
        raise DataError(f"unknown regime {rec.regime!r} in {run_dir}")
    result = evalreport.evaluate(predict, records)
    out = Path(args.out) if args.out else run_dir / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "regime": rec.regime, **result.to_dict(), "wall_seconds": rec.wall_seconds,
        "label_cost": rec.label_cost.to_dict(), "run_id": rec.run_id, "split": args.split,
    }
    (out / "result.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


def _parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not of the form key=v1,v2,...")
        k, vals = item.split("=", 1)
        grid[k.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
    if not grid:
        raise ConfigError("sweep needs at least one --grid entry")
    return grid


def cmd_sweep(args) -> int:
    regime = args.regime
    stages = ("cnn", "transformer") if regime == "chained" else (regime,)
    cfg = _resolve(args, stages)
    grid = {k: [convert_train_value(k, v) for v in vals] for k, vals in _parse_grid(args.grid).items()}
    base = (cfg.train["cnn"], cfg.train["transformer"]) if regime == "chained" else cfg.train[regime]
    manifest = _manifest(cfg)
    coords = _coords(cfg, cfg.train["transformer"]) if regime in ("transformer", "chained") else None
    store = pipelines.RunStore(_out(args, cfg))
    workers = _workers(args.workers or cfg.workers, args.serial)
    records = pipelines.sweep(grid, regime, base, manifest, store, cap=args.cap, workers=workers,
                              serial=args.serial, max_runs=args.max_runs, coords=coords)
    for r in records:
        print(json.dumps({"run_id": r.run_id, "status": r.status, "final_metric": r.final_metric,
                          "point": r.config.get("sweep_point")}, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    runs = pipelines.RunStore(args.runs).runs()
    baseline = None
    if args.baseline:
        try:
            baseline = evalreport.read_baseline(args.baseline)
        except OSError as e:
            raise DataError(f"cannot read baseline {args.baseline}: {e}") from None
    if not runs and baseline is None:
        raise DataError(f"no finished runs under {args.runs}")
    table = evalreport.build_report(runs, args.out, baseline)
    print(evalreport.table_to_csv(table), end="")
    return 0


def cmd_grad_check(args) -> int:
    checks = {"dense": gradcheck.check_dense, "cnn": gradcheck.check_cnn, "transformer": gradcheck.check_transformer}
    names = list(checks) if args.model == "all" else [args.model]
    for name in names:
        res = checks[name](epsilon=args.epsilon)
        print(json.dumps({"model": name, "max_rel_error": res.max_rel_error, "probed": res.probed,
                          "skipped": res.skipped}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipebench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--serial", action="store_true", help="single-threaded deterministic execution")
        if data:
            sp.add_argument("--data", help="dataset directory (overrides data.dir)")
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    common(sub.add_parser("generate", help="render the synthetic dataset"), data=False)
    for name in REGIME_FOR:
        common(sub.add_parser(name, help=f"train the {REGIME_FOR[name]} regime"))

    e = sub.add_parser("eval", help="score a finished run on a dataset split")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=["train", "eval", "test"])
    e.add_argument("--out")

    s = sub.add_parser("sweep", help="grid search over training hyperparameters")
    common(s)
    s.add_argument("--regime", required=True, choices=list(pipelines.REGIMES))
    s.add_argument("--grid", action="append", default=[], help="key=v1,v2,... (repeatable)")
    s.add_argument("--max-runs", type=int)
    s.add_argument("--cap", type=int, default=64)
    s.add_argument("--workers", type=int)

    r = sub.add_parser("report", help="comparison table, plot and markdown report")
    r.add_argument("--runs", required=True)
    r.add_argument("--baseline")
    r.add_argument("--out", required=True)

    g = sub.add_parser("grad-check", help="finite-difference check of the differentiable core")
    g.add_argument("--model", default="all", choices=["all", "dense", "cnn", "transformer"])
    g.add_argument("--epsilon", type=float, default=1e-3)
    return p


HANDLERS = {
    "generate": cmd_generate, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report,
    "grad-check": cmd_grad_check, **{k: cmd_train for k in REGIME_FOR},
}


def _fail(kind: str, code: int, msg: str, detail: str | None = None) -> int:
    one_line = msg.replace("\n", " ").replace('"', "'")
    print(f'pipebench: error kind={kind} code={code} msg="{one_line}"', file=sys.stderr)
    if detail:
        print(detail, file=sys.stderr, end="" if detail.endswith("\n") else "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cap = thread_cap()
        if getattr(args, "serial", False):
            torch.set_num_threads(1)
        elif cap:
            torch.set_num_threads(cap)
        return HANDLERS[args.command](args)
    except PipebenchError as e:
        return _fail(e.kind, e.exit_code, str(e))
    except Exception as e:
        return _fail("internal", 5, f"{type(e).__name__}: {e}", traceback.format_exc())


if __name__ == "__main__":
    sys.exit(main())
