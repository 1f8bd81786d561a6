"""Command-line entry point: ``dspr generate | train | eval | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  ``DSPR_SEED``
overrides ``--seed``; ``--config file.json`` may supply any flag (explicit
flags win).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import (CheckpointError, ConfigError, ContractError, DivergenceError, ParseError,
                     SchemaError, ShapeError)
from .metrics import regime_split, write_reports
from .model import VARIANTS
from .report import build_report, write_delay_profile, write_matrix_csv
from .training import (TrainConfig, delay_profile_rows, evaluate_batch, model_from_checkpoint,
                       predict, train)

log = logging.getLogger("dspr")

RUNTIME_ERRORS = (CheckpointError, ConfigError, ContractError, DivergenceError, ParseError,
                  SchemaError, ShapeError, OSError)

# flags each command needs, whether given on the command line or in a config file
_REQUIRED = {"generate": ("out",), "train": ("data", "out"), "eval": ("checkpoint", "data", "out"),
             "report": ("runs", "out")}


# -- helpers ---------------------------------------------------------------------------


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_regimes(text: str) -> list[tuple[float, int]]:
    """``"1.0:12,2.0:4"`` -> [(1.0, 12), (2.0, 4)]."""
    out = []
    for part in text.split(","):
        try:
            v, tau = part.split(":")
            out.append((float(v), int(tau)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad regime {part!r}; expected LEVEL:DELAY") from None
    return out


def _seed(args) -> int:
    env = os.environ.get("DSPR_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DSPR_SEED must be an integer, got {env!r}") from None
    return args.seed


# -- commands ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    seed = _seed(args)
    if args.kind == "transport_delay":
        kw = {"T": args.T, "seed": seed, "noise_std": args.noise_std}
        if args.lag_regimes:
            kw["lag_regimes"] = [tuple(r) for r in args.lag_regimes]
        ds = D.gen_transport_delay(D.TransportDelayConfig(**kw))
    else:
        ds = D.gen_conservation(D.ConservationConfig(T=args.T, seed=seed, delay=args.delay,
                                                     leak=args.leak, n_inflows=args.n_inflows,
                                                     noise_std=args.noise_std or 0.0))
    out = _prepare_out(args.out, args.force)
    ds.save(out)
    log.info("wrote %s (%d steps x %d variables)", out, ds.n_steps, ds.n_vars)
    return 0


def _model_kw(args) -> dict:
    kw = {}
    for k in ("d_model", "trend_d_model", "trend_depth", "tau_max", "ma_kernel", "n_heads"):
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    return kw


def _write_run_outputs(out: Path, model, sp: D.Splits, ds: D.SeriesDataset) -> None:
    pt = predict(model, sp.test)
    if "tau" in pt:
        rows = [r for r in delay_profile_rows(pt["tau"], sp.test) if r[1] == sp.lookback - 1]
        write_delay_profile(out / "delay_profile.csv", rows)
        write_matrix_csv(out / "adjacency.csv", pt["A_dynamic_mean"], ds.names)


def cmd_train(args) -> int:
    ds = D.SeriesDataset.load(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=_seed(args),
                      clip_norm=args.clip_norm, patience=args.patience, variant=args.variant,
                      steps_per_epoch=args.steps_per_epoch, gate_lr=args.gate_lr)
    sp = D.split_windows(ds, args.lookback, args.horizon)
    out = _prepare_out(args.out, args.force)
    ckpt = None if args.variant == "arx" else out / "model.ckpt"
    rec, model = train(args.variant, ds, cfg, model_kw=_model_kw(args), splits=sp,
                       checkpoint_path=ckpt, log=log.info)
    if ckpt is not None:
        rec.checkpoint = ckpt.name      # relative, so the run directory can move
        _write_run_outputs(out, model, sp, ds)
    rec.save(out / "run.json")
    log.info("test MAE %.5f (best epoch %d); wall time %.1fs", rec.metrics["test"]["MAE"],
             rec.best_epoch, rec.wall_time)
    return 0


def _shape_diff(conf: dict, ds: D.SeriesDataset, lookback: int) -> list[str]:
    m = conf["model"]
    diffs = []
    if lookback != m["lookback"]:
        diffs.append(f"lookback: checkpoint expects {m['lookback']}, requested {lookback}")
    if ds.n_vars != m["n_vars"]:
        diffs.append(f"variables: checkpoint expects {m['n_vars']}, data has {ds.n_vars}")
    if conf.get("names") and conf["names"] != ds.names:
        diffs.append(f"names: checkpoint {conf['names']}, data {ds.names}")
    if diffs:
        diffs.insert(0, f"input X: expected (B, {m['lookback']}, {m['n_vars']}), "
                        f"found (B, {lookback}, {ds.n_vars})")
    return diffs


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {args.checkpoint}")
    model, conf = model_from_checkpoint(args.checkpoint)
    ds = D.SeriesDataset.load(args.data)
    lookback = args.lookback if args.lookback is not None else model.cfg.lookback
    diffs = _shape_diff(conf, ds, lookback)
    if diffs:
        raise ConfigError("checkpoint/data mismatch:\n  " + "\n  ".join(diffs))
    sp = D.split_windows(ds, lookback, model.cfg.horizon,
                         normalizer=D.Normalizer.from_json(conf["normalizer"]))
    batch = {"train": sp.train, "val": sp.val, "test": sp.test}[args.split]
    out = _prepare_out(args.out, args.force)
    p = predict(model, batch)
    reports = evaluate_batch(p["y_hat"], batch, regimes=args.regimes, segment=args.tda_segment,
                             delta=args.tda_delta)
    write_reports(reports, out / "metrics")
    if args.regimes:
        part = regime_split(batch.sample_std)
        label = np.empty(len(batch), dtype=object)
        for name, idx in part.groups().items():
            label[idx] = name
        with open(out / "regime_assignment.csv", "w") as fh:
            fh.write("sample,start,sample_std,regime\n")
            for i in range(len(batch)):
                fh.write(f"{i},{int(batch.start[i])},{float(batch.sample_std[i])!r},{label[i]}\n")
    if "tau" in p:
        write_delay_profile(out / "delay_profile.csv", delay_profile_rows(p["tau"], batch))
        write_matrix_csv(out / "adjacency.csv", p["A_dynamic_mean"], ds.names)
    log.info("%s MAE %.5f on %d windows", args.split, reports[-1].MAE, len(batch))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
    written = build_report(args.runs, out)
    for k, v in written.items():
        log.info("%s -> %s", k, v)
    return 0


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dspr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file supplying defaults for any flag")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
        sp.add_argument("--out")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--kind", choices=["transport_delay", "conservation"], default="transport_delay")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=int, default=20000)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--lag-regimes", type=parse_regimes, help="LEVEL:DELAY pairs, e.g. 1.0:12,2.0:4")
    g.add_argument("--delay", type=int, default=8)
    g.add_argument("--leak", type=float, default=0.05)
    g.add_argument("--n-inflows", type=int, default=2)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant and write a run directory")
    common(t)
    t.add_argument("--data")
    t.add_argument("--variant", choices=list(VARIANTS), default="full")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--gate-lr", type=float)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--lookback", type=int, default=24)
    t.add_argument("--horizon", type=int, default=4)
    t.add_argument("--d-model", type=int)
    t.add_argument("--trend-d-model", type=int)
    t.add_argument("--trend-depth", type=int)
    t.add_argument("--tau-max", type=int)
    t.add_argument("--ma-kernel", type=int)
    t.add_argument("--n-heads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--regimes", action="store_true", help="add per-volatility-tertile reports")
    e.add_argument("--lookback", type=int)
    e.add_argument("--tda-segment", type=int, default=4,
                   help="TDA segment length (shrunk to horizon//2 when larger)")
    e.add_argument("--tda-delta", type=float,
                   help="TDA significance threshold (default: 0.1 * std of the targets)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tables and SVG figures from run directories")
    common(r)
    r.add_argument("--runs")
    r.set_defaults(func=cmd_report)
    return p


def _subparser(parser, name):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    sp = _subparser(parser, args.command)
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            sp.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(conf, dict):
            sp.error("config file must hold a JSON object")
        known = {a.dest for a in sp._actions}
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
        unknown = sorted(set(conf) - known)
        if unknown:
            sp.error(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**conf)
        args = parser.parse_args(argv)       # explicit flags override config values
    missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        sp.error(f"the following arguments are required: {', '.join(missing)}")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"dspr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
