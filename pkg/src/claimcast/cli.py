"""``claimcast`` command line: simulate, train, forecast and compare.

Every command writes into an output directory holding its files plus one
``manifest.txt``. Files are written to a temporary name and renamed into
place, so an interrupted run never leaves a half-written CSV behind.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import chainladder as cl
from . import data, forecast, network, training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

STATS_FILE = "stats.txt"
CONFIG_FILE = "config.txt"
MANIFEST_FILE = "manifest.txt"
CLAIMS_FILE = "claims.csv"
DEFAULT_DRAWS = {"point": 1, "paths": 100, "summary": 1000}

# Aggregate figures on a 500,000-claim simulated book, quoted for scale.
REFERENCE_FOOTER = (
    "reference (500,000 simulated claims, 10-model ensemble): "
    "actual 109,216,388; chain ladder 108,040,572 (-1.08%); model 102,502,710 (-6.15%)"
)


class DataError(Exception):
    """Input that fails validation; reported with exit code 3."""


# -- output plumbing ------------------------------------------------------

@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling of ``path``; rename it over ``path`` on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_rows(path: Path, header, rows) -> None:
    with atomic_path(path) as tmp:
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def write_text(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def _fmt(x) -> str:
    return repr(float(x))


def write_manifest(out: Path, command: str, args, started: float, outputs, inputs=(),
                   seeds=(), config: str = "") -> None:
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"argv = {' '.join(sys.argv[1:])}",
        f"seeds = {','.join(str(s) for s in seeds)}",
        f"inputs = {','.join(str(p) for p in inputs)}",
        f"outputs = {','.join(sorted(str(p) for p in outputs))}",
        f"wall_time_s = {time.perf_counter() - started:.3f}",
    ]
    lines += [f"config.{line.strip()}" for line in config.splitlines() if line.strip()]
    write_text(out / MANIFEST_FILE, "\n".join(lines) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise DataError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_claims(path) -> list[data.ClaimRecord]:
    if not Path(path).is_file():
        raise DataError(f"claims file not found: {path}")
    claims = data.load_claims_csv(path)
    if not claims:
        raise DataError(f"{path}: no claims")
    return claims


def _split(claims, cutoff):
    try:
        return data.split_by_cutoff(claims, cutoff)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# -- commands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    claims = data.simulate_claims(args.n, seed=args.seed)
    with atomic_path(out / CLAIMS_FILE) as tmp:
        data.write_claims_csv(claims, tmp)
    write_manifest(out, "simulate", args, started, [CLAIMS_FILE], seeds=[args.seed],
                   config=f"n = {args.n}\n")
    print(f"wrote {len(claims)} claims to {out / CLAIMS_FILE}")
    return EXIT_OK


def _train_config(args) -> training.TrainConfig:
    text = ""
    if args.config:
        if not Path(args.config).is_file():
            raise DataError(f"config file not found: {args.config}")
        text = Path(args.config).read_text()
    try:
        return training.TrainConfig.from_text(
            text, seed=args.seed, max_epochs=args.epochs, minibatch=args.minibatch, lr0=args.lr)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad config: {exc}") from exc


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = _train_config(args)
    claims = _load_claims(args.claims)
    train, _ = _split(claims, args.cutoff)
    samples = data.expand_training_samples(train)
    if len(samples) < 2:
        raise DataError("fewer than two training samples at this cutoff")
    stats = data.fit_normalization(samples)
    inputs = data.transform(samples, stats)
    out = _out_dir(args.out)
    members = training.train_ensemble(inputs, config, stats.vocab_sizes(), n_models=args.ensemble,
                                      n_jobs=args.threads)
    outputs = [STATS_FILE, CONFIG_FILE]
    write_text(out / STATS_FILE, stats.to_text())
    write_text(out / CONFIG_FILE, config.to_text())
    for m, (model, log) in enumerate(members):
        ckpt, log_name = f"member_{m:02d}.ckpt", f"train_log_{m:02d}.csv"
        with atomic_path(out / ckpt) as tmp:
            network.save_checkpoint(model, tmp, {"vocab_hash": stats.vocab_hash(),
                                                 "cutoff": args.cutoff, "member": m,
                                                 "stop_reason": log.stop_reason,
                                                 "best_epoch": log.best_epoch})
        with atomic_path(out / log_name) as tmp:
            log.write_csv(tmp)
        outputs += [ckpt, log_name]
        print(f"member {m}: {log.stop_reason} after {log.epochs[-1]} epochs, "
              f"best val loss {log.val_loss[log.best_epoch]:.4f} at epoch {log.best_epoch}")
    write_manifest(out, "train", args, started, outputs, inputs=[args.claims],
                   seeds=[config.seed + m for m in range(args.ensemble)], config=config.to_text())
    return EXIT_OK


def _checkpoint_paths(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            members = sorted(p.glob("member_*.ckpt"))
            if not members:
                raise DataError(f"no checkpoints in {p}")
            found += members
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"checkpoint not found: {p}")
    return found


def _load_models(paths, stats_path=None):
    ckpts = _checkpoint_paths(paths)
    try:
        models = [network.load_checkpoint(p) for p in ckpts]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable checkpoint: {exc}") from exc
    stats_path = Path(stats_path) if stats_path else ckpts[0].parent / STATS_FILE
    if not stats_path.is_file():
        raise DataError(f"normalization stats not found: {stats_path}")
    stats = data.NormalizationStats.load(stats_path)
    for p, m in zip(ckpts, models):
        if m.meta.get("vocab_hash") != stats.vocab_hash():
            raise DataError(f"{p}: vocabulary does not match {stats_path}")
    return ckpts, models, stats


def cmd_forecast(args) -> int:
    started = time.perf_counter()
    ckpts, models, stats = _load_models(args.checkpoints, args.stats)
    cutoffs = {m.meta.get("cutoff") for m in models}
    cutoff = args.cutoff if args.cutoff is not None else cutoffs.pop() if len(cutoffs) == 1 else None
    if cutoff is None:
        raise DataError("checkpoints disagree on the cutoff; pass --cutoff")
    claims = _load_claims(args.claims)
    train, _ = _split(claims, cutoff)
    points = forecast.build_scoring_points(train, stats)
    if args.claim_id:
        wanted = set(args.claim_id)
        missing = wanted - set(points.claim_ids)
        if missing:
            raise DataError(f"not open for scoring at {cutoff}: {', '.join(sorted(missing))}")
        points = points.take(np.array([i for i, c in enumerate(points.claim_ids) if c in wanted],
                                      dtype=int))
    draws = args.draws if args.draws is not None else DEFAULT_DRAWS[args.mode]
    out = _out_dir(args.out)
    name = f"{args.mode}.csv"
    hz = forecast.horizons(points) if len(points) else np.zeros(0, int)

    if args.mode == "point":
        _, rows = forecast.aggregate_unpaid(models, points, n_weight_draws=draws, seed=args.seed)
        write_rows(out / name, ["claim_id", "horizon", "unpaid_estimate"],
                   ((c, h, _fmt(e)) for c, h, e in rows))
    elif args.mode == "paths":
        arr = (forecast.sample_path_array(models, points, draws, args.aleatoric, seed=args.seed)
               if len(points) else np.zeros((0, 0, 0)))

        def path_rows():
            for i, cid in enumerate(points.claim_ids):
                for d in range(arr.shape[1]):
                    cum = np.cumsum(arr[i, d, :hz[i]])
                    for t in range(hz[i]):
                        yield cid, d, t + 1, _fmt(arr[i, d, t]), _fmt(cum[t])

        write_rows(out / name, ["claim_id", "draw_id", "step", "net", "cumulative"], path_rows())
    else:
        if args.member is not None and not 0 <= args.member < len(models):
            raise DataError(f"--member {args.member} out of range for {len(models)} checkpoints")
        pool = models if args.member is None else [models[args.member]]
        summaries = forecast.posterior_summary(pool, points, draws, seed=args.seed) if len(points) else []

        def summary_rows():
            for s in summaries:
                for t in range(s.w1.shape[1]):
                    for d in range(s.w1.shape[0]):
                        yield (s.claim_id, t + 1, d, _fmt(s.w1[d, t]), _fmt(s.mean[d, t]),
                               _fmt(s.log_var[d, t]))

        write_rows(out / name, ["claim_id", "step", "draw_id", "w1", "mean", "log_var"], summary_rows())

    write_manifest(out, "forecast", args, started, [name], inputs=[args.claims, *ckpts],
                   seeds=[args.seed],
                   config=f"mode = {args.mode}\ndraws = {draws}\ncutoff = {cutoff}\n"
                          f"members = {len(models)}\n")
    print(f"wrote {len(points)} claims to {out / name}")
    return EXIT_OK


def _read_point_forecasts(path) -> dict[str, float]:
    p = Path(path)
    if p.is_dir():
        p = p / "point.csv"
    if not p.is_file():
        raise DataError(f"forecast file not found: {p}")
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "unpaid_estimate" not in reader.fieldnames:
            raise DataError(f"{p}: expected a point forecast CSV")
        try:
            return {r["claim_id"]: float(r["unpaid_estimate"]) for r in reader}
        except (KeyError, ValueError) as exc:
            raise DataError(f"{p}: bad row ({exc})") from exc


def comparison_table(actual: float, chain_ladder: float, model: float | None):
    rows = [("Actual", actual, 0.0), ("Chain Ladder", chain_ladder, (chain_ladder - actual) / actual)]
    if model is not None:
        rows.append(("Model", model, (model - actual) / actual))
    return rows


def cmd_compare(args) -> int:
    started = time.perf_counter()
    claims = _load_claims(args.claims)
    train, holdout = _split(claims, args.cutoff)
    est = _read_point_forecasts(args.forecasts) if args.forecasts else None
    if est is not None:
        open_ids = {c.claim_id for c in train if 1 <= c.n_observed < data.N_DEV}
        unknown = set(est) - open_ids
        if unknown:
            raise DataError(f"{len(unknown)} forecast claim ids are not open at {args.cutoff}")
    actual = cl.actual_unpaid(holdout, train)
    if actual == 0:
        raise DataError("actual unpaid is zero at this cutoff; errors are undefined")
    tri = cl.build_triangle(train, args.cutoff)
    factors = cl.ata_factors(tri)
    if factors.undefined:
        factors = factors.filled(1.0)
    cl_total, _ = cl.unpaid_estimate(tri, factors)
    model_total = float(sum(est.values())) if est is not None else None
    table = comparison_table(actual, cl_total, model_total)

    print(f"{'':<14}{'Unpaid':>16}{'Error':>10}")
    for name, value, err in table:
        print(f"{name:<14}{value:>16,.0f}{err:>10.2%}")
    print(REFERENCE_FOOTER)

    if args.out:
        out = _out_dir(args.out)
        write_rows(out / "report.csv", ["method", "unpaid", "error"],
                   ((n, _fmt(v), _fmt(e)) for n, v, e in table))
        with atomic_path(out / "triangle.csv") as tmp:
            tri.write_csv(tmp)
        with atomic_path(out / "factors.csv") as tmp:
            factors.write_csv(tmp)
        write_manifest(out, "compare", args, started, ["report.csv", "triangle.csv", "factors.csv"],
                       inputs=[args.claims] + ([args.forecasts] if args.forecasts else []),
                       config=f"cutoff = {args.cutoff}\n")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="claimcast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"claimcast {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic claims book")
    s.add_argument("--n", type=_positive(int), required=True, help="number of claims")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit an ensemble at a cutoff year")
    t.add_argument("--claims", required=True)
    t.add_argument("--cutoff", type=int, default=2005)
    t.add_argument("--config", help="key = value training config; flags below override it")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ensemble", type=_positive(int), default=1, help="number of members")
    t.add_argument("--threads", type=_positive(int), default=1, help="members trained in parallel")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    t.add_argument("--minibatch", type=_positive(int), default=None)
    t.add_argument("--lr", type=_positive(float), default=None, help="override lr0")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="score open claims")
    f.add_argument("--checkpoints", nargs="+", required=True,
                   help="checkpoint files or training output directories")
    f.add_argument("--stats", help="normalization stats (default: next to the first checkpoint)")
    f.add_argument("--claims", required=True)
    f.add_argument("--cutoff", type=int, default=None, help="default: the cutoff used in training")
    f.add_argument("--mode", choices=["point", "paths", "summary"], default="point")
    f.add_argument("--draws", type=_positive(int), default=None,
                   help="weight draws (default: point 1 per member, paths 100, summary 1000)")
    f.add_argument("--aleatoric", type=_positive(int), default=1,
                   help="outcome paths per weight draw in paths mode")
    f.add_argument("--member", type=int, default=None,
                   help="summary mode: use only this member instead of cycling the ensemble")
    f.add_argument("--claim-id", action="append", help="restrict to these claims (repeatable)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_forecast)

    c = sub.add_parser("compare", help="actual vs chain ladder vs model unpaid")
    c.add_argument("--claims", required=True)
    c.add_argument("--cutoff", type=int, default=2005)
    c.add_argument("--forecasts", help="point forecast CSV or the directory holding point.csv")
    c.add_argument("--out", help="directory for report, triangle and factor CSVs")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "member", None) is not None and args.mode != "summary":
        parser.print_usage(sys.stderr)
        print("claimcast: --member applies to --mode summary only", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except network.NumericError as exc:
        print(f"claimcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, data.ClaimsFormatError) as exc:
        print(f"claimcast: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"claimcast: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
