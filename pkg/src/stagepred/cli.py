"""Command-line entry point: ``stagepred <subcommand>``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 missing
file, 4 malformed input. Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class SchemaError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(str(p))
    return p


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> None:
    from .workload import WorkloadSpec, export, generate

    try:
        spec = WorkloadSpec.from_dict(json.loads(_need(args.spec).read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"{args.spec}: {exc}") from None
    export(generate(spec), args.out)


def cmd_train_global(args) -> None:
    from .gcn import GcnConfig, gcn_train
    from .workload import ingest, training_triples

    data = []
    for path in args.workload:
        data += training_triples(ingest(_need(path)))
    config = GcnConfig(
        hidden=args.hidden, layers=args.layers, epochs=args.epochs, learning_rate=args.lr, seed=args.seed
    )
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    gcn_train(data, config, log=log).save(args.out)


def _predictor(args):
    from .dispatch import BaselinePredictor, RetrainPolicy, StagePredictor
    from .gcn import GcnModel
    from .sim import OraclePredictor

    if args.predictor == "oracle":
        return OraclePredictor()
    if args.predictor == "baseline":
        return BaselinePredictor(every=args.retrain_every, seed=args.seed)
    g = GcnModel.load(_need(args.global_model)) if args.global_model else None
    return StagePredictor(policy=RetrainPolicy(every=args.retrain_every, seed=args.seed), global_model=g)


def cmd_replay(args) -> None:
    from .sim import SimConfig, simulate
    from .workload import ingest

    events = ingest(_need(args.workload))
    config = SimConfig(args.short_threshold, args.short_slots, args.long_slots, not args.no_charge)
    result = simulate(events, _predictor(args), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for r in result.rows:
            rec = {
                "query_id": r["query_id"],
                "stage": r["stage"],
                "value_s": r["predicted"],
                "uncertainty": r["uncertainty"],
                "inference_cost_s": r["inference"],
                "true_s": r["true_exec"],
            }
            fh.write(json.dumps(rec) + "\n")
    result.to_csv(out / "sim.csv")
    result.write_summary(out / "summary.json")


def _read_predictions(path: Path):
    """(predicted, true, uncertainty-or-None) triples from sim CSV or predictions JSON lines."""
    rows = []
    if path.suffix == ".jsonl":
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rows.append((float(d["value_s"]), float(d["true_s"]), d.get("uncertainty")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{i}: {exc!r}") from None
        return rows
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("predicted", "true_exec"):
            if col not in (reader.fieldnames or ()):
                raise SchemaError(f"{path}: missing column {col!r}")
        for i, r in enumerate(reader, start=2):
            try:
                u = r.get("uncertainty") or None
                rows.append((float(r["predicted"]), float(r["true_exec"]), None if u is None else float(u)))
            except ValueError as exc:
                raise SchemaError(f"{path}:{i}: {exc}") from None
    return rows


def cmd_eval(args) -> None:
    from .metrics import DegenerateInputError, error_stats, prr

    rows = _read_predictions(_need(args.predictions))
    if not rows:
        raise SchemaError(f"{args.predictions}: no predictions")
    floor = args.floor
    pairs = [(max(p, floor), max(t, floor)) for p, t, _ in rows]
    try:
        stats = error_stats(pairs)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    out = stats.to_dict()
    scored = [(p, t, u) for (p, t), (_, _, u) in zip(pairs, rows) if u is not None]
    out["prr"] = None
    out["prr_n"] = len(scored)
    if len(scored) >= 2:
        p, t, u = (np.array(c, dtype=float) for c in zip(*scored))
        try:
            out["prr"] = prr(np.abs(np.log1p(p) - np.log1p(t)), u)
        except DegenerateInputError:
            pass
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_compare(args) -> None:
    from .sim import SimResult, compare, write_report

    names = args.names or [Path(p).stem for p in args.results]
    if len(names) != len(args.results):
        raise UsageError("--names must match the number of result files")
    if len(set(names)) != len(names):
        raise UsageError("result names must be unique; pass --names")
    results = {}
    for name, path in zip(names, args.results):
        try:
            results[name] = SimResult.from_csv(_need(path))
        except (ValueError, KeyError) as exc:
            raise SchemaError(str(exc)) from None
    rows = compare(results)
    if args.out:
        write_report(rows, args.out)
    else:
        write_report(rows, "/dev/stdout")


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(_need(args.report), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"name", "metric", "improvement_pct"} <= set(rows[0]):
        raise SchemaError(f"{args.report}: expected columns name, metric, improvement_pct")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = list(dict.fromkeys(r["name"] for r in rows))
    metrics = list(dict.fromkeys(r["metric"] for r in rows))
    val = {(r["name"], r["metric"]): float(r["improvement_pct"]) for r in rows}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    w = 0.8 / len(names)
    x = np.arange(len(metrics))
    for i, name in enumerate(names):
        ax.bar(x + i * w, [val.get((name, m), 0.0) for m in metrics], w, label=name)
    ax.set_xticks(x + w * (len(names) - 1) / 2, metrics)
    ax.set_ylabel("latency improvement (%)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "improvement.png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    (out / "improvement.csv").write_text(Path(args.report).read_text())


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stagepred", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic workload")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train-global", help="train the global graph model")
    t.add_argument("--workload", required=True, nargs="+")
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train_global)

    r = sub.add_parser("replay", help="simulate a workload under a predictor")
    r.add_argument("--workload", required=True)
    r.add_argument("--predictor", choices=("staged", "baseline", "oracle"), default="staged")
    r.add_argument("--global-model", dest="global_model")
    r.add_argument("--retrain-every", type=int, default=500)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--short-threshold", type=float, default=10.0)
    r.add_argument("--short-slots", type=int, default=2)
    r.add_argument("--long-slots", type=int, default=4)
    r.add_argument("--no-charge", action="store_true", help="do not charge inference time")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("eval", help="accuracy and PRR of a prediction file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--floor", type=float, default=1e-3, help="clamp seconds below this before Q-error")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="latency improvement report; the last file is the reference")
    c.add_argument("results", nargs="+")
    c.add_argument("--names", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="bar chart of a compare report")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .plan import PlanError
    from .workload import WorkloadError

    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except PlanError as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except (SchemaError, WorkloadError) as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_FAIL, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
