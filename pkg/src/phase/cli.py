"""Command-line interface: ``phase <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure.  Diagnostics go to stderr; results only to ``--out``.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import embedder as emb
from . import eval as ev
from . import explain as ex
from . import pipeline as pl
from . import synthgen
from .dataprep import label_points, write_dataset
from .errors import DataError, NumericError, PhaseError
from .tasks import get_spec

log = logging.getLogger("phase")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="thread cap (deterministic at 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _split_flags(p):
    p.add_argument("--split", type=_floats, default=(0.7, 0.15, 0.15), help="train,valid,test fractions")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="phase", description="Per-signal embedders and downstream forecasting.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    p.add_argument("--config", help="generator JSON (full config or {\"preset\": ..., overrides})")
    p.add_argument("--preset", choices=["OR0", "OR1", "ICU_P"], default=None)
    p.add_argument("--procedures", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    _common(p, seed=False)

    p = sub.add_parser("prep", help="label a cohort and write per-split datasets and prep stats")
    p.add_argument("--cohort", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--features", choices=["none", "raw", "ema"], default="none")
    p.add_argument("--out", required=True)
    _split_flags(p)
    _common(p, seed=False)

    p = sub.add_parser("train-embedder", help="train one per-signal embedder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--signal", required=True)
    p.add_argument("--task", required=True, help="rand, auto, next, min or hypo")
    p.add_argument("--downstream-task", default=None, help="label task for hypo embedders")
    p.add_argument("--hidden", type=_ints, default=(emb.N_HID, emb.N_HID))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--recurrent-dropout", type=float, default=0.5)
    p.add_argument("--max-points", type=int, default=None)
    p.add_argument("--out", required=True)
    _split_flags(p)
    _common(p)

    p = sub.add_parser("embed", help="embed one signal's windows for labeled points")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--task", required=True, help="downstream task whose points are embedded")
    p.add_argument("--out", required=True)
    _common(p, seed=False)

    for name, text in (("train-downstream", "run an experiment plan end to end"),
                       ("transfer", "run a fixed-transfer plan (' or ^P) and verify embedders are unchanged")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--plan", required=True)
        p.add_argument("--out", default=None, help="runs directory (overrides the plan)")
        p.add_argument("--seed", type=int, default=None, help="overrides the plan seed")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("evaluate", help="AP with a bootstrap interval from a run or a scores CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--run")
    src.add_argument("--scores")
    p.add_argument("--task", default="")
    p.add_argument("--representation", default="")
    p.add_argument("--resamples", type=int, default=ev.N_RESAMPLES)
    p.add_argument("--level", type=float, default=ev.LEVEL)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune an embedder on a target cohort")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--max-points", type=int, default=None)
    p.add_argument("--out", required=True)
    _split_flags(p)
    _common(p)

    p = sub.add_parser("explain", help="interventional SHAP values for test rows of a gbm run")
    p.add_argument("--run", required=True)
    p.add_argument("--rows", type=int, default=100, help="number of test rows to explain")
    p.add_argument("--background", type=int, default=ex.BACKGROUND_SIZE)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("report", help="figure CSV from every report under a runs directory")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    _common(p, seed=False)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _valid_flags(p):
    return sorted(s for a in p._actions for s in a.option_strings if s.startswith("--"))


# ---------------------------------------------------------------------------
# commands

def _workspace(args):
    return pl.Workspace(split=args.split, split_seed=args.split_seed)


def cmd_generate(args):
    if args.config:
        cfg = synthgen.load_config(args.config)
    else:
        cfg = synthgen.default_config(args.preset or "OR0")
    updates = {} if args.seed is None else {"seed": args.seed}
    if args.procedures is not None:
        updates["n_procedures"] = args.procedures
    cfg = synthgen.GeneratorConfig.from_dict({**cfg.to_dict(), **updates})
    cohort = synthgen.generate_cohort(cfg)
    synthgen.write_cohort(cohort, args.out, cfg)
    log.info("wrote %d procedures to %s", len(cohort), args.out)


def cmd_prep(args):
    ws = _workspace(args)
    sp = ws.splits(args.cohort)
    spec = get_spec(args.task)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "prep_stats.json"), "w") as f:
        json.dump(sp.stats.to_dict(), f, indent=2, sort_keys=True)
    summary = {}
    for name in ("train", "valid", "test"):
        ds = label_points(getattr(sp, name), spec)
        feats = names = None
        if args.features != "none":
            plan = pl.ExperimentPlan(args.cohort, args.features, args.task)
            fs = pl.build_features(plan, ds, sp.train.signal_names, sp.stats, None, True)
            feats, names = fs.X, fs.names
        write_dataset(os.path.join(args.out, f"{name}.csv"), ds, feats, names)
        summary[name] = {"rows": len(ds), "positives": int(ds.label.sum()), "excluded": int(ds.n_excluded)}
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)


def cmd_train_embedder(args):
    ws = _workspace(args)
    sp = ws.splits(args.cohort)
    task = emb.SourceTask.parse(args.task, args.downstream_task)
    prep = sp.stats.for_signal(args.signal)
    sp.train.signal_index(args.signal)
    cfg = emb.default_train_config(task, args.epochs, args.seed, batch_size=args.batch_size,
                                   learning_rate=args.learning_rate)
    if task.kind == "rand":
        spec = emb.embedder_spec(task, args.hidden, args.dropout, args.recurrent_dropout)
        model = emb.make_random_embedder(args.signal, spec, args.seed, prep, sp.cohort_id)
    else:
        tr = emb.embedder_data(sp.train, args.signal, task, *prep, args.max_points, args.seed)
        vmax = None if args.max_points is None else max(1, args.max_points // 4)
        va = emb.embedder_data(sp.valid, args.signal, task, *prep, vmax, args.seed)
        model = emb.train_embedder(args.signal, task, tr, va, cfg, prep, sp.cohort_id, args.hidden,
                                   args.dropout, args.recurrent_dropout)
    emb.save_model(model, args.out)


def cmd_embed(args):
    model = emb.load_model(args.model)
    cohort = synthgen.read_cohort(args.cohort)
    ds = label_points(cohort, get_spec(args.task))
    H = emb.embed_raw(model, ds.raw_windows(model.signal_name), model.signal_name)
    write_dataset(args.out, ds, H, [f"{model.signal_name}_h{k}" for k in range(H.shape[1])])


def _load_plan(args):
    plan = pl.load_plan(args.plan)
    d = plan.to_dict()
    if args.out:
        d["out"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    return pl.ExperimentPlan.from_dict(d)


def cmd_train_downstream(args):
    res = pl.run_experiment(_load_plan(args))
    print(res.run_dir)


def cmd_transfer(args):
    plan = _load_plan(args)
    if plan.rep.variant not in ("'", "^P"):
        raise DataError(f"transfer needs a fixed-transfer representation (' or ^P), got {plan.representation!r}")
    res = pl.run_experiment(plan)
    print(res.run_dir)


def cmd_evaluate(args):
    if args.run:
        scores, labels = pl.read_scores(os.path.join(args.run, "scores.csv"))
        plan = pl.load_plan(os.path.join(args.run, "plan.json"))
        task, rep = args.task or plan.task, args.representation or plan.rep.name
    else:
        scores, labels = pl.read_scores(args.scores)
        task, rep = args.task, args.representation
    report = ev.make_report(task, rep, scores, labels, args.resamples, args.level, args.seed)
    ev.write_report(args.out, report)


def cmd_finetune(args):
    model = emb.load_model(args.model)
    ws = _workspace(args)
    sp = ws.splits(args.cohort)
    mean, std = model.prep_mean, model.prep_std
    tr = emb.embedder_data(sp.train, model.signal_name, model.source_task, mean, std, args.max_points, args.seed)
    vmax = None if args.max_points is None else max(1, args.max_points // 4)
    va = emb.embedder_data(sp.valid, model.signal_name, model.source_task, mean, std, vmax, args.seed)
    cfg = emb.default_train_config(model.source_task, args.epochs, args.seed, batch_size=args.batch_size,
                                   learning_rate=args.learning_rate)
    tuned, _ = emb.fine_tune(model, tr, va, cfg, sp.cohort_id)
    emb.save_model(tuned, args.out)


def cmd_explain(args):
    if args.rows < 1 or args.background < 1:
        raise DataError("--rows and --background must be >= 1")
    # one seeded sample of test rows; the first --rows of it are explained
    run = pl.load_run(args.run, n_rows=max(args.rows, args.background), seed=args.seed)
    X = run.features.X
    if len(X) == 0:
        raise DataError("run has no test rows")
    n = min(args.rows, len(X))
    idx = np.sort(np.random.default_rng(args.seed).permutation(len(X))[:n])
    bg = ex.sample_background(X, args.background, args.seed)
    rows = ex.explain_rows(run.forest, X[idx], bg)
    worst = max(abs(r.residual) for r in rows)
    if not worst < 1e-6:
        raise NumericError(f"local accuracy violated: max residual {worst:.3g}")
    os.makedirs(args.out, exist_ok=True)
    ids = [f"{p}@{t}" for p, t in zip(run.test.subset(idx).procedure_ids(), run.test.t[idx])]
    ex.write_explain_csv(os.path.join(args.out, "shap.csv"), ids, rows, X[idx], run.features.names)
    summary = ex.summary_data(rows, X[idx], run.features.names, args.top)
    ex.write_summary_csv(os.path.join(args.out, "summary.csv"), summary)
    with open(os.path.join(args.out, "signals.csv"), "w") as f:
        f.write("row_id,group,name,phi\n")
        for rid, r in zip(ids, rows):
            agg = ex.aggregate_by_signal(r, run.features.provenance)
            for kind, block in (("signal", agg.signals), ("static", agg.statics)):
                for name, v in block.items():
                    f.write(f"{rid},{kind},{name},{v!r}\n")
    log.info("explained %d rows; max |residual| %.3g", n, worst)


def cmd_report(args):
    reports = pl.collect_reports(args.runs)
    if not reports:
        raise DataError(f"no report.json found under {args.runs}")
    ev.write_figure_csv(args.out, reports)


COMMANDS = {
    "generate": cmd_generate, "prep": cmd_prep, "train-embedder": cmd_train_embedder, "embed": cmd_embed,
    "train-downstream": cmd_train_downstream, "evaluate": cmd_evaluate, "transfer": cmd_transfer,
    "finetune": cmd_finetune, "explain": cmd_explain, "report": cmd_report,
}


def _threads_context(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n) if n else threadpool_limits(limits=None)


def dispatch(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(f"phase: a command is required; choose from {', '.join(COMMANDS)}")
        if extra:
            sp = _subparser(parser, args.command)
            raise UsageError(f"phase {args.command}: unrecognized arguments {' '.join(extra)}; "
                             f"valid flags: {' '.join(_valid_flags(sp))}")
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads_context(args.threads):
            COMMANDS[args.command](args)
    except NumericError as e:
        print(f"phase {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except pl.StageError as e:
        print(f"phase {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.cause, NumericError) else EXIT_DATA
    except (PhaseError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"phase {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
