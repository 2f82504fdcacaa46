"""``optembed`` command line.

Every subcommand resolves one config (file, then ``--set`` overrides, then
``--seed``) and works inside a run directory ``<out>/<hash12>-<timestamp>``.
``prepare`` creates the directory; later phases reuse the newest directory
whose hash matches, or the one given with ``--run``. Artifacts are never
overwritten: a repeated phase writes the next ``.vN`` file.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import json
import logging
import os
import re
import sys
import time

import numpy as np

from . import __version__, pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_overrides
from .data import DataError, load_encoded, save_encoded, split, synth_generate, write_csv
from .metrics import MetricError, sparsity
from .prune import norm_frequency_report, write_norm_frequency

log = logging.getLogger("optembed")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

REPORT_COLUMNS = ("baseline", "supernet", "inherited", "optembed")
REPORT_ROWS = ("val_auc", "test_auc", "test_logloss", "sparsity", "kept_rows", "mean_dim", "epoch")


class UsageError(Exception):
    pass


class MissingArtifact(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", default="runs", metavar="DIR", help="parent of run directories")
    common.add_argument("--run", metavar="DIR", help="use this run directory instead of the hash lookup")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="optembed", description="Embedding-row pruning and per-field dimension search "
                                             "for click-through-rate models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("prepare", parents=[common], help="build the vocabulary and encoded cache")
    sub.add_parser("train-supernet", parents=[common], help="supernet training with row pruning")
    sub.add_parser("search", parents=[common], help="evolutionary per-field dimension search")
    sub.add_parser("retrain", parents=[common], help="retrain under the found masks (and the baseline)")
    sub.add_parser("evaluate", parents=[common], help="score the stored models on val and test")
    sub.add_parser("report", parents=[common], help="metrics table and plot data")
    sp = sub.add_parser("synth", parents=[common], help="write the synthetic dataset as CSV")
    sp.add_argument("--output", metavar="PATH", help="CSV destination (default: <run>/synth.csv)")
    return p


def resolve_config(args):
    config = RunConfig.load(args.config) if args.config else RunConfig()
    config = config.with_overrides(parse_overrides(args.overrides))
    if args.seed is not None:
        config = config.with_overrides({"seed": str(args.seed)})
    return config


# run directory and artifact bookkeeping

def _stamp():
    return time.strftime("%Y%m%dT%H%M%S", time.gmtime())


def new_run_dir(out, config):
    os.makedirs(out, exist_ok=True)
    base = os.path.join(out, f"{config.digest()[:12]}-{_stamp()}")
    path, k = base, 1
    while os.path.exists(path):
        path, k = f"{base}-{k}", k + 1
    os.makedirs(path)
    return path


def find_run_dir(args, config):
    if args.run:
        if not os.path.isdir(args.run):
            raise MissingArtifact(f"run directory {args.run} does not exist")
        return args.run
    prefix = config.digest()[:12] + "-"
    found = sorted(d for d in os.listdir(args.out) if d.startswith(prefix)) if os.path.isdir(args.out) else []
    if not found:
        raise MissingArtifact(f"no run directory for config {prefix[:-1]} under {args.out}; "
                              "requires prepared data (run `prepare` first)")
    return os.path.join(args.out, found[-1])


def _versions(run_dir, stem, ext):
    pat = re.compile(re.escape(stem) + r"\.v(\d+)\." + re.escape(ext) + "$")
    out = []
    for name in os.listdir(run_dir):
        m = pat.match(name)
        if m:
            out.append((int(m.group(1)), os.path.join(run_dir, name)))
    return sorted(out)


def latest(run_dir, stem, ext):
    v = _versions(run_dir, stem, ext)
    return v[-1][1] if v else None


def next_path(run_dir, stem, ext):
    v = _versions(run_dir, stem, ext)
    return os.path.join(run_dir, f"{stem}.v{(v[-1][0] + 1) if v else 1}.{ext}")


def require(run_dir, stem, ext, what, command):
    path = latest(run_dir, stem, ext)
    if path is None:
        raise MissingArtifact(f"requires {what} (run `{command}` first)")
    return path


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _metric_records(phase, trained):
    return [{**h, "phase": phase} for h in trained.history]


def load_data(run_dir, config):
    schema, data = load_encoded(require(run_dir, "data", "oeds", "prepared data", "prepare"))
    train, val, test = split(data, config["split.ratios"], config["seed"])
    return schema, train, val, test


def load_model(run_dir, stem, what, command):
    return pipeline.TrainedModel.load(require(run_dir, stem, "oeck", what, command))


# subcommands

def cmd_prepare(args, config):
    base_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else None
    prep = pipeline.prepare(config, base_dir=base_dir)
    run_dir = args.run or new_run_dir(args.out, config)
    os.makedirs(run_dir, exist_ok=True)
    with open(next_path(run_dir, "config", "cfg"), "w") as fh:
        fh.write(config.canonical())
    path = next_path(run_dir, "data", "oeds")
    save_encoded(path, prep.schema, prep.data)
    summary = prep.schema.summary()
    with open(next_path(run_dir, "schema", "txt"), "w") as fh:
        fh.write(summary + "\n")
    print(summary)
    print(f"rows: {len(prep.data)}  train/val/test: {len(prep.train)}/{len(prep.val)}/{len(prep.test)}")
    print(f"run: {run_dir}")


def cmd_train_supernet(args, config):
    run_dir = find_run_dir(args, config)
    schema, train, val, _ = load_data(run_dir, config)
    sup = pipeline.train_supernet(train, val, schema, config, on_epoch=_progress("supernet"))
    path = next_path(run_dir, "supernet", "oeck")
    sup.save(path)
    _write_jsonl(next_path(run_dir, "metrics-supernet", "jsonl"), _metric_records("supernet", sup))
    print(f"supernet: best epoch {sup.epoch}  val auc {sup.val_auc:.6f}  "
          f"kept rows {int(sup.m_e.sum())}/{schema.total}")
    print(f"wrote {path}")


def cmd_search(args, config):
    run_dir = find_run_dir(args, config)
    sup = load_model(run_dir, "supernet", "supernet checkpoint", "train-supernet")
    schema, _, val, _ = load_data(run_dir, config)
    res = pipeline.run_search(sup, val, schema, config)
    res.write_log(next_path(run_dir, "search-log", "jsonl"))
    best = [int(d) for d in res.best.dims]
    D = config["model.dim"]
    out = {"dims": best, "fitness": res.best.fitness, "best_history": res.best_history,
           "sparsity": sparsity(sup.m_e, np.asarray(best), schema, D),
           "topk": [{"dims": list(c.key), "fitness": c.fitness} for c in res.topk]}
    path = next_path(run_dir, "search", "json")
    with open(path, "w") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"search: best dims {','.join(map(str, best))}  val auc {res.best.fitness:.6f}")
    print(f"wrote {path}")


def _load_search(run_dir):
    path = require(run_dir, "search", "json", "search result", "search")
    with open(path) as fh:
        return json.load(fh)


def cmd_retrain(args, config):
    run_dir = find_run_dir(args, config)
    sup = load_model(run_dir, "supernet", "supernet checkpoint", "train-supernet")
    found = _load_search(run_dir)
    schema, train, val, _ = load_data(run_dir, config)
    dims = np.asarray(found["dims"], dtype=np.int64)
    final = pipeline.retrain(train, val, schema, sup.m_e, dims, config, on_epoch=_progress("retrain"))
    path = next_path(run_dir, "final", "oeck")
    final.save(path)
    _write_jsonl(next_path(run_dir, "metrics-retrain", "jsonl"), _metric_records("retrain", final))
    print(f"retrain: best epoch {final.epoch}  val auc {final.val_auc:.6f}")
    if config["retrain.baseline"]:
        base = pipeline.train_baseline(train, val, schema, config, on_epoch=_progress("baseline"))
        base.save(next_path(run_dir, "baseline", "oeck"))
        _write_jsonl(next_path(run_dir, "metrics-baseline", "jsonl"), _metric_records("baseline", base))
        print(f"baseline: best epoch {base.epoch}  val auc {base.val_auc:.6f}")
    print(f"wrote {path}")


def _stored_models(run_dir):
    out = {}
    for stem in ("baseline", "supernet", "final"):
        path = latest(run_dir, stem, "oeck")
        if path is not None:
            out[stem] = pipeline.TrainedModel.load(path)
    return out


def cmd_evaluate(args, config):
    run_dir = find_run_dir(args, config)
    models = _stored_models(run_dir)
    if not models:
        raise MissingArtifact("requires a trained checkpoint (run `train-supernet` or `retrain` first)")
    schema, _, val, test = load_data(run_dir, config)
    records = []
    for name, tm in models.items():
        model = tm.build_model(config)
        table = tm.masked_table(schema)
        val_auc, val_ll = pipeline.evaluate(model, table, val, tm.dims)
        test_auc, test_ll = pipeline.evaluate(model, table, test, tm.dims)
        records.append({"model": name, "recorded_val_auc": tm.val_auc, "val_auc": val_auc,
                        "val_logloss": val_ll, "test_auc": test_auc, "test_logloss": test_ll})
        print(f"{name:<10} val auc {val_auc:.6f} (recorded {tm.val_auc:.6f})  "
              f"test auc {test_auc:.6f}  test logloss {test_ll:.6f}")
    _write_jsonl(next_path(run_dir, "eval", "jsonl"), records)


def report_table(run_dir, config):
    """Column -> row -> value (``None`` when the phase is absent)."""
    schema, _, val, test = load_data(run_dir, config)
    models = _stored_models(run_dir)
    D = config["model.dim"]
    found = None
    if latest(run_dir, "search", "json") is not None:
        found = _load_search(run_dir)
    cols = {c: None for c in REPORT_COLUMNS}

    def row(tm, dims):
        model = tm.build_model(config)
        table = tm.masked_table(schema, dims)
        va, _ = pipeline.evaluate(model, table, val, dims)
        ta, tl = pipeline.evaluate(model, table, test, dims)
        return {"val_auc": va, "test_auc": ta, "test_logloss": tl,
                "sparsity": sparsity(tm.m_e, dims, schema, D), "kept_rows": int(tm.m_e.sum()),
                "mean_dim": float(np.mean(dims)), "epoch": tm.epoch}

    if "baseline" in models:
        cols["baseline"] = row(models["baseline"], models["baseline"].dims)
    if "supernet" in models:
        sup = models["supernet"]
        cols["supernet"] = row(sup, sup.dims)
        if found is not None:
            cols["inherited"] = row(sup, np.asarray(found["dims"], dtype=np.int64))
    if "final" in models:
        cols["optembed"] = row(models["final"], models["final"].dims)
    return cols, models, schema


def _fmt(v, width):
    if v is None:
        return f"{'absent':>{width}}"
    if isinstance(v, int):
        return f"{v:>{width}d}"
    return f"{v:>{width}.6f}"


def cmd_report(args, config):
    run_dir = find_run_dir(args, config)
    if not os.listdir(run_dir):
        raise MissingArtifact(f"run directory {run_dir} is empty (run `prepare` first)")
    cols, models, schema = report_table(run_dir, config)
    w = 12
    lines = ["metric".ljust(14) + "".join(f"{c:>{w}}" for c in REPORT_COLUMNS)]
    for r in REPORT_ROWS:
        lines.append(r.ljust(14) + "".join(_fmt(None if cols[c] is None else cols[c][r], w)
                                          for c in REPORT_COLUMNS))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    with open(next_path(run_dir, "report", "txt"), "w") as fh:
        fh.write(text)
    with open(next_path(run_dir, "report", "tsv"), "w") as fh:
        fh.write("metric\t" + "\t".join(REPORT_COLUMNS) + "\n")
        for r in REPORT_ROWS:
            vals = ["absent" if cols[c] is None else repr(cols[c][r]) for c in REPORT_COLUMNS]
            fh.write(r + "\t" + "\t".join(vals) + "\n")

    # norm-frequency scatter from the least-pruned model available
    source = next((models[k] for k in ("baseline", "final", "supernet") if k in models), None)
    if source is not None:
        _, train, _, _ = load_data(run_dir, config)
        freq = np.bincount(train.idx.ravel(), minlength=schema.total)
        reports = norm_frequency_report(source.E, freq, schema)
        write_norm_frequency(next_path(run_dir, "norm-frequency", "tsv"), reports, schema)
        with open(next_path(run_dir, "norm-frequency-summary", "tsv"), "w") as fh:
            fh.write("field\tpearson\tdegenerate\n")
            for rep in reports:
                fh.write(f"{schema.names[rep.field]}\t{rep.correlation!r}\t{str(rep.degenerate).lower()}\n")


def cmd_synth(args, config):
    raw = synth_generate(pipeline.synth_spec(config), seed=config["seed"])
    path = args.output
    if path is None:
        run_dir = args.run or new_run_dir(args.out, config)
        path = os.path.join(run_dir, "synth.csv")
    write_csv(raw, path, delimiter=config["data.delimiter"])
    print(f"wrote {len(raw)} rows x {raw.n_fields} fields to {path}")


COMMANDS = {
    "prepare": cmd_prepare,
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "synth": cmd_synth,
}


def _progress(phase):
    def on_epoch(rec):
        log.info("%s epoch %d  val auc %.6f  logloss %.6f  sparsity %.4f", phase, rec["epoch"],
                 rec["auc"], rec["logloss"], rec["sparsity"])
    return on_epoch


def _configure_logging(verbose):
    pkg = logging.getLogger("optembed")
    for h in [h for h in pkg.handlers if getattr(h, "_optembed_cli", False)]:
        pkg.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._optembed_cli = True
    pkg.addHandler(handler)
    pkg.setLevel(logging.INFO if verbose else logging.WARNING)
    pkg.propagate = False


def run(argv=None):
    try:
        args = _parser().parse_args(argv)
        config = resolve_config(args)
    except UsageError as exc:
        print(f"optembed: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError) as exc:
        print(f"optembed: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(args.verbose)
    log.info("resolved config (sha256 %s):\n%s", config.digest(), config.canonical())
    try:
        COMMANDS[args.command](args, config)
    except (MissingArtifact, pipeline.PhaseError) as exc:
        print(f"optembed {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DataError, CheckpointError, MetricError, pipeline.TrainingDiverged, OSError, ValueError) as exc:
        print(f"optembed {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
