"""Command-line driver: ``qosclust <stage> [--config PATH] [--seed N] [--mode M] [--out DIR]``.

Stages and the files they read and write inside the output directory:

    generate   ->  dataset.csv, scenario.json
    pretrain   dataset.csv  ->  pretrain.npz
    solve      dataset.csv, pretrain.npz  ->  solve.npz, clusters.json, trace.csv,
               cluster_evolution.csv (+ ledger.csv, comm_summary.json in harness mode)
    evaluate   dataset.csv, pretrain.npz, solve.npz  ->  metrics.csv, metrics.json
    gap        dataset.csv, pretrain.npz  ->  gap.json
    report     clusters.json, trace.csv, cluster_evolution.csv, metrics.json, gap.json  ->  report.json

Every stage refreshes manifest.json. Exit codes: 0 success, 2 configuration
error, 3 missing input, 4 numerical failure.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__, config as cfgmod, datagen as dg, pipeline as pl
from ._backend import BACKEND
from .errors import ConfigError, DivergenceError, IterationLimitError, NumericalDomainError, QosClustError
from .predictor import load_checkpoint, param_count, save_checkpoint

log = logging.getLogger("qosclust")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
STAGE_INPUTS = {
    "generate": (),
    "pretrain": ("dataset.csv",),
    "solve": ("dataset.csv", "pretrain.npz"),
    "evaluate": ("dataset.csv", "pretrain.npz", "solve.npz"),
    "gap": ("dataset.csv", "pretrain.npz"),
    "report": ("clusters.json", "trace.csv", "cluster_evolution.csv", "metrics.json", "gap.json"),
}


class MissingInputError(QosClustError, FileNotFoundError):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_json(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(out, stage):
    paths = {name: os.path.join(out, name) for name in STAGE_INPUTS[stage]}
    missing = [n for n, p in paths.items() if not os.path.exists(p)]
    if missing:
        raise MissingInputError(f"{stage}: missing input file(s) {', '.join(missing)} in {out}")
    return paths


def _load_dataset(cfg, path):
    return dg.read_csv(path, cfg.scenario.kpis.dim)


def _load_pretrained(path):
    base, heads, extra = load_checkpoint(path)
    return pl.Pretrained(base, heads[0], [], int(extra.get("best_epoch", 0)))


def update_manifest(cfg, out, stage, wall_time, written):
    """Merge this stage into manifest.json (written atomically)."""
    path = os.path.join(out, "manifest.json")
    man = {}
    if os.path.exists(path):
        with open(path) as fh:
            man = json.load(fh)
    man.update({
        "config_hash": cfg.config_hash(),
        "versions": {"qosclust": __version__, "numpy": np.__version__, "backend": BACKEND,
                     "python": sys.version.split()[0]},
        "seeds": {"root": cfg.seed, **{s: cfg.stage_seed(s) for s in cfgmod.STAGES}},
        "mode": cfg.mode,
    })
    man.setdefault("wall_time", {})[stage] = wall_time
    files = man.setdefault("files", {})
    for name in written:
        p = os.path.join(out, name)
        files[name] = {"sha256": _sha256(p), "bytes": os.path.getsize(p), "stage": stage}
    _atomic_json(path, man)


# -- stages --------------------------------------------------------------------------


def cmd_generate(cfg, out):
    ds = pl.generate(cfg)
    dg.write_csv(ds, os.path.join(out, "dataset.csv"))
    _write_json(os.path.join(out, "scenario.json"), dg.scenario_to_dict(cfg.scenario))
    log.info("generated %d rows for %d cells", ds.X.shape[0], ds.n_cells)
    return ["dataset.csv", "scenario.json"]


def cmd_pretrain(cfg, out):
    paths = _require(out, "pretrain")
    ds = _load_dataset(cfg, paths["dataset.csv"])
    pre = pl.pretrain(cfg, ds)
    save_checkpoint(os.path.join(out, "pretrain.npz"), pre.base, pre.head,
                    {"best_epoch": pre.best_epoch, "history": np.asarray(pre.history, dtype=np.float64)})
    log.info("pretrained base, best epoch %d", pre.best_epoch)
    return ["pretrain.npz"]


def cmd_solve(cfg, out):
    paths = _require(out, "solve")
    ds = _load_dataset(cfg, paths["dataset.csv"])
    pre = _load_pretrained(paths["pretrain.npz"])
    res = pl.solve(cfg, ds, pre)
    st = res.state
    save_checkpoint(os.path.join(out, "solve.npz"), pre.base, st.heads,
                    {"assignment": st.assignment, "labels": st.clusters.labels, "iter": st.iter})
    _write_json(os.path.join(out, "clusters.json"), {
        "labels": st.clusters.labels.tolist(),
        "sets": [s for s in st.clusters.sets if s],
        "n_clusters": st.clusters.n_clusters,
        "iterations": st.iter,
        "stopped_early": st.stopped_early,
        "objective": st.objective_values()[-1],
        "monotone_violations": sum(r.monotone_violation for r in st.trace),
        "L_theta": res.config.L_theta,
    })
    pl.write_trace(st, os.path.join(out, "trace.csv"))
    pl.write_cluster_evolution(st, os.path.join(out, "cluster_evolution.csv"))
    written = ["solve.npz", "clusters.json", "trace.csv", "cluster_evolution.csv"]
    if res.ledger is not None:
        res.ledger.write_csv(os.path.join(out, "ledger.csv"))
        f_total, f_last = param_count(pre.base.arch)
        res.ledger.write_summary(os.path.join(out, "comm_summary.json"), n_cells=ds.n_cells, f_total=f_total,
                                 f_last=f_last, n_clusters=st.clusters.n_clusters, b=cfg.bytes_per_scalar)
        written += ["ledger.csv", "comm_summary.json"]
    log.info("solve: %d iterations, C=%d, F=%.6g", st.iter, st.clusters.n_clusters, st.objective_values()[-1])
    return written


def cmd_evaluate(cfg, out):
    paths = _require(out, "evaluate")
    ds = _load_dataset(cfg, paths["dataset.csv"])
    pre = _load_pretrained(paths["pretrain.npz"])
    _, heads, extra = load_checkpoint(paths["solve.npz"])
    table, _ = pl.evaluate(cfg, ds, pre, heads, extra["labels"])
    table.write_csv(os.path.join(out, "metrics.csv"))
    _write_json(os.path.join(out, "metrics.json"), table.to_dict())
    return ["metrics.csv", "metrics.json"]


def cmd_gap(cfg, out):
    paths = _require(out, "gap")
    ds = _load_dataset(cfg, paths["dataset.csv"])
    pre = _load_pretrained(paths["pretrain.npz"])
    rep, _ = pl.gap(cfg, ds, pre)
    d = rep.to_dict(include_time=False)
    d["cells"] = list(cfg.gap_cells)
    _write_json(os.path.join(out, "gap.json"), d)
    log.info("gap %.2f%% over %d partitions", rep.gap_percent, rep.n_partitions_searched)
    return ["gap.json"]


def _read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg, out):
    paths = _require(out, "report")
    with open(paths["clusters.json"]) as fh:
        clusters = json.load(fh)
    with open(paths["metrics.json"]) as fh:
        metrics = json.load(fh)
    with open(paths["gap.json"]) as fh:
        gap = json.load(fh)
    trace = _read_csv_rows(paths["trace.csv"])
    evo = _read_csv_rows(paths["cluster_evolution.csv"])
    report = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "clusters": clusters,
        "metrics": metrics,
        "gap": gap,
        "objective_trace": [{k: float(v) for k, v in r.items()} for r in trace],
        "cluster_count_trajectory": [int(r["n_clusters"]) for r in evo],
    }
    _write_json(os.path.join(out, "report.json"), report)
    return ["report.json"]


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "solve": cmd_solve,
    "evaluate": cmd_evaluate, "gap": cmd_gap, "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="qosclust", description=__doc__.split("\n")[0])
    p.add_argument("stage", choices=tuple(COMMANDS))
    p.add_argument("--config", help="TOML experiment config (defaults to the reference setup)")
    p.add_argument("--seed", type=int, help="root seed (overrides config and environment)")
    p.add_argument("--mode", choices=cfgmod.MODES, help="solver execution mode")
    p.add_argument("--out", help="output directory (overrides config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, mode=args.mode, output_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"config error: output_dir: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        written = COMMANDS[args.stage](cfg, out)
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalDomainError, DivergenceError, IterationLimitError) as exc:
        diag = getattr(exc, "diagnostics", {})
        print(f"numerical failure in stage {args.stage}: {exc} {diag or ''}".rstrip(), file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    update_manifest(cfg, out, args.stage, time.perf_counter() - t0, written)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
