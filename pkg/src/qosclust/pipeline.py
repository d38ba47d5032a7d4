"""Stage functions shared by the CLI and the end-to-end tests.

generate -> pretrain -> solve -> evaluate, plus the exhaustive-search gap on a
small cell subset. Each stage takes an :class:`~qosclust.config.ExperimentConfig`
and the previous stage's products; file I/O lives in :mod:`qosclust.cli`.
"""
from dataclasses import dataclass
import csv

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from . import harness as hs
from . import solver as so
from .distributions import distance_matrix, moment_match, vectors_to_moments
from .errors import InsufficientDataError
from .predictor import NetworkArch, param_count

TRACE_COLUMNS = ("iter", "f_total", "f_pred", "f_consist", "f_nuclear", "n_clusters", "step_a", "step_theta")


@dataclass
class Pretrained:
    base: object
    head: np.ndarray  # the pooled global head, in the whitened basis
    history: list
    best_epoch: int


@dataclass
class SolveResult:
    state: so.SolverState
    config: so.SolverConfig  # with the head step resolved
    ledger: object = None  # CommLedger in harness mode


def generate(cfg):
    return dg.generate(cfg.scenario)


def pretrain(cfg, dataset):
    """Pooled pretraining on the train split, then the whitened head basis."""
    tr, va = dataset.rows(split="train"), dataset.rows(split="val")
    arch = NetworkArch.for_kpis(dataset.X.shape[1], dataset.kpi_dim, **cfg.arch)
    (base, head), res = ev.train_global(dataset.X[tr], dataset.Y[tr], arch, cfg.pretrain,
                                        dataset.X[va] if va.size else None, dataset.Y[va] if va.size else None,
                                        cfg.whitening_floor)
    return Pretrained(base, head, res.history, res.best_epoch)


def cell_batches(cfg, dataset, base, cells=None):
    Xs, Ys = dataset.cell_arrays("train")
    if cells is not None:
        Xs, Ys = [Xs[i] for i in cells], [Ys[i] for i in cells]
    rng = np.random.default_rng(cfg.stage_seed("solver"))
    return so.prepare_batches(Xs, Ys, base, cfg.solver.batch_per_cell, rng)


def window_batches(cfg, dataset, base, until):
    """Newest ``batch_per_cell`` rows of every cell with timestamp <= ``until``, all splits."""
    Xs, Ys = [], []
    for i in range(dataset.n_cells):
        idx = dataset.rows(i)
        idx = idx[dataset.timestamp[idx] <= until][-cfg.solver.batch_per_cell:]
        if idx.size == 0:
            raise InsufficientDataError(f"cell {i} has no rows before t={until}")
        Xs.append(dataset.X[idx])
        Ys.append(dataset.Y[idx])
    D = distance_matrix([moment_match(*vectors_to_moments(y, dataset.kpi_dim)) for y in Ys])
    return so.prepare_batches(Xs, Ys, base), D


def scheduled_refresh(cfg, dataset, pre, clock, duration, iters=1):
    """Harness refreshes every ``update_period`` on the newest data window."""
    times = hs.schedule(clock, cfg.solver.update_period, duration)

    def make(t):
        batches, D = window_batches(cfg, dataset, pre.base, t)
        return hs.Federation.setup(batches, D, pre.head, cfg.solver, b=cfg.bytes_per_scalar)

    return hs.run_schedule(times, make, iters)


def cell_distance(dataset, cells=None):
    g = dataset.cell_distributions("train")
    if cells is not None:
        g = [g[i] for i in cells]
    return distance_matrix(g)


def solve(cfg, dataset, pre, cells=None, mode=None, callback=None):
    batches = cell_batches(cfg, dataset, pre.base, cells)
    D = cell_distance(dataset, cells)
    sc = so.resolve_config(cfg.solver, batches)
    if (mode or cfg.mode) == "harness":
        fed = hs.Federation.setup(batches, D, pre.head, sc, b=cfg.bytes_per_scalar)
        return SolveResult(fed.solve(callback), sc, fed.ledger)
    return SolveResult(so.solve(batches, D, pre.head, sc, callback=callback), sc)


def predictors(cfg, dataset, pre, heads, labels):
    """Global (the pooled pretrained head), Local (per-cell heads) and Clustered.

    Local heads use the solver's batches, head step and stopping rule.
    """
    batches = cell_batches(cfg, dataset, pre.base)
    L_theta = so.resolve_config(cfg.solver, batches).L_theta
    local = ev.train_local(batches, pre.head, L_theta, max_iters=cfg.solver.max_iters,
                           stop_rel_tol=cfg.solver.stop_rel_tol, patience=cfg.solver.stop_patience)
    n = dataset.n_cells
    return {
        "Global": ev.Predictor.single(pre.base, pre.head, n),
        "Local": ev.Predictor(pre.base, local, np.arange(n)),
        "Clustered": ev.Predictor(pre.base, np.asarray(heads), np.asarray(labels)),
    }


def evaluate(cfg, dataset, pre, heads, labels, split="test"):
    preds = predictors(cfg, dataset, pre, heads, labels)
    return ev.evaluate(preds, dataset, split, cfg.scenario.kpis.names), preds


def gap(cfg, dataset, pre):
    """BCD on the configured cell subset against the exhaustive optimum."""
    cells = list(cfg.gap_cells)
    res = solve(cfg, dataset, pre, cells=cells, mode="monolithic")
    batches = cell_batches(cfg, dataset, pre.base, cells)
    D = cell_distance(dataset, cells)
    return ev.gap_report(batches, D, res.state, cfg.solver.lam, cfg.solver.beta, cfg.gap_n_max), res


def communication(cfg, arch, n_cells, n_clusters):
    f_total, f_last = param_count(arch)
    return hs.communication_summary(n_cells, f_total, f_last, n_clusters, cfg.bytes_per_scalar)


# -- tabular outputs ---------------------------------------------------------------


def trace_rows(state):
    rows = []
    for r in state.trace:
        o = r.objective
        rows.append((r.iter, o.total, o.prediction_term, o.consistency_term, o.nuclear_term,
                     r.n_clusters, r.step_a, r.step_theta))
    return rows


def write_trace(state, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace_rows(state):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_cluster_evolution(state, path):
    """One row per iteration (0 = initial): effective C and every cell's label."""
    n = len(state.label_history[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "n_clusters"] + [f"cell_{i}" for i in range(n)])
        for k, labels in enumerate(state.label_history):
            w.writerow([k, len(set(labels.tolist()))] + labels.tolist())
