"""Block coordinate descent for joint clustering and per-cluster head training.

Objective over the relaxed assignment ``A`` (N x C, simplex rows) and the
stacked heads ``Theta`` (C heads)::

    F(A, Theta) = sum_c a_c . l_c + lam * sum_c a_c' D a_c + beta * ||A||_*

Block 1 takes a local gradient step on each member cell's head and averages
the results per cluster (FedAvg). Block 2 takes a gradient step on ``A``,
soft-thresholds its singular values and projects the rows onto the simplex.

The per-cell pieces (:func:`local_head_update`, :func:`cell_loss_row`,
:func:`cell_z_row`) and the server pieces (:func:`fedavg`,
:func:`select_heads`, :func:`select_assignment`) are the only arithmetic used
by both the monolithic solver and the federated harness.
"""
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from . import assignment as asg
from .errors import DivergenceError, InvariantError
from .predictor import augment, head_loss_grad, penultimate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 4e-4
    beta: float = 7e-3
    svt_threshold: float = None  # None -> beta / L_A
    step_theta_bounds: tuple = (1.0, None)  # (lower, upper) on L_Theta; None upper -> estimated
    step_a_bounds: tuple = (0.1, 0.1)
    max_iters: int = 300
    stop_rel_tol: float = 1e-6
    stop_patience: int = 5
    horizon_h: float = 3600.0
    update_period: float = 900.0
    batch_per_cell: int = 128
    backtracking: bool = True
    max_halvings: int = 20
    increase_tol: float = 1e-7
    projection: str = "dykstra"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise InvariantError("lam must be nonnegative")
        if self.beta <= 0:
            raise InvariantError("beta must be positive")
        if self.svt_threshold is not None and self.svt_threshold < 0:
            raise InvariantError("svt_threshold must be nonnegative")
        for name in ("step_theta_bounds", "step_a_bounds"):
            lo, hi = getattr(self, name)
            if hi is None:
                continue
            if not (0 < lo <= hi < math.inf):
                raise InvariantError(f"{name} must satisfy 0 < lower <= upper < inf")
        if self.max_iters < 0:
            raise InvariantError("max_iters must be >= 0")
        if self.batch_per_cell < 1:
            raise InvariantError("batch_per_cell must be positive")
        if self.projection not in ("dykstra", "sort"):
            raise InvariantError("projection must be 'dykstra' or 'sort'")

    @property
    def L_theta(self):
        return self.step_theta_bounds[1]

    @property
    def L_a(self):
        return self.step_a_bounds[1]

    @property
    def tau(self):
        return self.beta / self.L_a if self.svt_threshold is None else self.svt_threshold


@dataclass
class ObjectiveBreakdown:
    prediction_term: float
    consistency_term: float
    nuclear_term: float

    @property
    def total(self):
        return self.prediction_term + self.consistency_term + self.nuclear_term


@dataclass
class IterationRecord:
    iter: int
    objective: ObjectiveBreakdown
    n_clusters: int
    step_a: float
    step_theta: float
    halvings_theta: int = 0
    halvings_a: int = 0
    rejected: tuple = ()
    monotone_violation: bool = False


@dataclass
class SolverState:
    iter: int
    assignment: np.ndarray
    heads: np.ndarray  # (C, P+1, q)
    loss_matrix: np.ndarray  # (N, C)
    clusters: asg.ClusterSets
    initial: ObjectiveBreakdown = None
    trace: list = field(default_factory=list)
    label_history: list = field(default_factory=list)
    stopped_early: bool = False

    def objective_values(self):
        return [self.initial.total] + [r.objective.total for r in self.trace]


@dataclass
class CellBatches:
    """Fixed per-cell training batch: augmented penultimate features and targets."""

    Ha: list
    Y: list

    @property
    def n_cells(self):
        return len(self.Ha)

    def subset(self, cells):
        return CellBatches([self.Ha[i] for i in cells], [self.Y[i] for i in cells])


def prepare_batches(X_by_cell, Y_by_cell, base, batch_size=None, rng=None):
    """Draw a fixed batch per cell and cache its eval-mode penultimate features.

    With ``batch_size=None`` every row is used. Row order inside a batch follows
    the original order so a batch is a pure function of the drawn index set.
    """
    Ha, Ys = [], []
    for X, Y in zip(X_by_cell, Y_by_cell):
        X = np.atleast_2d(X)
        if X.shape[0] == 0:
            raise InvariantError("a cell has an empty training batch")
        if batch_size is not None and X.shape[0] > batch_size:
            idx = np.sort(rng.choice(X.shape[0], size=batch_size, replace=False))
            X, Y = X[idx], np.asarray(Y)[idx]
        Ha.append(augment(penultimate(X, base, "eval")))
        Ys.append(np.asarray(Y, dtype=np.float64))
    return CellBatches(Ha, Ys)


def estimate_L_theta(batches):
    """Largest per-cell Lipschitz constant of the head-loss gradient."""
    best = 0.0
    for Ha, Y in zip(batches.Ha, batches.Y):
        h = Ha.T @ Ha
        best = max(best, 2.0 * np.linalg.eigvalsh(h)[-1] / (Ha.shape[0] * Y.shape[1]))
    return best


# -- per-cell (base-station) computations ----------------------------------------


def local_head_update(Ha, Y, head, step):
    g = head_loss_grad(Ha, Y, head)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite head gradient")
    return head - step * g


def cell_loss_row(Ha, Y, heads):
    """Mean eval-mode MSE of every head on one cell's batch, shape (C,)."""
    C, P1, q = heads.shape
    pred = Ha @ heads.transpose(1, 0, 2).reshape(P1, C * q)
    r = pred.reshape(Ha.shape[0], C, q) - Y[:, None, :]
    return np.mean(r * r, axis=(0, 2))


def cell_z_row(i, A, loss_row, d_row, lam, step):
    """Assignment gradient step for cell ``i``: ``a_i - step * (l_i + 2 lam (D A)_i)``."""
    grad = loss_row + 2.0 * lam * (d_row @ A)
    return A[i] - step * grad


# -- server computations -------------------------------------------------------


def fedavg(updates):
    """Average heads in the given (ascending cell) order."""
    acc = updates[0].copy()
    for u in updates[1:]:
        acc += u
    return acc / len(updates)


def objective(A, L, D, lam, beta):
    """Objective breakdown for assignment ``A`` and loss matrix ``L``."""
    pred = float(np.sum(A * L))
    consist = float(lam * np.sum(A * (D @ A)))
    nuc = float(beta * asg.nuclear_norm(A))
    return ObjectiveBreakdown(pred, consist, nuc)


def candidate_heads(heads, aggregated, scale):
    """Heads moved a fraction ``scale`` of the way to the FedAvg result."""
    cand = heads.copy()
    for c, agg in aggregated.items():
        cand[c] = agg if scale == 1.0 else heads[c] + scale * (agg - heads[c])
    return cand


def candidate_assignment(A, Z, scale, tau, projection):
    Zs = Z if scale == 1.0 else A + scale * (Z - A)
    return asg.project_rows_simplex(asg.svt(Zs, tau * scale), method=projection)


def select_heads(A, D, heads, aggregated, loss_fn, f_old, config):
    """Backtracking acceptance for block 1.

    ``loss_fn(candidate_heads)`` returns the full loss matrix. Returns
    ``(heads, loss_matrix, breakdown, halvings, accepted)``.
    """
    last = config.max_halvings if config.backtracking else 0
    for j in range(last + 1):
        cand = candidate_heads(heads, aggregated, 0.5**j)
        Lmat = loss_fn(cand)
        if not np.all(np.isfinite(Lmat)):
            raise DivergenceError("non-finite loss matrix in block 1", {"halvings": j})
        br = objective(A, Lmat, D, config.lam, config.beta)
        if not config.backtracking or br.total <= f_old + config.increase_tol:
            return cand, Lmat, br, j, True
    return None, None, None, last, False


def select_assignment(A, Z, Lmat, D, f_old, config):
    """Backtracking acceptance for block 2; returns ``(A, breakdown, halvings, accepted)``."""
    last = config.max_halvings if config.backtracking else 0
    for j in range(last + 1):
        A_new = candidate_assignment(A, Z, 0.5**j, config.tau, config.projection)
        br = objective(A_new, Lmat, D, config.lam, config.beta)
        if not config.backtracking or br.total <= f_old + config.increase_tol:
            return A_new, br, j, True
    return None, None, last, False


# -- monolithic blocks ---------------------------------------------------------


def loss_matrix(batches, heads):
    return np.vstack([cell_loss_row(Ha, Y, heads) for Ha, Y in zip(batches.Ha, batches.Y)])


def initial_state(batches, D, init_head, config, n_clusters=None):
    """A = identity (each cell its own cluster), every head = ``init_head``."""
    n = batches.n_cells
    C = n if n_clusters is None else n_clusters
    A = np.eye(n, C)
    heads = np.repeat(np.asarray(init_head, dtype=np.float64)[None], C, axis=0)
    Lmat = loss_matrix(batches, heads)
    clusters = asg.extract_clusters(A)
    st = SolverState(0, A, heads, Lmat, clusters)
    st.initial = objective(A, Lmat, D, config.lam, config.beta)
    st.label_history.append(clusters.labels.copy())
    return st


def block1_step(state, batches, D, config, f_old=None):
    """FedAvg head update with backtracking. Returns ``(heads, loss_matrix, breakdown, halvings, accepted)``."""
    step = 1.0 / resolve_config(config, batches).L_theta
    aggregated = {}
    for c in state.clusters.active:
        updates = [local_head_update(batches.Ha[i], batches.Y[i], state.heads[c], step) for i in state.clusters.sets[c]]
        aggregated[c] = fedavg(updates)
    if f_old is None:
        f_old = objective(state.assignment, state.loss_matrix, D, config.lam, config.beta).total
    out = select_heads(state.assignment, D, state.heads, aggregated, lambda h: loss_matrix(batches, h), f_old, config)
    if not out[4]:
        br = objective(state.assignment, state.loss_matrix, D, config.lam, config.beta)
        return state.heads, state.loss_matrix, br, out[3], False
    return out


def assignment_gradient(A, Lmat, D, lam):
    """Gradient of the smooth part of F with respect to A."""
    return Lmat + 2.0 * lam * (D @ A)


def block2_step(state, D, config, Lmat=None, f_old=None):
    """Assignment update with backtracking. Returns ``(A, clusters, breakdown, halvings, accepted)``."""
    A = state.assignment
    Lmat = state.loss_matrix if Lmat is None else Lmat
    step = 1.0 / config.L_a
    Z = np.vstack([cell_z_row(i, A, Lmat[i], D[i], config.lam, step) for i in range(A.shape[0])])
    if f_old is None:
        f_old = objective(A, Lmat, D, config.lam, config.beta).total
    A_new, br, halvings, ok = select_assignment(A, Z, Lmat, D, f_old, config)
    if not ok:
        return A, state.clusters, objective(A, Lmat, D, config.lam, config.beta), halvings, False
    return A_new, asg.extract_clusters(A_new), br, halvings, True


def iterate(state, batches, D, config):
    """One full BCD iteration (block 1 then block 2); returns a new state."""
    f_prev = state.objective_values()[-1]
    heads, Lmat, br1, h1, ok1 = block1_step(state, batches, D, config, f_old=f_prev)
    mid = replace(state, heads=heads, loss_matrix=Lmat, trace=state.trace, label_history=state.label_history)
    # the A-step must not raise F above either the mid-iterate or the iteration start
    A, clusters, br2, h2, ok2 = block2_step(mid, D, config, Lmat=Lmat, f_old=min(br1.total, f_prev))
    rejected = tuple(name for name, ok in (("theta", ok1), ("a", ok2)) if not ok)
    rec = IterationRecord(
        iter=state.iter + 1,
        objective=br2,
        n_clusters=clusters.n_clusters,
        step_a=float(np.linalg.norm(A - state.assignment)),
        step_theta=float(np.linalg.norm(heads - state.heads)),
        halvings_theta=h1,
        halvings_a=h2,
        rejected=rejected,
        monotone_violation=bool(br2.total > f_prev + config.increase_tol),
    )
    new = SolverState(
        state.iter + 1, A, heads, Lmat, clusters, state.initial,
        state.trace + [rec], state.label_history + [clusters.labels.copy()],
    )
    return new


def resolve_config(config, batches):
    """Fill an open upper head-step bound with the estimated Lipschitz constant."""
    lo, hi = config.step_theta_bounds
    if hi is not None:
        return config
    return replace(config, step_theta_bounds=(lo, max(lo, estimate_L_theta(batches))))


def solve(batches, D, init_head, config, n_clusters=None, callback=None):
    """Run block coordinate descent from A = I with every head at ``init_head``.

    Stops after ``max_iters`` iterations, or earlier once the relative
    objective change stays below ``stop_rel_tol`` for ``stop_patience``
    consecutive iterations.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (batches.n_cells, batches.n_cells):
        raise InvariantError("distance matrix does not match the number of cells")
    config = resolve_config(config, batches)
    state = initial_state(batches, D, init_head, config, n_clusters)
    calm = 0
    for _ in range(config.max_iters):
        prev = state.objective_values()[-1]
        state = iterate(state, batches, D, config)
        cur = state.trace[-1].objective.total
        if not math.isfinite(cur):
            raise DivergenceError("objective became non-finite", {"iter": state.iter})
        if callback is not None:
            callback(state)
        rel = abs(cur - prev) / max(abs(prev), 1e-300)
        calm = calm + 1 if rel < config.stop_rel_tol else 0
        if calm >= config.stop_patience:
            state.stopped_early = True
            break
    return state


@dataclass
class MonotoneReport:
    passed: bool
    violations: list  # (iteration index k, increase F^k - F^{k-1})
    tail_step_a: float
    tail_step_theta: float
    steps_vanish: bool

    def summary(self):
        status = "monotone" if not self.violations else f"{len(self.violations)} violation(s)"
        return (f"{status}; tail max step_a={self.tail_step_a:.3g}, "
                f"step_theta={self.tail_step_theta:.3g}")


def check_monotone(trace, gamma_tol=1e-7, initial=None, step_tol=1e-4, tail_frac=0.1):
    """Check ``F^{k+1} <= F^k + gamma_tol`` and that final-decile step norms fall below ``step_tol``.

    ``trace`` is a list of :class:`IterationRecord` or a plain list of objective
    values (in which case step norms are not checked).
    """
    records = [r for r in trace if isinstance(r, IterationRecord)]
    values = [r.objective.total for r in records] if records else [float(v) for v in trace]
    if initial is not None:
        values = [float(initial)] + values
    if len(values) < 2:
        raise InvariantError("need at least two objective values")
    offset = 0 if initial is not None else 1
    violations = [(k + offset, values[k] - values[k - 1])
                  for k in range(1, len(values)) if values[k] > values[k - 1] + gamma_tol]
    if records:
        n_tail = max(1, int(math.ceil(tail_frac * len(records))))
        tail = records[-n_tail:]
        ta = max(r.step_a for r in tail)
        tt = max(r.step_theta for r in tail)
        vanish = ta < step_tol and tt < step_tol
    else:
        ta = tt = float("nan")
        vanish = False
    return MonotoneReport(not violations, violations, ta, tt, vanish)
