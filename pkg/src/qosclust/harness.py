"""In-process simulation of the federated solver with byte-exact accounting.

Base stations (``Node``) hold their own batch and distance row; the ``Server``
holds the assignment matrix and the loss matrix. Every exchange is a
``NodeMsg`` on the round's bus. A round either completes and its messages are
committed to the ``CommLedger`` at the barrier, or it raises
``RoundIncompleteError`` and leaves server, nodes and ledger untouched.

Nodes keep the last committed heads, assignment and loss row. Candidates sent
during backtracking are only adopted once the server multicasts a commit.
The arithmetic is the solver's own per-cell and server functions, so a
harness iteration reproduces :func:`qosclust.solver.iterate` exactly.
"""
from dataclasses import dataclass, field
import csv
import json
import math

import numpy as np

from . import assignment as asg
from . import solver as so
from .errors import InvariantError, RoundIncompleteError

BYTES_PER_SCALAR = 4
SERVER = -1  # sender/receiver id of the server; also the node_id of multicasts
ALL = -2  # receiver id of a multicast

MSG_KINDS = ("HeadUpdate", "LossReport", "AssignRow", "HeadBroadcast", "AssignBroadcast", "Ack")
MODEL_KINDS = ("HeadUpdate", "HeadBroadcast")  # the model-parameter traffic compared against full-model FL
LEDGER_COLUMNS = ("round", "node_id", "direction", "bytes", "kind")


@dataclass(frozen=True)
class NodeMsg:
    kind: str
    sender: int
    receiver: int
    payload: np.ndarray = None
    meta: tuple = ()  # e.g. cluster ids of a head broadcast
    b: int = BYTES_PER_SCALAR

    def __post_init__(self):
        if self.kind not in MSG_KINDS:
            raise InvariantError(f"unknown message kind {self.kind!r}")

    @property
    def payload_bytes(self):
        return 0 if self.payload is None else int(np.asarray(self.payload).size) * self.b

    @property
    def direction(self):
        return "up" if self.receiver == SERVER else "down"


def account_bytes(n_cells, f_total, f_last, n_clusters, b=BYTES_PER_SCALAR):
    """Per-round byte counts ``(up_global, up_cluster, down_global, down_cluster)``.

    Full-model FL uploads ``F`` scalars per cell and broadcasts one model;
    last-layer clustering uploads ``F_last`` per cell and broadcasts one head
    per cluster.
    """
    for name, v in (("n_cells", n_cells), ("f_total", f_total), ("f_last", f_last),
                    ("n_clusters", n_clusters), ("b", b)):
        if v <= 0:
            raise InvariantError(f"{name} must be positive")
    return n_cells * f_total * b, n_cells * f_last * b, f_total * b, n_clusters * f_last * b


def communication_summary(n_cells, f_total, f_last, n_clusters, b=BYTES_PER_SCALAR):
    up_g, up_c, down_g, down_c = account_bytes(n_cells, f_total, f_last, n_clusters, b)
    return {
        "n_cells": n_cells, "f_total": f_total, "f_last": f_last, "n_clusters": n_clusters, "b": b,
        "up_global": up_g, "up_cluster": up_c, "down_global": down_g, "down_cluster": down_c,
        "uplink_ratio": up_g / up_c, "downlink_ratio": down_g / down_c,
    }


def schedule(clock, update_period, total_duration):
    """Refresh times ``clock + k * update_period`` for every full period inside the run."""
    if update_period <= 0:
        raise InvariantError("update_period must be positive")
    n = int(math.floor(total_duration / update_period + 1e-9))
    return [clock + k * update_period for k in range(n)]


def run_schedule(times, make_federation, iters=1, ledger=None):
    """One refresh per timestamp, all logged to one ledger with continuing round ids.

    ``make_federation(t)`` builds a fresh federation on the data window ending
    at ``t``; each refresh runs ``iters`` BCD iterations. Returns the ledger and
    the final state of every refresh.
    """
    ledger = CommLedger() if ledger is None else ledger
    states, offset = [], max(ledger.rounds(), default=0)
    for t in times:
        fed = make_federation(t)
        fed.ledger, fed.server.round = ledger, offset
        for _ in range(iters):
            fed.iterate()
        offset = fed.server.round
        states.append(fed.state)
    return ledger, states


class CommLedger:
    """Append-only log of committed messages."""

    def __init__(self):
        self.entries = []  # (round, node_id, direction, bytes, kind)

    def commit(self, round_id, messages):
        for m in messages:
            node = m.sender if m.direction == "up" else (SERVER if m.receiver == ALL else m.receiver)
            self.entries.append((round_id, node, m.direction, m.payload_bytes, m.kind))

    def total(self, direction=None, kinds=None, round_id=None, node_id=None):
        return sum(e[3] for e in self.entries
                   if (direction is None or e[2] == direction)
                   and (kinds is None or e[4] in kinds)
                   and (round_id is None or e[0] == round_id)
                   and (node_id is None or e[1] == node_id))

    def per_node(self, direction=None, kinds=None):
        out = {}
        for r, node, d, nbytes, kind in self.entries:
            if (direction is None or d == direction) and (kinds is None or kind in kinds):
                out[node] = out.get(node, 0) + nbytes
        return out

    def rounds(self):
        return sorted({e[0] for e in self.entries})

    def cumulative(self, direction="up", kinds=None):
        """Cumulative bytes after each round, in round order."""
        acc, out = 0, []
        for r in self.rounds():
            acc += self.total(direction, kinds, r)
            out.append(acc)
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_COLUMNS)
            w.writerows(self.entries)

    def summary(self, n_cells, f_total, f_last, n_clusters, b=BYTES_PER_SCALAR):
        s = communication_summary(n_cells, f_total, f_last, n_clusters, b)
        s["observed"] = {
            "rounds": len(self.rounds()),
            "uplink_model": self.total("up", MODEL_KINDS),
            "downlink_model": self.total("down", MODEL_KINDS),
            "uplink_other": self.total("up") - self.total("up", MODEL_KINDS),
            "downlink_other": self.total("down") - self.total("down", MODEL_KINDS),
        }
        return s

    def write_summary(self, path, **kw):
        with open(path, "w") as fh:
            json.dump(self.summary(**kw), fh, indent=2)


class Bus:
    """One round's message buffer. Messages from dropped nodes are lost."""

    def __init__(self, dropped=()):
        self.dropped = frozenset(dropped)
        self.log = []

    def send(self, msg):
        if msg.sender in self.dropped:
            return False
        self.log.append(msg)
        return True

    def gather(self, kind, senders, since=0):
        """Messages of ``kind`` from every expected sender, ascending sender id.

        Only messages sent at or after log position ``since`` are considered.
        """
        got = {m.sender: m for m in self.log[since:] if m.kind == kind and m.sender in senders}
        missing = sorted(set(senders) - set(got))
        if missing:
            raise RoundIncompleteError(f"no {kind} from nodes {missing}")
        return [got[s] for s in sorted(got)]


class Node:
    """A base station: its batch, its distance row and the last committed state."""

    def __init__(self, node_id, Ha, Y, d_row, heads, A, b=BYTES_PER_SCALAR):
        self.id = node_id
        self.Ha, self.Y, self.d_row = Ha, Y, np.asarray(d_row, dtype=np.float64)
        self.heads = np.array(heads, dtype=np.float64)
        self.A = np.array(A, dtype=np.float64)
        self.loss_row = so.cell_loss_row(Ha, Y, self.heads)
        self.b = b
        self._pending = None

    def head_update(self, cluster, step):
        new = so.local_head_update(self.Ha, self.Y, self.heads[cluster], step)
        return NodeMsg("HeadUpdate", self.id, SERVER, new, (cluster,), self.b)

    def loss_report(self, msg):
        """Loss row for the heads in ``msg`` (a HeadBroadcast); kept pending until commit."""
        cand = self.heads.copy()
        cand[list(msg.meta)] = msg.payload
        row = so.cell_loss_row(self.Ha, self.Y, cand)
        self._pending = ("heads", cand, row)
        return NodeMsg("LossReport", self.id, SERVER, row, (), self.b)

    def assign_row(self, lam, step):
        z = so.cell_z_row(self.id, self.A, self.loss_row, self.d_row, lam, step)
        return NodeMsg("AssignRow", self.id, SERVER, z, (), self.b)

    def stage_assignment(self, msg):
        self._pending = ("A", np.array(msg.payload), None)

    def commit(self):
        if self._pending is None:
            return
        what, value, row = self._pending
        if what == "heads":
            self.heads, self.loss_row = value, row
        else:
            self.A = value
        self._pending = None

    def discard(self):
        self._pending = None

    def ack(self):
        return NodeMsg("Ack", self.id, SERVER, None, (), self.b)


class Server:
    """Holds A, the heads, the loss matrix and the trace; aggregates and selects."""

    def __init__(self, state, D, config, b=BYTES_PER_SCALAR):
        self.state = state
        self.D = np.asarray(D, dtype=np.float64)
        self.config = config
        self.b = b
        self.round = 0
        self._f_mid = None  # block-1 objective of the iteration in progress
        self._block1 = None


def _multicast(kind, payload, meta, b):
    return NodeMsg(kind, SERVER, ALL, payload, meta, b)


def _round_block1(nodes, server, bus):
    st, cfg = server.state, server.config
    step = 1.0 / cfg.L_theta
    ids = [n.id for n in nodes]
    for n in nodes:
        bus.send(n.head_update(int(st.clusters.labels[n.id]), step))
    updates = bus.gather("HeadUpdate", ids)
    by_cell = {m.sender: m.payload for m in updates}
    aggregated = {c: so.fedavg([by_cell[i] for i in st.clusters.sets[c]]) for c in st.clusters.active}

    def loss_fn(cand):
        active = sorted(aggregated)
        msg = _multicast("HeadBroadcast", cand[active], tuple(active), server.b)
        mark = len(bus.log)
        bus.send(msg)
        for n in nodes:
            bus.send(n.loss_report(msg))
        return np.vstack([m.payload for m in bus.gather("LossReport", ids, since=mark)])

    f_prev = st.objective_values()[-1]
    heads, Lmat, br, halvings, ok = so.select_heads(st.assignment, server.D, st.heads, aggregated,
                                                    loss_fn, f_prev, cfg)
    if not ok:
        heads, Lmat = st.heads, st.loss_matrix
        br = so.objective(st.assignment, Lmat, server.D, cfg.lam, cfg.beta)
    return heads, Lmat, br, halvings, ok


def _round_block2(nodes, server, bus, heads, Lmat, br1):
    st, cfg = server.state, server.config
    ids = [n.id for n in nodes]
    step = 1.0 / cfg.L_a
    for n in nodes:
        bus.send(n.assign_row(cfg.lam, step))
    rows = bus.gather("AssignRow", ids)
    Z = np.vstack([m.payload for m in rows])
    f_prev = st.objective_values()[-1]
    A_new, br, halvings, ok = so.select_assignment(st.assignment, Z, Lmat, server.D, min(br1.total, f_prev), cfg)
    if not ok:
        return st.assignment, st.clusters, so.objective(st.assignment, Lmat, server.D, cfg.lam, cfg.beta), halvings, False
    msg = _multicast("AssignBroadcast", A_new, (), server.b)
    bus.send(msg)
    for n in nodes:
        n.stage_assignment(msg)
    return A_new, asg.extract_clusters(A_new), br, halvings, True


def run_round(nodes, server, round_kind, ledger, dropped=()):
    """Execute one barrier round; returns the round's committed messages.

    ``block1`` runs the head exchange and FedAvg; ``block2`` the assignment
    exchange and completes the iteration (the new state is installed on the
    server). Any missing node message aborts the round with nothing changed.
    """
    if round_kind not in ("block1", "block2"):
        raise InvariantError(f"unknown round kind {round_kind!r}")
    if round_kind == "block1" and server._block1 is not None:
        raise InvariantError("block1 round while a block2 round is pending")
    if round_kind == "block2" and server._block1 is None:
        raise InvariantError("block2 round without a preceding block1 round")
    bus = Bus(dropped)
    try:
        if round_kind == "block1":
            out = _round_block1(nodes, server, bus)
        else:
            out = _round_block2(nodes, server, bus, *server._block1[:3])
        for n in nodes:
            bus.send(n.ack())
        bus.gather("Ack", [n.id for n in nodes])
    except RoundIncompleteError:
        for n in nodes:
            n.discard()
        raise
    # barrier: commit everywhere
    server.round += 1
    ledger.commit(server.round, bus.log)
    for n in nodes:
        if round_kind == "block1" and not out[4]:
            n.discard()
        else:
            n.commit()
    if round_kind == "block1":
        server._block1 = out
    else:
        _install(server, out)
    return list(bus.log)


def _install(server, block2):
    st = server.state
    heads, Lmat, br1, h1, ok1 = server._block1
    A, clusters, br2, h2, ok2 = block2
    f_prev = st.objective_values()[-1]
    rejected = tuple(name for name, ok in (("theta", ok1), ("a", ok2)) if not ok)
    rec = so.IterationRecord(
        iter=st.iter + 1, objective=br2, n_clusters=clusters.n_clusters,
        step_a=float(np.linalg.norm(A - st.assignment)),
        step_theta=float(np.linalg.norm(heads - st.heads)),
        halvings_theta=h1, halvings_a=h2, rejected=rejected,
        monotone_violation=bool(br2.total > f_prev + server.config.increase_tol),
    )
    server.state = so.SolverState(
        st.iter + 1, A, heads, Lmat, clusters, st.initial,
        st.trace + [rec], st.label_history + [clusters.labels.copy()],
    )
    server._block1 = None


@dataclass
class Federation:
    nodes: list
    server: Server
    ledger: CommLedger = field(default_factory=CommLedger)

    @classmethod
    def setup(cls, batches, D, init_head, config, n_clusters=None, b=BYTES_PER_SCALAR):
        """Initial state A = I, every head = ``init_head``, on every node and the server."""
        config = so.resolve_config(config, batches)
        D = np.asarray(D, dtype=np.float64)
        if D.shape != (batches.n_cells, batches.n_cells):
            raise InvariantError("distance matrix does not match the number of cells")
        st = so.initial_state(batches, D, init_head, config, n_clusters)
        nodes = [Node(i, batches.Ha[i], batches.Y[i], D[i], st.heads, st.assignment, b)
                 for i in range(batches.n_cells)]
        return cls(nodes, Server(st, D, config, b))

    @property
    def state(self):
        return self.server.state

    def iterate(self, dropped=()):
        run_round(self.nodes, self.server, "block1", self.ledger, dropped)
        run_round(self.nodes, self.server, "block2", self.ledger, dropped)
        return self.server.state

    def solve(self, callback=None):
        """Same loop and stopping rule as :func:`qosclust.solver.solve`."""
        cfg = self.server.config
        calm = 0
        for _ in range(cfg.max_iters):
            prev = self.state.objective_values()[-1]
            st = self.iterate()
            cur = st.trace[-1].objective.total
            if callback is not None:
                callback(st)
            calm = calm + 1 if abs(cur - prev) / max(abs(prev), 1e-300) < cfg.stop_rel_tol else 0
            if calm >= cfg.stop_patience:
                st.stopped_early = True
                break
        return self.state
