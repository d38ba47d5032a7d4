"""Synthetic per-cell KPI streams with daily load cycles and scheduled drift.

Each cell follows an archetype: a base KPI Gaussian (log domain for
latency/jitter, dBm for RSRP) whose mean and covariance scale with the cell
load. Load follows a shared 24 h profile shifted and scaled per archetype,
plus slow AR(1) fluctuations. Drift events move the mean and scale the
covariance of the affected cells, suddenly or along a linear ramp.
"""
from dataclasses import dataclass, field
import csv
import math

import numpy as np
from scipy.signal import lfilter

from .distributions import (
    COV_FLOOR, KpiSpec, cov_to_tilde, default_kpis, moment_match, rolling_fit, tril_size,
    vectors_to_moments,
)
from .errors import InsufficientDataError, InvariantError

N_PROXIES = 5  # load, speed, packets over the window, packets over the horizon, radio
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

REFERENCE_PROFILE = (
    (0.0, 0.15), (5.0, 0.1), (7.0, 0.8), (8.5, 1.0), (10.0, 0.6), (16.0, 0.6),
    (17.5, 1.0), (19.0, 0.7), (22.0, 0.3), (24.0, 0.15),
)


@dataclass(frozen=True)
class Archetype:
    mean: tuple  # Gaussian-domain base mean
    cov: tuple  # Gaussian-domain base covariance (nested rows)
    load_sensitivity: tuple  # mean shift per unit load
    cov_load: float = 0.5  # covariance scale grows as 1 + cov_load * load
    load_gain: float = 1.0
    profile_shift_h: float = 0.0
    load_noise: float = 0.08
    speed_kmh: float = 50.0

    def cov_array(self):
        return np.array(self.cov, dtype=np.float64)


@dataclass(frozen=True)
class DriftEvent:
    start_time: float  # seconds
    ramp_duration: float  # seconds; 0 means sudden
    affected_cells: tuple
    mean_shift: tuple
    cov_scale: float = 1.0

    def weight(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.ramp_duration <= 0:
            return (t >= self.start_time).astype(np.float64)
        return np.clip((t - self.start_time) / self.ramp_duration, 0.0, 1.0)


@dataclass(frozen=True)
class ScenarioConfig:
    n_cells: int
    archetypes: dict
    cell_archetypes: tuple
    kpis: KpiSpec = field(default_factory=default_kpis)
    daily_profile: tuple = REFERENCE_PROFILE
    drift_events: tuple = ()
    cell_mean_jitter: float = 0.02
    sample_period: int = 1
    summary_window: int = 900
    horizon: int = 3600
    duration: int = 86400
    row_stride: int = 60
    proxy_snr_db: float = 10.0
    seed: int = 0

    def validate(self):
        if self.n_cells < 2:
            raise InvariantError("n_cells must be >= 2")
        if len(self.cell_archetypes) != self.n_cells:
            raise InvariantError("cell_archetypes must list one archetype per cell")
        if self.horizon <= self.summary_window:
            raise InvariantError("horizon must exceed summary_window")
        if self.sample_period <= 0 or self.row_stride <= 0:
            raise InvariantError("sample_period and row_stride must be positive")
        if self.summary_window % self.sample_period or self.horizon % self.sample_period:
            raise InvariantError("summary_window and horizon must be multiples of sample_period")
        if self.duration < self.summary_window + self.horizon:
            raise InvariantError("duration too short for one window plus the horizon")
        d = self.kpis.dim
        for name in self.cell_archetypes:
            if name not in self.archetypes:
                raise InvariantError(f"unknown archetype {name!r}")
        for name, a in self.archetypes.items():
            cov = a.cov_array()
            if len(a.mean) != d or cov.shape != (d, d) or len(a.load_sensitivity) != d:
                raise InvariantError(f"archetype {name!r} has wrong dimensions")
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov)[0] <= 0:
                raise InvariantError(f"archetype {name!r} covariance is not positive definite")
            if a.cov_load < 0:
                raise InvariantError(f"archetype {name!r} cov_load must be nonnegative")
        for ev in self.drift_events:
            if len(ev.mean_shift) != d:
                raise InvariantError("drift mean_shift has wrong dimension")
            if ev.cov_scale <= 0:
                raise InvariantError("drift cov_scale must be positive (post-drift covariance PD)")
            if any(not 0 <= c < self.n_cells for c in ev.affected_cells):
                raise InvariantError("drift affects a nonexistent cell")
        hours = [h for h, _ in self.daily_profile]
        if hours != sorted(hours) or hours[0] > 0 or hours[-1] < 24:
            raise InvariantError("daily_profile knots must be sorted and cover [0, 24] h")
        return self

    @property
    def window_ticks(self):
        return self.summary_window // self.sample_period

    @property
    def horizon_ticks(self):
        return self.horizon // self.sample_period

    @property
    def n_features(self):
        d = self.kpis.dim
        return N_PROXIES + d + tril_size(d)

    @property
    def n_targets(self):
        d = self.kpis.dim
        return d + tril_size(d)


def _cov(stds, corr):
    s = np.asarray(stds)
    return tuple(map(tuple, np.asarray(corr) * np.outer(s, s)))


def reference_archetypes():
    corr = [[1.0, 0.6, -0.3], [0.6, 1.0, -0.2], [-0.3, -0.2, 1.0]]
    return {
        "urban_dense": Archetype(
            mean=(math.log(25.0), math.log(5.0), -95.0), cov=_cov((0.25, 0.35, 2.0), corr),
            load_sensitivity=(0.9, 1.0, -3.0), cov_load=0.8, load_gain=1.0,
            profile_shift_h=0.0, speed_kmh=30.0,
        ),
        "suburban": Archetype(
            mean=(math.log(15.0), math.log(3.0), -88.0), cov=_cov((0.2, 0.3, 1.5), corr),
            load_sensitivity=(0.4, 0.5, -1.0), cov_load=0.4, load_gain=0.6,
            profile_shift_h=-1.0, speed_kmh=50.0,
        ),
        "highway": Archetype(
            mean=(math.log(20.0), math.log(4.0), -100.0), cov=_cov((0.3, 0.4, 2.5), corr),
            load_sensitivity=(1.4, 1.2, -4.0), cov_load=1.2, load_gain=1.2,
            profile_shift_h=1.5, speed_kmh=100.0,
        ),
    }


def reference_scenario(seed=0):
    """Twelve cells in three archetype families, one gradual drift at hour 12.

    The drift hits two urban and two suburban cells, giving a five-group
    ground truth (see :func:`ground_truth_labels`). Two daily cycles are
    simulated so that the contiguous test block (the second evening) covers a
    load regime the training block has already seen once.
    """
    cells = ("urban_dense",) * 4 + ("suburban",) * 4 + ("highway",) * 4
    drift = DriftEvent(
        start_time=12 * 3600.0, ramp_duration=2 * 3600.0, affected_cells=(0, 1, 4, 5),
        mean_shift=(0.35, 0.4, -4.0), cov_scale=1.6,
    )
    return ScenarioConfig(
        n_cells=12, archetypes=reference_archetypes(), cell_archetypes=cells,
        drift_events=(drift,), duration=2 * 86400, seed=seed,
    ).validate()


def ground_truth_labels(config):
    """Group cells by archetype and by the set of drift events that hit them."""
    keys = []
    for i, name in enumerate(config.cell_archetypes):
        hits = tuple(k for k, ev in enumerate(config.drift_events) if i in ev.affected_cells)
        keys.append((name, hits))
    order = {}
    return np.array([order.setdefault(k, len(order)) for k in keys])


# -- streams -----------------------------------------------------------------


@dataclass
class CellStream:
    """Raw per-second samples for one cell."""

    timestamps: np.ndarray  # seconds
    kpi: np.ndarray  # (T, d) raw units
    proxies: np.ndarray  # (T, N_PROXIES)
    load: np.ndarray = None  # generative load, kept for diagnostics


def _cell_rng(config, i):
    return np.random.default_rng([config.seed, 7919, i])


def daily_load(config, archetype, t):
    hours, vals = zip(*config.daily_profile)
    h = np.mod(np.asarray(t, dtype=np.float64) / 3600.0 + archetype.profile_shift_h, 24.0)
    return archetype.load_gain * np.interp(h, hours, vals)


def _noisy(rng, signal, snr_db):
    std = float(np.std(signal))
    if std == 0.0:
        return signal.copy()
    return signal + rng.normal(0.0, std * 10 ** (-snr_db / 20.0), size=signal.shape)


def trailing_mean(x, width):
    """Mean of ``x`` over the trailing ``width`` samples (fewer at the start)."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.shape[0] + 1)
    lo = np.maximum(idx - width, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def generate_stream(config, i):
    """Simulate cell ``i``; a pure function of ``(config, i)``."""
    rng = _cell_rng(config, i)
    arch = config.archetypes[config.cell_archetypes[i]]
    d = config.kpis.dim
    t = np.arange(0, config.duration, config.sample_period, dtype=np.int64)
    T = t.shape[0]
    phi = math.exp(-config.sample_period / 600.0)
    innov = rng.normal(0.0, arch.load_noise * math.sqrt(1.0 - phi * phi), size=T)
    wander = lfilter([1.0], [1.0, -phi], innov)
    load = np.maximum(daily_load(config, arch, t) + wander, 0.0)
    offset = rng.normal(0.0, config.cell_mean_jitter, size=d)
    mean = (np.asarray(arch.mean) + offset)[None, :] + load[:, None] * np.asarray(arch.load_sensitivity)[None, :]
    scale = 1.0 + arch.cov_load * load
    for ev in config.drift_events:
        if i in ev.affected_cells:
            w = ev.weight(t)
            mean = mean + w[:, None] * np.asarray(ev.mean_shift)[None, :]
            scale = scale * (1.0 + w * (ev.cov_scale - 1.0))
    L = np.linalg.cholesky(arch.cov_array())
    z = mean + np.sqrt(scale)[:, None] * (rng.standard_normal((T, d)) @ L.T)
    kpi = config.kpis.inverse(z)
    snr = config.proxy_snr_db
    speed = arch.speed_kmh * (1.0 - 0.3 * load / max(arch.load_gain, 1e-9))
    # packet counters over two trailing spans; their ratio exposes the load trend
    proxies = np.column_stack([
        _noisy(rng, load, snr),
        _noisy(rng, speed, snr),
        _noisy(rng, 1000.0 * trailing_mean(load, config.window_ticks), snr),
        _noisy(rng, 1000.0 * trailing_mean(load, config.horizon_ticks), snr),
        _noisy(rng, z[:, -1], snr),
    ])
    return CellStream(t, kpi, proxies, load)


def window_targets(stream, config):
    """Pair each feature row with the fitted KPI Gaussian one horizon later.

    A row at window end ``e`` (exclusive sample index) carries the latest
    proxies and the fit of the trailing window ``[e - W, e)``; its target is the
    fit of ``[e + H - W, e + H)``. Rows without a complete future window are
    dropped. Returns ``(times, X, Y)`` with ``times`` the feature timestamps.
    """
    order = np.argsort(stream.timestamps, kind="stable")
    ts = np.asarray(stream.timestamps)[order]
    W, H = config.window_ticks, config.horizon_ticks
    T = ts.shape[0]
    if T < W + H:
        raise InsufficientDataError(f"stream has {T} samples; need at least {W + H}")
    if T > 1 and np.any(np.diff(ts) != config.sample_period):
        raise InvariantError("stream timestamps are not on the sampling grid")
    z = config.kpis.forward(np.asarray(stream.kpi)[order])
    proxies = np.asarray(stream.proxies)[order]
    stride = max(1, config.row_stride // config.sample_period)
    ends = np.arange(W, T - H + 1, stride)
    cur_mu, cur_cov = rolling_fit(z, ends, W)
    fut_mu, fut_cov = rolling_fit(z, ends + H, W)
    X = np.hstack([proxies[ends - 1], cur_mu, cov_to_tilde(cur_cov)])
    Y = np.hstack([fut_mu, cov_to_tilde(fut_cov)])
    times = ts[ends - 1] + config.sample_period
    return times, X, Y


# -- datasets ----------------------------------------------------------------


@dataclass
class CellDataset:
    cell_id: np.ndarray
    timestamp: np.ndarray
    split: np.ndarray  # 'train' | 'val' | 'test'
    X: np.ndarray
    Y: np.ndarray
    kpi_dim: int = 3

    @property
    def n_cells(self):
        return int(self.cell_id.max()) + 1 if self.cell_id.size else 0

    def rows(self, cell=None, split=None):
        mask = np.ones(self.cell_id.shape[0], dtype=bool)
        if cell is not None:
            mask &= self.cell_id == cell
        if split is not None:
            mask &= self.split == split
        return np.flatnonzero(mask)

    def cell_arrays(self, split):
        """Per-cell (X, Y) lists for one split, in cell order."""
        Xs, Ys = [], []
        for i in range(self.n_cells):
            idx = self.rows(i, split)
            Xs.append(self.X[idx])
            Ys.append(self.Y[idx])
        return Xs, Ys

    def subset_cells(self, cells):
        cells = list(cells)
        remap = {c: k for k, c in enumerate(cells)}
        keep = np.isin(self.cell_id, cells)
        ids = np.array([remap[c] for c in self.cell_id[keep]], dtype=np.int64)
        return CellDataset(ids, self.timestamp[keep], self.split[keep], self.X[keep], self.Y[keep], self.kpi_dim)

    def cell_distributions(self, split="train"):
        """Per-cell Gaussian: moment-matched pool of the cell's fitted windows."""
        out = []
        for i in range(self.n_cells):
            means, covs = vectors_to_moments(self.Y[self.rows(i, split)], self.kpi_dim)
            out.append(moment_match(means, covs))
        return out


def split_labels(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))


def generate(config):
    """Build the full dataset; contiguous 70/10/20 time splits per cell."""
    config.validate()
    parts = []
    for i in range(config.n_cells):
        times, X, Y = window_targets(generate_stream(config, i), config)
        parts.append((np.full(times.shape[0], i, dtype=np.int64), times, split_labels(times.shape[0]), X, Y))
    cid, ts, sp, X, Y = (np.concatenate(p) for p in zip(*parts))
    return CellDataset(cid, ts, sp, X, Y, config.kpis.dim)


def write_csv(dataset, path):
    p, q = dataset.X.shape[1], dataset.Y.shape[1]
    header = ["cell_id", "timestamp", "split"] + [f"feat_{k}" for k in range(p)] + [f"tgt_{k}" for k in range(q)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(dataset.cell_id.shape[0]):
            w.writerow(
                [int(dataset.cell_id[k]), int(dataset.timestamp[k]), dataset.split[k]]
                + [repr(float(v)) for v in dataset.X[k]]
                + [repr(float(v)) for v in dataset.Y[k]]
            )


def read_csv(path, kpi_dim=None):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    if header[:3] != ["cell_id", "timestamp", "split"]:
        raise InvariantError("dataset CSV must start with cell_id,timestamp,split")
    feat = [k for k, h in enumerate(header) if h.startswith("feat_")]
    tgt = [k for k, h in enumerate(header) if h.startswith("tgt_")]
    arr = np.array([[float(row[k]) for k in feat + tgt] for row in rows]) if rows else np.zeros((0, len(feat) + len(tgt)))
    q = len(tgt)
    d = kpi_dim if kpi_dim is not None else int(round((math.sqrt(9 + 8 * q) - 3) / 2))
    return CellDataset(
        np.array([int(row[0]) for row in rows], dtype=np.int64),
        np.array([int(row[1]) for row in rows], dtype=np.int64),
        np.array([row[2] for row in rows]),
        arr[:, :len(feat)],
        arr[:, len(feat):],
        d,
    )


# -- (de)serialisation of scenarios -----------------------------------------------


def scenario_to_dict(config):
    return {
        "n_cells": config.n_cells,
        "kpis": {"names": list(config.kpis.names), "transforms": list(config.kpis.transforms)},
        "archetypes": {
            name: {
                "mean": list(a.mean), "cov": [list(r) for r in a.cov],
                "load_sensitivity": list(a.load_sensitivity), "cov_load": a.cov_load,
                "load_gain": a.load_gain, "profile_shift_h": a.profile_shift_h,
                "load_noise": a.load_noise, "speed_kmh": a.speed_kmh,
            }
            for name, a in sorted(config.archetypes.items())
        },
        "cell_archetypes": list(config.cell_archetypes),
        "daily_profile": [list(k) for k in config.daily_profile],
        "drift_events": [
            {"start_time": e.start_time, "ramp_duration": e.ramp_duration,
             "affected_cells": list(e.affected_cells), "mean_shift": list(e.mean_shift),
             "cov_scale": e.cov_scale}
            for e in config.drift_events
        ],
        "cell_mean_jitter": config.cell_mean_jitter,
        "sample_period": config.sample_period,
        "summary_window": config.summary_window,
        "horizon": config.horizon,
        "duration": config.duration,
        "row_stride": config.row_stride,
        "proxy_snr_db": config.proxy_snr_db,
        "seed": config.seed,
    }


def scenario_from_dict(d):
    d = dict(d)
    kp = d.pop("kpis", None)
    arch = {
        name: Archetype(
            mean=tuple(a["mean"]), cov=tuple(tuple(r) for r in a["cov"]),
            load_sensitivity=tuple(a["load_sensitivity"]),
            **{k: a[k] for k in ("cov_load", "load_gain", "profile_shift_h", "load_noise", "speed_kmh") if k in a},
        )
        for name, a in d.pop("archetypes").items()
    }
    events = tuple(
        DriftEvent(
            start_time=float(e["start_time"]), ramp_duration=float(e.get("ramp_duration", 0.0)),
            affected_cells=tuple(e["affected_cells"]), mean_shift=tuple(e["mean_shift"]),
            cov_scale=float(e.get("cov_scale", 1.0)),
        )
        for e in d.pop("drift_events", ())
    )
    if "daily_profile" in d:
        d["daily_profile"] = tuple(tuple(k) for k in d["daily_profile"])
    kpis = KpiSpec(tuple(kp["names"]), tuple(kp["transforms"])) if kp else default_kpis()
    return ScenarioConfig(
        archetypes=arch, cell_archetypes=tuple(d.pop("cell_archetypes")), drift_events=events, kpis=kpis, **d,
    ).validate()


__all__ = [
    "Archetype", "DriftEvent", "ScenarioConfig", "CellStream", "CellDataset", "reference_scenario",
    "reference_archetypes", "ground_truth_labels", "generate", "generate_stream", "window_targets",
    "write_csv", "read_csv", "scenario_to_dict", "scenario_from_dict", "COV_FLOOR",
]
