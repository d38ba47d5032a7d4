"""Experiment configuration: TOML schema, strict key checks, env overrides, seeds.

Every key below is optional; missing keys take the reference defaults::

    seed = 0
    mode = "monolithic"          # or "harness"
    output_dir = "runs/reference"

    [scenario]                   # preset plus scalar overrides, or a full custom scenario
    preset = "reference"         # "reference" | "custom"

    [arch]                       # hidden, activation, dropout_rate, sharpness
    [pretrain]                   # lr, batch_size, epochs, patience, beta1, beta2, eps
    [basis]                      # whitening_floor
    [solver]                     # SolverConfig fields; step_theta_upper = "auto" estimates L_theta
    [gap]                        # cells (indices into the scenario), n_max
    [harness]                    # bytes_per_scalar

Environment variables ``QOSCL_<SECTION>__<KEY>`` (or ``QOSCL_<KEY>`` for top-level
keys) override the file; values are parsed as TOML scalars, falling back to
plain strings.
"""
from dataclasses import dataclass, field, fields, replace
import hashlib
import json
import os
import sys
import zlib

import numpy as np

from . import datagen as dg
from .errors import ConfigError, InvariantError, QosClustError
from .predictor import ACTIVATIONS, PretrainConfig
from .solver import SolverConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "QOSCL_"
MODES = ("monolithic", "harness")
STAGES = ("scenario", "pretraining", "solver", "evaluation")

SCENARIO_SCALARS = ("cell_mean_jitter", "sample_period", "summary_window", "horizon", "duration",
                    "row_stride", "proxy_snr_db")
SCENARIO_CUSTOM = ("n_cells", "kpis", "archetypes", "cell_archetypes", "daily_profile", "drift_events")
ARCH_KEYS = ("hidden", "activation", "dropout_rate", "sharpness")
PRETRAIN_KEYS = tuple(f.name for f in fields(PretrainConfig) if f.name != "seed")
SOLVER_KEYS = ("lam", "beta", "svt_threshold", "step_theta_lower", "step_theta_upper", "step_a_lower",
               "step_a_upper", "max_iters", "stop_rel_tol", "stop_patience", "update_period", "horizon_h",
               "batch_per_cell", "backtracking", "max_halvings", "increase_tol", "projection")


@dataclass
class ExperimentConfig:
    scenario: dg.ScenarioConfig
    solver: SolverConfig = field(default_factory=SolverConfig)
    arch: dict = field(default_factory=dict)  # NetworkArch keywords other than the dimensions
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    whitening_floor: float = 0.3
    gap_cells: tuple = (0, 2, 4, 6, 8, 10)
    gap_n_max: int = 8
    bytes_per_scalar: int = 4
    mode: str = "monolithic"
    output_dir: str = "runs/reference"
    seed: int = 0
    source: dict = field(default_factory=dict)  # the merged raw mapping, for hashing

    def stage_seed(self, name):
        return stage_seed(self.seed, name)

    def config_hash(self):
        """Hash of the experiment definition; where the outputs go is not part of it."""
        return config_hash({k: v for k, v in self.source.items() if k != "output_dir"})


def stage_seed(root, name):
    """Seed of the named substream; stable across platforms and Python versions."""
    if name not in STAGES:
        raise InvariantError(f"unknown seed stream {name!r}")
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def config_hash(mapping):
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(section, allowed, path):
    if not isinstance(section, dict):
        raise ConfigError(path, "expected a table")
    for k in section:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


def _parse_scalar(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env(raw, environ=None):
    """Overlay ``QOSCL_*`` variables onto a raw config mapping (returns a copy)."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(raw))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX) or key == "QOSCLUST_PURE_PYTHON":
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(parts), "environment override targets a non-table")
        node[parts[-1]] = _parse_scalar(environ[key])
    return out


def _field(section, key, path, kind, check=None, msg=""):
    v = section[key]
    path = f"{path}.{key}" if path else key
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and isinstance(v, bool) or not isinstance(v, kind):
        raise ConfigError(path, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    if check is not None and not check(v):
        raise ConfigError(path, msg or "value out of range")
    return v


def _scenario(raw, seed):
    _check_keys(raw, ("preset",) + SCENARIO_SCALARS + SCENARIO_CUSTOM, "scenario")
    preset = raw.get("preset", "reference")
    if preset == "reference":
        custom = [k for k in SCENARIO_CUSTOM if k in raw]
        if custom:
            raise ConfigError(f"scenario.{custom[0]}", "only allowed with preset = \"custom\"")
        base = dg.reference_scenario(seed)
        over = {}
        for k in SCENARIO_SCALARS:
            if k in raw:
                kind = float if k in ("cell_mean_jitter", "proxy_snr_db") else int
                over[k] = _field(raw, k, "scenario", kind)
        cfg = replace(base, **over)
    elif preset == "custom":
        d = {k: v for k, v in raw.items() if k != "preset"}
        d["seed"] = seed
        try:
            cfg = dg.scenario_from_dict(d)
        except KeyError as exc:
            raise ConfigError(f"scenario.{exc.args[0]}", "missing required key") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError("scenario", str(exc)) from exc
    else:
        raise ConfigError("scenario.preset", f"unknown preset {preset!r}")
    try:
        return cfg.validate()
    except InvariantError as exc:
        raise ConfigError("scenario", str(exc)) from exc


def _solver(raw):
    _check_keys(raw, SOLVER_KEYS, "solver")
    d = SolverConfig()
    kw = {}
    for k in ("lam", "beta", "stop_rel_tol", "increase_tol", "update_period", "horizon_h"):
        if k in raw:
            kw[k] = _field(raw, k, "solver", float, lambda v: v >= 0, "must be nonnegative")
    if "svt_threshold" in raw:
        kw["svt_threshold"] = _field(raw, "svt_threshold", "solver", float, lambda v: v >= 0, "must be nonnegative")
    for k in ("max_iters", "stop_patience", "batch_per_cell", "max_halvings"):
        if k in raw:
            kw[k] = _field(raw, k, "solver", int, lambda v: v >= 0, "must be nonnegative")
    if "backtracking" in raw:
        kw["backtracking"] = _field(raw, "backtracking", "solver", bool)
    if "projection" in raw:
        kw["projection"] = _field(raw, "projection", "solver", str, lambda v: v in ("dykstra", "sort"),
                                  "must be \"dykstra\" or \"sort\"")
    lo, hi = d.step_theta_bounds
    if "step_theta_lower" in raw:
        lo = _field(raw, "step_theta_lower", "solver", float, lambda v: v > 0, "must be positive")
    if "step_theta_upper" in raw:
        v = raw["step_theta_upper"]
        hi = None if v == "auto" else _field(raw, "step_theta_upper", "solver", float, lambda v: v > 0,
                                             "must be positive or \"auto\"")
    alo, ahi = d.step_a_bounds
    if "step_a_lower" in raw:
        alo = _field(raw, "step_a_lower", "solver", float, lambda v: v > 0, "must be positive")
    if "step_a_upper" in raw:
        ahi = _field(raw, "step_a_upper", "solver", float, lambda v: v > 0, "must be positive")
    try:
        return SolverConfig(step_theta_bounds=(lo, hi), step_a_bounds=(alo, ahi), **kw)
    except InvariantError as exc:
        raise ConfigError("solver", str(exc)) from exc


def from_mapping(raw, environ=None):
    """Validated :class:`ExperimentConfig` from a raw mapping plus env overrides."""
    raw = apply_env(raw, environ)
    _check_keys(raw, ("seed", "mode", "output_dir", "scenario", "arch", "pretrain", "basis", "solver", "gap",
                      "harness"), "")
    seed = _field(raw, "seed", "", int, lambda v: v >= 0, "must be nonnegative") if "seed" in raw else 0
    mode = _field(raw, "mode", "", str, lambda v: v in MODES, f"must be one of {MODES}") if "mode" in raw else "monolithic"
    out = _field(raw, "output_dir", "", str) if "output_dir" in raw else "runs/reference"

    arch = raw.get("arch", {})
    _check_keys(arch, ARCH_KEYS, "arch")
    arch_kw = {}
    if "hidden" in arch:
        h = arch["hidden"]
        if not isinstance(h, list) or not h or not all(isinstance(x, int) and x > 0 for x in h):
            raise ConfigError("arch.hidden", "expected a nonempty list of positive integers")
        arch_kw["hidden"] = tuple(h)
    if "activation" in arch:
        arch_kw["activation"] = _field(arch, "activation", "arch", str, lambda v: v in ACTIVATIONS,
                                       f"must be one of {ACTIVATIONS}")
    if "dropout_rate" in arch:
        arch_kw["dropout_rate"] = _field(arch, "dropout_rate", "arch", float, lambda v: 0 <= v < 1, "must lie in [0, 1)")
    if "sharpness" in arch:
        arch_kw["sharpness"] = _field(arch, "sharpness", "arch", float, lambda v: v > 0, "must be positive")

    pre = raw.get("pretrain", {})
    _check_keys(pre, PRETRAIN_KEYS, "pretrain")
    pkw = {}
    for k in PRETRAIN_KEYS:
        if k in pre:
            kind = int if k in ("batch_size", "epochs", "patience") else float
            pkw[k] = _field(pre, k, "pretrain", kind, lambda v: v > 0, "must be positive")

    basis = raw.get("basis", {})
    _check_keys(basis, ("whitening_floor",), "basis")
    floor = _field(basis, "whitening_floor", "basis", float, lambda v: v > 0, "must be positive") \
        if "whitening_floor" in basis else 0.3

    gap = raw.get("gap", {})
    _check_keys(gap, ("cells", "n_max"), "gap")
    n_max = _field(gap, "n_max", "gap", int, lambda v: v >= 1, "must be positive") if "n_max" in gap else 8
    cells = tuple(gap.get("cells", (0, 2, 4, 6, 8, 10)))

    harness = raw.get("harness", {})
    _check_keys(harness, ("bytes_per_scalar",), "harness")
    b = _field(harness, "bytes_per_scalar", "harness", int, lambda v: v > 0, "must be positive") \
        if "bytes_per_scalar" in harness else 4

    scenario = _scenario(raw.get("scenario", {}), stage_seed(seed, "scenario"))
    if not all(isinstance(c, int) and 0 <= c < scenario.n_cells for c in cells) or len(set(cells)) != len(cells):
        raise ConfigError("gap.cells", "expected distinct cell indices of the scenario")
    if len(cells) > n_max:
        raise ConfigError("gap.cells", f"exhaustive search is capped at n_max={n_max} cells")

    return ExperimentConfig(
        scenario=scenario, solver=_solver(raw.get("solver", {})), arch=arch_kw,
        pretrain=PretrainConfig(seed=stage_seed(seed, "pretraining"), **pkw), whitening_floor=floor,
        gap_cells=cells, gap_n_max=n_max, bytes_per_scalar=b, mode=mode, output_dir=out, seed=seed, source=raw,
    )


def load(path=None, environ=None, seed=None, mode=None, output_dir=None):
    """Read a TOML file (or the defaults when ``path`` is None) and apply overrides.

    Explicit ``seed``/``mode``/``output_dir`` arguments win over the environment.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    raw = apply_env(raw, environ)
    for k, v in (("seed", seed), ("mode", mode), ("output_dir", output_dir)):
        if v is not None:
            raw[k] = v
    try:
        return from_mapping(raw, environ={})
    except ConfigError:
        raise
    except QosClustError as exc:
        raise ConfigError("config", str(exc)) from exc
