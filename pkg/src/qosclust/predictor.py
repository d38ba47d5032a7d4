"""MLP predictor with a frozen base and a per-cluster trainable last layer.

The network maps a cell's feature vector to ``[mu, tilde_l]``: the mean of the
future KPI Gaussian and the unconstrained Cholesky entries of its covariance.
Only the final affine layer (the *head*) is adapted per cluster.
"""
from dataclasses import dataclass, field, asdict, replace
import io
import json
import logging

import numpy as np

from .distributions import GaussianParams, dim_from_output, tilde_to_chol, tril_size
from .errors import DivergenceError, InvariantError

log = logging.getLogger(__name__)

ACTIVATIONS = ("smooth_relu", "relu")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkArch:
    input_dim: int
    hidden: tuple = (256, 256, 128)
    output_dim: int = 9
    activation: str = "smooth_relu"
    dropout_rate: float = 0.2
    sharpness: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvariantError("input_dim and output_dim must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise InvariantError("at least one positive-width hidden layer is required")
        if self.activation not in ACTIVATIONS:
            raise InvariantError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvariantError("dropout_rate must lie in [0, 1)")
        dim_from_output(self.output_dim)

    @property
    def kpi_dim(self):
        return dim_from_output(self.output_dim)

    @property
    def penultimate(self):
        return self.hidden[-1]

    @classmethod
    def for_kpis(cls, input_dim, d, **kw):
        return cls(input_dim=input_dim, output_dim=d + tril_size(d), **kw)


def param_count(arch):
    """Total parameter count F and last-layer count F_last (weights + biases)."""
    widths = [arch.input_dim, *arch.hidden, arch.output_dim]
    total = sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))
    return total, (arch.hidden[-1] + 1) * arch.output_dim


@dataclass(frozen=True)
class BaseParams:
    """Frozen hidden layers plus fixed input and penultimate normalisations.

    ``h_shift``/``h_proj`` map the last hidden activations to
    ``(h - h_shift) @ h_proj`` before the head; both default to the identity.
    """

    arch: NetworkArch
    weights: tuple
    biases: tuple
    x_shift: np.ndarray = None
    x_scale: np.ndarray = None
    h_shift: np.ndarray = None
    h_proj: np.ndarray = None

    def __post_init__(self):
        n_in = self.arch.input_dim
        shift = np.zeros(n_in) if self.x_shift is None else np.asarray(self.x_shift, dtype=np.float64)
        scale = np.ones(n_in) if self.x_scale is None else np.asarray(self.x_scale, dtype=np.float64)
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        widths = [n_in, *self.arch.hidden]
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (widths[k], widths[k + 1]) or b.shape != (widths[k + 1],):
                raise InvariantError(f"layer {k} has shape {w.shape}/{b.shape}")
        P = self.arch.penultimate
        h_shift = np.zeros(P) if self.h_shift is None else np.array(self.h_shift, dtype=np.float64)
        h_proj = np.eye(P) if self.h_proj is None else np.array(self.h_proj, dtype=np.float64)
        if h_shift.shape != (P,) or h_proj.shape != (P, P):
            raise InvariantError("penultimate normalisation has the wrong shape")
        for arr in (*ws, *bs, shift, scale, h_shift, h_proj):
            arr.setflags(write=False)
        object.__setattr__(self, "h_shift", h_shift)
        object.__setattr__(self, "h_proj", h_proj)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "x_shift", shift)
        object.__setattr__(self, "x_scale", scale)

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, arch, flat, x_shift=None, x_scale=None, h_shift=None, h_proj=None):
        widths = [arch.input_dim, *arch.hidden]
        ws, bs, pos = [], [], 0
        for a, b in zip(widths[:-1], widths[1:]):
            ws.append(flat[pos:pos + a * b].reshape(a, b))
            pos += a * b
            bs.append(flat[pos:pos + b])
            pos += b
        if pos != len(flat):
            raise InvariantError("flat base vector has the wrong length")
        return cls(arch, tuple(ws), tuple(bs), x_shift, x_scale, h_shift, h_proj)


def head_shape(arch):
    return (arch.penultimate + 1, arch.output_dim)


def zero_head(arch):
    """Head with all weights and biases zero. Rows: penultimate units, then bias."""
    return np.zeros(head_shape(arch))


def head_to_flat(head):
    return np.asarray(head, dtype=np.float64).ravel()


def head_from_flat(arch, flat):
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != np.prod(head_shape(arch)):
        raise InvariantError(f"head vector must have length {np.prod(head_shape(arch))}")
    return flat.reshape(head_shape(arch)).copy()


def init_params(arch, rng):
    """He-initialised base; zero head."""
    widths = [arch.input_dim, *arch.hidden]
    ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(widths[:-1], widths[1:])]
    bs = [np.zeros(b) for b in widths[1:]]
    return BaseParams(arch, tuple(ws), tuple(bs)), zero_head(arch)


# -- forward -------------------------------------------------------------------


def _act(z, arch):
    if arch.activation == "relu":
        return np.maximum(z, 0.0)
    s = arch.sharpness
    return np.logaddexp(0.0, s * z) / s


def _act_grad(z, arch):
    if arch.activation == "relu":
        return (z > 0).astype(z.dtype)
    return 0.5 * (1.0 + np.tanh(0.5 * arch.sharpness * z))


def _dropout_masks(arch, n, rng):
    keep = 1.0 - arch.dropout_rate
    return [(rng.random((n, w)) < keep) / keep for w in arch.hidden]


def _hidden_pass(X, base, masks=None):
    arch = base.arch
    a = (X - base.x_shift) / base.x_scale
    cache = [a]
    for k, (w, b) in enumerate(zip(base.weights, base.biases)):
        z = a @ w + b
        a = _act(z, arch)
        if masks is not None:
            a = a * masks[k]
        cache.append((z, a))
    return a, cache


def augment(H):
    """Append the bias column of ones to penultimate activations."""
    return np.hstack([H, np.ones((H.shape[0], 1))])


def penultimate(X, base, mode="eval", rng=None):
    """Penultimate activations for a batch; train mode applies dropout masks."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != base.arch.input_dim:
        raise InvariantError(f"expected {base.arch.input_dim} features, got {X.shape[1]}")
    masks = None
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an explicit rng for dropout")
        masks = _dropout_masks(base.arch, X.shape[0], rng)
    elif mode != "eval":
        raise ValueError("mode must be 'train' or 'eval'")
    H = _hidden_pass(X, base, masks)[0]
    return (H - base.h_shift) @ base.h_proj


def predict(X, base, head, mode="eval", rng=None):
    """Raw output vectors ``[mu, tilde_l]`` for a batch, shape (n, output_dim)."""
    return augment(penultimate(X, base, mode, rng)) @ head


@dataclass
class HeadOutput:
    mu: np.ndarray
    tilde_l: np.ndarray

    @property
    def vector(self):
        return np.concatenate([self.mu, self.tilde_l])

    @classmethod
    def from_vector(cls, y):
        y = np.asarray(y, dtype=np.float64)
        d = dim_from_output(y.shape[-1])
        return cls(y[:d].copy(), y[d:].copy())


def forward(x, base, head, mode="eval", rng=None):
    """Single-sample forward pass returning the Gaussian head output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvariantError("forward expects one feature vector; use predict for batches")
    y = predict(x[None, :], base, head, mode, rng)[0]
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite network output")
    return HeadOutput.from_vector(y)


def assemble_cov(out):
    """Gaussian from a head output: L has an exp-mapped diagonal and cov = L L^T."""
    mu = np.asarray(out.mu, dtype=np.float64)
    d = mu.shape[0]
    L = tilde_to_chol(out.tilde_l, d)
    return GaussianParams(mu, L @ L.T)


# -- loss and gradients --------------------------------------------------------


def loss(pred, target):
    """Mean squared error over the concatenated parameter vector(s)."""
    p = np.asarray(pred.vector if isinstance(pred, HeadOutput) else pred, dtype=np.float64)
    t = np.asarray(target.vector if isinstance(target, HeadOutput) else target, dtype=np.float64)
    if p.shape != t.shape:
        raise InvariantError(f"shape mismatch {p.shape} vs {t.shape}")
    r = p - t
    return float(np.mean(r * r))


def head_loss(Ha, Y, head):
    """Mean batch MSE of ``head`` on augmented penultimate features ``Ha``."""
    r = Ha @ head - Y
    return float(np.mean(r * r))


def head_loss_grad(Ha, Y, head):
    """Exact gradient of :func:`head_loss` with respect to the head."""
    r = Ha @ head - Y
    return Ha.T @ r * (2.0 / r.size)


def grad_head(X, Y, base, head):
    """Gradient of the mean eval-mode batch loss with respect to the head only."""
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise InvariantError("empty batch")
    Ha = augment(penultimate(X, base, "eval"))
    return head_loss_grad(Ha, np.atleast_2d(Y), head)


# -- pretraining -----------------------------------------------------------------


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class PretrainResult:
    base: BaseParams
    head: np.ndarray
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0


class _Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _backprop(X, Y, params, arch, shift, scale, masks):
    n_hidden = len(arch.hidden)
    a = (X - shift) / scale
    acts, zs = [a], []
    for k in range(n_hidden):
        z = a @ params[2 * k] + params[2 * k + 1]
        a = _act(z, arch)
        if masks is not None:
            a = a * masks[k]
        zs.append(z)
        acts.append(a)
    out = a @ params[-2] + params[-1]
    r = out - Y
    value = float(np.mean(r * r))
    delta = r * (2.0 / r.size)
    grads = [None] * len(params)
    grads[-2] = acts[-1].T @ delta
    grads[-1] = delta.sum(axis=0)
    da = delta @ params[-2].T
    for k in range(n_hidden - 1, -1, -1):
        if masks is not None:
            da = da * masks[k]
        dz = da * _act_grad(zs[k], arch)
        grads[2 * k] = acts[k].T @ dz
        grads[2 * k + 1] = dz.sum(axis=0)
        if k:
            da = dz @ params[2 * k].T
    return value, grads


def _eval_loss(X, Y, params, arch, shift, scale):
    a = (X - shift) / scale
    for k in range(len(arch.hidden)):
        a = _act(a @ params[2 * k] + params[2 * k + 1], arch)
    r = a @ params[-2] + params[-1] - Y
    return float(np.mean(r * r))


def pretrain_base(X_train, Y_train, arch, config=None, X_val=None, Y_val=None):
    """Train the full network on pooled data with Adam and return a frozen base.

    The returned head is the global last layer. Inputs are standardised with
    training-set statistics; the output bias starts at the training target mean.
    The epoch with the lowest validation loss (training loss without a
    validation set) is kept.
    """
    cfg = config or PretrainConfig()
    X_train = np.asarray(X_train, dtype=np.float64)
    Y_train = np.asarray(Y_train, dtype=np.float64)
    if X_train.ndim != 2 or X_train.shape[1] != arch.input_dim:
        raise InvariantError("training features do not match the architecture")
    if Y_train.shape != (X_train.shape[0], arch.output_dim):
        raise InvariantError("training targets do not match the architecture")
    rng = np.random.default_rng(cfg.seed)
    shift = X_train.mean(axis=0)
    scale = X_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    base0, head0 = init_params(arch, rng)
    params = []
    for w, b in zip(base0.weights, base0.biases):
        params += [w.copy(), b.copy()]
    params += [head0[:-1].copy(), Y_train.mean(axis=0)]
    has_val = X_val is not None and len(X_val) > 0
    monitor = (lambda p: _eval_loss(X_val, Y_val, p, arch, shift, scale)) if has_val else (
        lambda p: _eval_loss(X_train, Y_train, p, arch, shift, scale))
    best = [p.copy() for p in params]
    best_score = monitor(params)
    history = [(0, _eval_loss(X_train, Y_train, params, arch, shift, scale), best_score)]
    best_epoch, stale = 0, 0
    opt = _Adam(params, cfg)
    n = X_train.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = _dropout_masks(arch, len(idx), rng) if arch.dropout_rate > 0 else None
            value, grads = _backprop(X_train[idx], Y_train[idx], params, arch, shift, scale, masks)
            if not np.isfinite(value):
                raise DivergenceError(
                    "pretraining loss became non-finite",
                    {"epoch": epoch, "batch_start": start, "last_running_loss": running},
                )
            running = value
            opt.step(params, grads)
        train_loss = _eval_loss(X_train, Y_train, params, arch, shift, scale)
        score = monitor(params) if has_val else train_loss
        if not np.isfinite(score):
            raise DivergenceError("non-finite loss at epoch end", {"epoch": epoch, "train_loss": train_loss})
        history.append((epoch, train_loss, score))
        log.debug("epoch %d train %.5g monitor %.5g", epoch, train_loss, score)
        if score < best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    n_hidden = len(arch.hidden)
    base = BaseParams(
        arch,
        tuple(best[2 * k] for k in range(n_hidden)),
        tuple(best[2 * k + 1] for k in range(n_hidden)),
        shift,
        scale,
    )
    head = np.vstack([best[-2], best[-1][None, :]])
    return PretrainResult(base=base, head=head, history=history, best_epoch=best_epoch)


def whiten_head_basis(base, head, X, rel_floor=0.3):
    """Re-express the head in regularised-whitened penultimate coordinates.

    The new base centres the last hidden activations on ``X`` and rotates and
    scales them by ``(eig + floor)^(-1/2)`` with ``floor = rel_floor * max eig``.
    The head is transformed so that every prediction is unchanged; only the
    geometry of head-gradient steps improves.
    """
    raw = replace(base, h_shift=None, h_proj=None)
    H = penultimate(X, raw, "eval")
    m = H.mean(axis=0)
    C = np.cov(H - m, rowvar=False, bias=True)
    e, U = np.linalg.eigh(0.5 * (C + C.T))
    e = np.maximum(e, 0.0)
    floor = rel_floor * max(e[-1], 1e-12)
    proj = U / np.sqrt(e + floor)
    inv = (U * np.sqrt(e + floor)).T
    W, b = head[:-1], head[-1]
    new_head = np.vstack([inv @ W, (b + m @ W)[None, :]])
    return replace(raw, h_shift=m, h_proj=proj), new_head


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, base, heads, extra=None):
    """Write an ``.npz`` checkpoint (layout documented in the README).

    ``heads`` is one head or a stack of heads with shape (C, P+1, q).
    """
    heads = np.asarray(heads, dtype=np.float64)
    if heads.ndim == 2:
        heads = heads[None]
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "arch_json": np.array(json.dumps(asdict(base.arch), sort_keys=True)),
        "base_flat": base.flat(),
        "x_shift": base.x_shift,
        "x_scale": base.x_scale,
        "h_shift": base.h_shift,
        "h_proj": base.h_proj,
        "heads_flat": heads.reshape(heads.shape[0], -1),
    }
    for k, v in (extra or {}).items():
        payload[f"extra_{k}"] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(base, heads, extra)`` from a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise InvariantError(f"unsupported checkpoint version {version}")
        arch_d = json.loads(str(z["arch_json"]))
        arch = NetworkArch(**arch_d)
        base = BaseParams.from_flat(arch, z["base_flat"], z["x_shift"], z["x_scale"], z["h_shift"], z["h_proj"])
        heads = z["heads_flat"].reshape((-1,) + head_shape(arch)).copy()
        extra = {k[len("extra_"):]: z[k].copy() for k in z.files if k.startswith("extra_")}
    return base, heads, extra
