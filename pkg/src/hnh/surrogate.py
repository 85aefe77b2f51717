"""Feedforward network surrogates written directly in numpy.

A network with ``P`` hidden layers of width ``N`` computes

    h_0 = z,  h_j = phi(W_j h_{j-1} + b_j)  (j = 1..P),  out = W_{P+1} h_P + b_{P+1}

with ``W_j`` stored as (fan_out, fan_in) matrices.  ``P = 0`` is a plain
affine model.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CostLedger, make_rng

FORMAT_NAME = "hnh-mlp"
FORMAT_VERSION = 1
_CHUNK = 65536


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float, level: int | None = None):
        self.epoch = epoch
        self.loss = loss
        self.level = level
        where = f" (level {level})" if level is not None else ""
        super().__init__(f"training diverged at epoch {epoch}{where}: loss={loss}")


# activation name -> (phi, phi' expressed through the pre-activation a and output h)
def _tanh_grad(a, h):
    return 1.0 - h * h


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, h):
    return (a > 0).astype(a.dtype)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "identity": (lambda a: a, lambda a, h: np.ones_like(a)),
    "relu": (_relu, _relu_grad),
}


@dataclass
class MlpSurrogate:
    weights: list
    biases: list
    activation: str = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        fan_in = self.weights[0].shape[1]
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ValueError(f"layer {j + 1} shapes do not chain: W{w.shape}, b{b.shape}")
            fan_in = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must be scalar")
        widths = {w.shape[0] for w in self.weights[:-1]}
        if len(widths) > 1:
            raise ValueError(f"hidden layers must share one width, got {sorted(widths)}")
        if not all(np.all(np.isfinite(p)) for p in self.parameters()):
            raise ValueError("network parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def depth(self) -> int:
        """Number of hidden layers P."""
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0] if self.depth else 0

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpSurrogate":
        return MlpSurrogate(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.activation, self.dropout_rate,
        )

    def predict(self, Z) -> np.ndarray:
        return forward_batch(self, Z)

    def __call__(self, z) -> float:
        return forward(self, z)


def init_network(
    input_dim: int, depth: int, width: int, rng: np.random.Generator,
    activation: str = "tanh", dropout_rate: float = 0.0,
) -> MlpSurrogate:
    """Glorot-uniform weights, zero biases."""
    sizes = [input_dim] + [width] * depth + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpSurrogate(weights, biases, activation, dropout_rate)


def forward(net: MlpSurrogate, z) -> float:
    z = np.asarray(z, dtype=float)
    if z.shape != (net.input_dim,):
        raise ValueError(f"input has shape {z.shape}, network expects ({net.input_dim},)")
    return float(forward_batch(net, z[None, :])[0])


def forward_batch(net: MlpSurrogate, Z) -> np.ndarray:
    """Inference on rows of ``Z``; dropout is never applied here."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != net.input_dim:
        raise ValueError(f"inputs have shape {Z.shape}, network expects (*, {net.input_dim})")
    phi = ACTIVATIONS[net.activation][0]
    out = np.empty(Z.shape[0])
    for s in range(0, Z.shape[0], _CHUNK):
        h = Z[s:s + _CHUNK]
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            h = phi(h @ w.T + b)
        out[s:s + _CHUNK] = (h @ net.weights[-1].T + net.biases[-1])[:, 0]
    return out


def loss_and_gradients(net: MlpSurrogate, X, T, rng: np.random.Generator | None = None):
    """Mean squared error over the batch and its gradient w.r.t. every parameter.

    Returns ``(loss, grads)`` with ``grads`` ordered like ``net.parameters()``.
    Inverted dropout on hidden activations is applied when ``rng`` is given.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float).reshape(-1)
    phi, dphi = ACTIVATIONS[net.activation]
    n = X.shape[0]
    keep = 1.0 - net.dropout_rate
    acts, pre, masks = [X], [], []
    h = X
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = h @ w.T + b
        h = phi(a)
        pre.append(a)
        if rng is not None and net.dropout_rate > 0:
            m = (rng.random(h.shape) < keep) / keep
            masks.append(m)
            h_used = h * m
        else:
            masks.append(None)
            h_used = h
        acts.append((h, h_used))
    h_last = acts[-1][1] if net.depth else X
    y = (h_last @ net.weights[-1].T + net.biases[-1])[:, 0]
    r = y - T
    loss = float(np.mean(r * r))

    grads = [None] * (2 * len(net.weights))
    delta = (2.0 / n) * r[:, None]  # d loss / d out, shape (n, 1)
    for j in range(len(net.weights) - 1, -1, -1):
        inp = X if j == 0 else acts[j][1]
        grads[2 * j] = delta.T @ inp
        grads[2 * j + 1] = delta.sum(axis=0)
        if j == 0:
            break
        dh = delta @ net.weights[j]
        if masks[j - 1] is not None:
            dh = dh * masks[j - 1]
        h_j = acts[j][0]
        delta = dh * dphi(pre[j - 1], h_j)
    return loss, grads


def backward(net: MlpSurrogate, z, target: float) -> list:
    """Gradient of ``(net(z) - target)**2`` w.r.t. all parameters (dropout off)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (net.input_dim,):
        raise ValueError(f"input has shape {z.shape}, network expects ({net.input_dim},)")
    _, grads = loss_and_gradients(net, z[None, :], [target])
    return grads


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        n = self.inputs.shape[0]
        if n == 0 or self.targets.size != n:
            raise ValueError("training set needs one target per input row")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("training targets must be finite")
        both = np.concatenate([self.train_idx, self.val_idx])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValueError("train/validation split must be a disjoint cover of the indices")
        if self.train_idx.size == 0:
            raise ValueError("training split is empty")

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def dataset_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        return h.hexdigest()


def make_training_set(inputs, targets, val_fraction: float = 0.2, seed: int = 0) -> TrainingSet:
    inputs = np.asarray(inputs, dtype=float)
    n = inputs.shape[0]
    perm = make_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    return TrainingSet(inputs, targets, np.sort(perm[n_val:]), np.sort(perm[:n_val]), seed)


@dataclass
class TrainOptions:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd_momentum"
    dropout_rate: float = 0.0
    cv_folds: int = 5
    seed: int = 0
    normalize_targets: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.cv_folds == 1 or self.cv_folds < 0:
            raise ValueError("cv_folds must be 0 (off) or >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_mse: float = math.nan
    final_val_mse: float = math.nan
    final_train_mse: float = math.nan
    epochs_run: int = 0
    cv_val_loss: list = field(default_factory=list)
    sample_gradients: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _mse(net, X, T) -> float:
    if X.shape[0] == 0:
        return math.nan
    r = forward_batch(net, X) - T
    return float(np.mean(r * r))


class _Optimizer:
    """SGD with momentum, or Adam (``momentum`` doubles as beta1)."""

    def __init__(self, params, opts: TrainOptions):
        self.params = params
        self.opts = opts
        self.vel = [np.zeros_like(p) for p in params]
        self.sq = [np.zeros_like(p) for p in params] if opts.optimizer == "adam" else None
        self.t = 0

    def step(self, grads) -> None:
        lr, mom = self.opts.learning_rate, self.opts.momentum
        self.t += 1
        if self.opts.weight_decay:
            # L2 penalty on weight matrices only (even slots are W, odd are b)
            wd = 2.0 * self.opts.weight_decay
            grads = [g + wd * p if k % 2 == 0 else g
                     for k, (g, p) in enumerate(zip(grads, self.params))]
        if self.sq is None:
            for p, v, g in zip(self.params, self.vel, grads):
                v *= mom
                v -= lr * g
                p += v
            return
        c1, c2 = 1.0 - mom ** self.t, 1.0 - 0.999 ** self.t
        for p, v, s2, g in zip(self.params, self.vel, self.sq, grads):
            v *= mom
            v += (1.0 - mom) * g
            s2 *= 0.999
            s2 += 0.001 * g * g
            p -= lr * (v / c1) / (np.sqrt(s2 / c2) + 1e-8)


def _run(net, X, T, Xv, Tv, opts: TrainOptions, epochs: int, rng, keep_best: bool):
    """Optimize ``net`` in place; returns per-epoch (train, val) MSE curves.

    With ``keep_best`` the parameters are reset to the iterate (epoch 0
    included) with the lowest validation MSE, or train MSE if there is no
    validation split.
    """
    params = net.parameters()
    optim = _Optimizer(params, opts)
    n = X.shape[0]
    bs = min(opts.batch_size, n)
    drop_rng = rng if net.dropout_rate > 0 else None
    have_val = Xv.shape[0] > 0
    best_score = _mse(net, Xv, Tv) if have_val else _mse(net, X, T)
    best = [p.copy() for p in params]
    train_curve, val_curve = [], []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            loss, grads = loss_and_gradients(net, X[idx], T[idx], drop_rng)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, loss)
            optim.step(grads)
        tl = _mse(net, X, T)
        if not math.isfinite(tl):
            raise TrainingDivergence(epoch, tl)
        vl = _mse(net, Xv, Tv)
        train_curve.append(tl)
        val_curve.append(vl)
        score = vl if have_val else tl
        if keep_best and score <= best_score:
            best_score = score
            for b, p in zip(best, params):
                b[...] = p
    if keep_best:
        for p, b in zip(params, best):
            p[...] = b
    return train_curve, val_curve


def _to_standard(net: MlpSurrogate, mu: float, s: float) -> None:
    net.weights[-1] /= s
    net.biases[-1] = (net.biases[-1] - mu) / s


def _from_standard(net: MlpSurrogate, mu: float, s: float) -> None:
    net.weights[-1] *= s
    net.biases[-1] = net.biases[-1] * s + mu


def train(net: MlpSurrogate, data: TrainingSet, opts: TrainOptions, level: int | None = None):
    """Fit ``net`` to ``data`` with mini-batch gradient descent.

    Targets are standardized during optimization and the affine map is folded
    back into the output layer, so the returned net predicts ``g`` directly.
    With ``cv_folds >= 2`` the epoch count is chosen from the K-fold mean
    validation curve, then the net is refit on the whole training split.
    The validation-best iterate is returned, so the final validation error
    never exceeds the initial one.

    Returns ``(trained_net, TrainingReport)``.
    """
    rng = make_rng(opts.seed)
    net = net.copy()
    net.dropout_rate = opts.dropout_rate
    X, T = data.inputs[data.train_idx], data.targets[data.train_idx]
    Xv, Tv = data.inputs[data.val_idx], data.targets[data.val_idx]
    mu, s = (float(T.mean()), float(T.std())) if opts.normalize_targets else (0.0, 1.0)
    if not s > 0:
        s = 1.0
    report = TrainingReport(initial_val_mse=_mse(net, Xv, Tv))
    epochs = opts.epochs
    try:
        if opts.cv_folds >= 2 and X.shape[0] >= opts.cv_folds:
            folds = np.array_split(rng.permutation(X.shape[0]), opts.cv_folds)
            curves = []
            for k in range(opts.cv_folds):
                tr = np.concatenate([f for i, f in enumerate(folds) if i != k])
                trial = net.copy()
                _to_standard(trial, mu, s)
                _, vc = _run(trial, X[tr], (T[tr] - mu) / s, X[folds[k]], (T[folds[k]] - mu) / s,
                             opts, opts.epochs, rng, keep_best=False)
                report.sample_gradients += opts.epochs * tr.size
                curves.append(vc)
            mean_curve = np.mean(curves, axis=0) * s * s
            report.cv_val_loss = mean_curve.tolist()
            epochs = int(np.argmin(mean_curve)) + 1

        _to_standard(net, mu, s)
        tc, vc = _run(net, X, (T - mu) / s, Xv, (Tv - mu) / s, opts, epochs, rng, keep_best=True)
    except TrainingDivergence as exc:
        raise TrainingDivergence(exc.epoch, exc.loss, level) from None
    _from_standard(net, mu, s)

    report.train_loss = [v * s * s for v in tc]
    report.val_loss = [v * s * s for v in vc]
    report.epochs_run = epochs
    report.sample_gradients += epochs * X.shape[0]
    report.final_val_mse = _mse(net, Xv, Tv)
    report.final_train_mse = _mse(net, X, T)
    return net, report


def level_seed(seed: int, level: int) -> int:
    """Independent 64-bit seed for hierarchy level ``level`` derived from ``seed``."""
    ss = np.random.SeedSequence([int(seed) % 2**64, int(level)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class SurrogateHierarchy:
    """Level 1 is the shallowest (coarsest) net, level L the deepest.

    Levels only need ``predict(Z)``, ``depth``, ``width`` and ``input_dim``,
    so analytic stand-ins can be used in place of trained networks.
    """

    levels: list
    training_set: TrainingSet | None = None
    reports: list = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a hierarchy needs at least one level")
        depths = self.depths
        if any(b <= a for a, b in zip(depths[:-1], depths[1:])):
            raise ValueError(f"depths must be strictly ascending, got {list(depths)}")
        if len({lv.input_dim for lv in self.levels}) != 1:
            raise ValueError("all levels must share the input dimension")
        if len({lv.width for lv in self.levels}) != 1:
            raise ValueError("all levels must share the width")

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def depths(self) -> tuple:
        return tuple(int(lv.depth) for lv in self.levels)

    @property
    def width(self) -> int:
        return int(self.levels[0].width)

    @property
    def input_dim(self) -> int:
        return int(self.levels[0].input_dim)

    def level(self, ell: int):
        return self.levels[ell - 1]

    def predict(self, ell: int, Z) -> np.ndarray:
        return np.asarray(self.levels[ell - 1].predict(Z), dtype=float)

    def new_ledger(self) -> CostLedger:
        return CostLedger(self.depths, self.width)

    def training_ledger(self) -> CostLedger:
        """Offline cost: per-sample gradient evaluations recorded while training."""
        led = self.new_ledger()
        for ell, rep in enumerate(self.reports, start=1):
            led.add_surrogate(ell, rep.sample_gradients)
        return led


def build_hierarchy(
    data: TrainingSet, depths, width: int, opts: TrainOptions | None = None,
    activation: str = "tanh",
) -> SurrogateHierarchy:
    """Train one network per depth on the same data; level seeds derive from ``opts.seed``."""
    opts = opts or TrainOptions()
    depths = [int(p) for p in depths]
    if not depths or any(b <= a for a, b in zip(depths[:-1], depths[1:])):
        raise ValueError(f"depths must be a strictly ascending nonempty list, got {depths}")
    nets, reports = [], []
    for ell, p in enumerate(depths, start=1):
        seed = level_seed(opts.seed, ell)
        net0 = init_network(data.input_dim, p, width, make_rng(seed), activation, opts.dropout_rate)
        lv_opts = TrainOptions(**{**opts.to_dict(), "seed": seed})
        net, rep = train(net0, data, lv_opts, level=ell)
        nets.append(net)
        reports.append(rep)
    return SurrogateHierarchy(nets, data, reports)


# --- weight files ---------------------------------------------------------
# line 1: JSON header; rest: parameters W1, b1, ..., W_{P+1}, b_{P+1} flattened
# row-major as little-endian float64.

def save_surrogate(path, net: MlpSurrogate, training_seed: int = 0, dataset_hash: str = "") -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_dim": net.input_dim,
        "depth": net.depth,
        "width": net.width,
        "activation": net.activation,
        "dropout_rate": net.dropout_rate,
        "training_seed": int(training_seed),
        "dataset_hash": dataset_hash,
        "shapes": [list(p.shape) for p in net.parameters()],
        "dtype": "<f8",
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for p in net.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_surrogate(path):
    """Read a weight file; returns ``(net, header)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    header = json.loads(raw[:nl])
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight file format {header.get('format')!r} "
                         f"v{header.get('version')}")
    flat = np.frombuffer(raw[nl + 1:], dtype="<f8")
    params, off = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        if off + n > flat.size:
            raise ValueError(f"{path}: truncated parameter data")
        params.append(flat[off:off + n].reshape(shape).astype(np.float64))
        off += n
    if off != flat.size:
        raise ValueError(f"{path}: trailing bytes after parameters")
    net = MlpSurrogate(params[0::2], params[1::2], header["activation"], header["dropout_rate"])
    return net, header


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)
