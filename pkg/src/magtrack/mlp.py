"""Fully connected pose regressor trained with Adam on the weighted pose loss.

The network maps the 3n sensor features to ``[p, o]``: ReLU hidden layers,
a linear output layer and, optionally, batch normalization between each
hidden affine map and its ReLU.  Forward and backward passes are written out
in numpy so gradients can be checked directly against finite differences.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, DataGenerator, feature_engineer
from .errors import ConfigError, ContractError, DivergenceError, FormatError

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
NORM_EPS = 1e-12
TEST_STREAM = 1_000_003

INPUT_TRANSFORMS = {"cbrt": feature_engineer, "raw": lambda b: np.asarray(b, dtype=float)}


class MlpModel:
    """Weights, biases and optional batch-norm state of a ReLU perceptron."""

    def __init__(self, dims, weights, biases, batchnorm=None, bn_params=None, input_transform="cbrt"):
        self.dims = [int(d) for d in dims]
        if len(self.dims) < 2:
            raise ConfigError("an MLP needs at least input and output dimensions")
        n_hidden = len(self.dims) - 2
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.batchnorm = [bool(f) for f in (batchnorm or [False] * n_hidden)]
        if len(self.batchnorm) != n_hidden:
            raise ConfigError(f"{len(self.batchnorm)} batch-norm flags for {n_hidden} hidden layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ConfigError(f"layer {i} parameter shapes {w.shape}, {b.shape} break the dimension chain")
        if len(self.weights) != len(self.dims) - 1:
            raise ConfigError("one weight matrix per layer transition required")
        # per hidden layer: [gamma, beta, running_mean, running_var] or None
        if bn_params is None:
            bn_params = [
                [np.ones(d), np.zeros(d), np.zeros(d), np.ones(d)] if f else None
                for d, f in zip(self.dims[1:-1], self.batchnorm)
            ]
        self.bn = [None if p is None else [np.asarray(a, dtype=float) for a in p] for p in bn_params]
        if input_transform not in INPUT_TRANSFORMS:
            raise ConfigError(f"unknown input transform {input_transform!r}")
        self.input_transform = input_transform

    @property
    def n_inputs(self):
        return self.dims[0]

    def prepare(self, raw):
        """Map raw readings (T) to network inputs."""
        return INPUT_TRANSFORMS[self.input_transform](raw)

    def parameters(self):
        """Trainable arrays in a fixed order (shared with :func:`backward`)."""
        params = []
        for i in range(len(self.weights)):
            params += [self.weights[i], self.biases[i]]
            if i < len(self.bn) and self.bn[i] is not None:
                params += self.bn[i][:2]
        return params

    def copy(self):
        return MlpModel(
            self.dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.batchnorm),
            [None if p is None else [a.copy() for a in p] for p in self.bn],
            self.input_transform,
        )


def init_model(dims, rng, batchnorm=False, input_transform="cbrt") -> MlpModel:
    """He-normal weights, zero biases."""
    dims = [int(d) for d in dims]
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    flags = [bool(batchnorm)] * (len(dims) - 2) if isinstance(batchnorm, bool) else list(batchnorm)
    return MlpModel(dims, weights, biases, flags, input_transform=input_transform)


def _check_inputs(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_inputs:
        raise ContractError(f"model expects {model.n_inputs} inputs, got {x.shape[-1]}")
    return x


def forward(model: MlpModel, x, training=False, update_stats=True, _cache=None):
    """Network output for inputs ``x`` of shape ``(3n,)`` or ``(B, 3n)``.

    With ``training=True`` batch-norm layers use batch statistics (and update
    their running averages unless ``update_stats`` is False).
    """
    x = _check_inputs(model, x)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    n_layers = len(model.weights)
    for i in range(n_layers):
        a_in = h
        z = h @ model.weights[i] + model.biases[i]
        if i == n_layers - 1:
            h = z
            if _cache is not None:
                _cache.append((a_in, None))
            break
        bn_state = None
        if model.bn[i] is not None:
            gamma, beta, r_mean, r_var = model.bn[i]
            if training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    r_mean *= BN_MOMENTUM
                    r_mean += (1 - BN_MOMENTUM) * mu
                    r_var *= BN_MOMENTUM
                    r_var += (1 - BN_MOMENTUM) * var
            else:
                mu, var = r_mean, r_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            bn_state = (zhat, inv_std)
            z = gamma * zhat + beta
        h = np.maximum(z, 0.0)
        if _cache is not None:
            _cache.append((a_in, (z > 0, bn_state)))
    return h[0] if single else h


def _unit(o):
    norm = np.linalg.norm(o, axis=-1, keepdims=True)
    return o / (norm + NORM_EPS), norm


def pose_loss_terms(pred, p_true, o_true):
    """Per-sample squared position error and squared unit-orientation error."""
    pred = np.atleast_2d(pred)
    p_true = np.atleast_2d(p_true)
    o_true = np.atleast_2d(o_true)
    pos = np.sum((p_true - pred[:, :3]) ** 2, axis=1)
    ot, _ = _unit(o_true)
    op, _ = _unit(pred[:, 3:6])
    ori = np.sum((ot - op) ** 2, axis=1)
    return pos, ori


def pose_loss(pred, p_true, o_true, eta=1e-5):
    """``|p_t - p_p|^2 + eta |o_t/|o_t| - o_p/|o_p||^2``, per sample."""
    pos, ori = pose_loss_terms(pred, p_true, o_true)
    out = pos + eta * ori
    return float(out[0]) if np.ndim(pred) == 1 else out


def backward(model: MlpModel, x, labels, eta=1e-5, training=True, update_stats=False, loss="pose"):
    """Mean loss over the batch and its gradient for every parameter.

    ``loss="pose"`` is the weighted pose loss on 6-element outputs;
    ``loss="mse"`` is the plain squared error against ``labels`` of any width.
    Gradients are returned in the order of :meth:`MlpModel.parameters`.
    """
    x = np.atleast_2d(_check_inputs(model, x))
    labels = np.atleast_2d(labels)
    if len(x) == 0:
        raise ContractError("backward needs a nonempty batch")
    cache = []
    out = forward(model, x, training=training, update_stats=update_stats, _cache=cache)
    bsz = len(x)
    if loss == "mse":
        value = float(np.mean(np.sum((out - labels) ** 2, axis=1)))
        d_out = 2.0 * (out - labels) / bsz
    elif loss == "pose":
        p_t, o_t = labels[:, :3], labels[:, 3:6]
        value = float(np.mean(pose_loss(out, p_t, o_t, eta)))
        ot, _ = _unit(o_t)
        op_raw = out[:, 3:6]
        op, norm = _unit(op_raw)
        d_out = np.empty_like(out)
        d_out[:, :3] = 2.0 * (out[:, :3] - p_t) / bsz
        g = 2.0 * eta * (op - ot) / bsz
        # d(o / (|o| + eps)) / do applied to g
        denom = norm + NORM_EPS
        safe = np.where(norm > 0, norm, 1.0)
        d_out[:, 3:6] = g / denom - op_raw * np.sum(op_raw * g, axis=1, keepdims=True) / (safe * denom**2)
    else:
        raise ConfigError(f"unknown loss {loss!r}")

    grads = []
    delta = d_out
    n_layers = len(model.weights)
    for i in reversed(range(n_layers)):
        a_in, extra = cache[i]
        layer_grads = []
        if extra is not None:
            active, bn_state = extra
            delta = delta * active
            if bn_state is not None:
                zhat, inv_std = bn_state
                gamma = model.bn[i][0]
                d_gamma = np.sum(delta * zhat, axis=0)
                d_beta = np.sum(delta, axis=0)
                dzhat = delta * gamma
                if training:
                    delta = (inv_std / bsz) * (
                        bsz * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0)
                    )
                else:
                    delta = dzhat * inv_std
                layer_grads = [d_gamma, d_beta]
        d_w = a_in.T @ delta
        d_b = delta.sum(axis=0)
        grads = [d_w, d_b] + layer_grads + grads
        if i > 0:
            delta = delta @ model.weights[i].T
    return value, grads


class Adam:
    """Adam optimizer state over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.98
    epochs: int = 40
    batch: int = 256
    samples_per_epoch: int = 1_000_000
    test_samples: int = 10_000
    eta: float = 1e-5
    hidden: tuple = (2048, 2048, 2048)
    batchnorm: bool = False
    input_transform: str = "cbrt"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("lr", "epochs", "batch", "samples_per_epoch", "test_samples", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train config {name} must be positive, got {getattr(self, name)}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"learning-rate decay must lie in (0, 1], got {self.decay}")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"hidden layer widths must be positive, got {self.hidden}")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ConfigError(f"unknown input transform {self.input_transform!r}")

    @classmethod
    def desk_scale(cls, **overrides):
        """Laptop-sized defaults: 3 x 256 hidden units, 10 epochs of 1e5 samples.

        The learning rate is raised to 2e-3 because the run takes about 40x
        fewer Adam steps than the full-scale schedule.
        """
        base = dict(
            lr=2e-3, hidden=(256, 256, 256), epochs=10, samples_per_epoch=100_000, test_samples=2000
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch):
        return self.lr * self.decay**epoch

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    model: MlpModel
    history: list = field(default_factory=list)
    initial_test_loss: float = float("nan")

    @property
    def final_test_loss(self):
        return self.history[-1]["test_loss"] if self.history else self.initial_test_loss

    def converged(self, factor=2.0):
        """True if test loss fell by more than ``factor`` from its initial value."""
        return self.final_test_loss * factor < self.initial_test_loss

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "test_loss"])
            for row in self.history:
                writer.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["test_loss"])])


def evaluate_loss(model, raw, labels, eta, chunk=8192):
    """Mean pose loss of the model (eval mode) on raw readings."""
    total = 0.0
    for s in range(0, len(raw), chunk):
        out = forward(model, model.prepare(raw[s : s + chunk]))
        total += float(np.sum(pose_loss(out, labels[s : s + chunk, :3], labels[s : s + chunk, 3:], eta)))
    return total / len(raw)


def new_model_for(cfg: TrainConfig, n_inputs) -> MlpModel:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    dims = [n_inputs, *cfg.hidden, 6]
    return init_model(dims, rng, batchnorm=cfg.batchnorm, input_transform=cfg.input_transform)


def train(model: MlpModel, data, cfg: TrainConfig, test: Dataset = None, progress=None) -> TrainResult:
    """Adam training with per-epoch exponential learning-rate decay.

    ``data`` is either a :class:`Dataset` (reshuffled every epoch) or a
    :class:`DataGenerator` (fresh samples every epoch).  The model is updated
    in place and also returned inside the result.
    """
    if test is None:
        if not isinstance(data, DataGenerator):
            raise ConfigError("a test dataset is required when training on a fixed dataset")
        test = data.draw(cfg.test_samples, stream=TEST_STREAM)
    if test.raw.shape[1] != model.n_inputs:
        raise ContractError(f"model expects {model.n_inputs} inputs, test data has {test.raw.shape[1]}")

    params = model.parameters()
    opt = Adam(params)
    result = TrainResult(model, initial_test_loss=evaluate_loss(model, test.raw, test.labels, cfg.eta))
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        if isinstance(data, DataGenerator):
            raw, labels = data.draw_raw(cfg.samples_per_epoch, stream=epoch + 1)
            order = np.arange(len(raw))
        else:
            raw, labels = data.raw, data.labels
            shuffle = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, epoch)))
            order = shuffle.permutation(len(raw))
        inputs = model.prepare(raw)
        running = 0.0
        for s in range(0, len(order), cfg.batch):
            idx = order[s : s + cfg.batch]
            loss, grads = backward(model, inputs[idx], labels[idx], cfg.eta, training=True, update_stats=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {s // cfg.batch}")
            opt.step(params, grads, lr)
            running += loss * len(idx)
        test_loss = evaluate_loss(model, test.raw, test.labels, cfg.eta)
        if not np.isfinite(test_loss):
            raise DivergenceError(f"non-finite test loss after epoch {epoch}")
        row = {"epoch": epoch, "lr": lr, "train_loss": running / len(order), "test_loss": test_loss}
        result.history.append(row)
        log.info("epoch %d lr=%.3g train=%.4g test=%.4g", epoch, lr, row["train_loss"], test_loss)
        if progress is not None:
            progress(row)
    return result


@dataclass
class Prediction:
    """Network pose estimate; ``ok`` is False where the orientation output vanished."""

    p: np.ndarray
    o: np.ndarray
    ok: np.ndarray


def predict_pose(model: MlpModel, raw) -> Prediction:
    """Pose estimate(s) from raw readings of shape ``(3n,)`` or ``(N, 3n)``."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != model.n_inputs:
        raise ContractError(f"model expects {model.n_inputs} readings, got {raw.shape[-1]}")
    out = forward(model, model.prepare(raw))
    p = out[..., :3]
    o = out[..., 3:6]
    norm = np.linalg.norm(o, axis=-1, keepdims=True)
    ok = norm[..., 0] > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        o = np.where(norm > 0, o / norm, np.nan)
    return Prediction(p, o, ok)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

_MAGIC = b"MMLP"
_VERSION = 1
_HEAD = struct.Struct("<4sIII")
_FLAG_BN = 1
_TRANSFORM_CODES = {"cbrt": 0, "raw": 1}


def save_model(model: MlpModel, path):
    """Little-endian header, dims, per-layer flags, then float64 parameters."""
    n_layers = len(model.dims)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, _VERSION, n_layers, _TRANSFORM_CODES[model.input_transform]))
        fh.write(np.asarray(model.dims, dtype="<u4").tobytes())
        fh.write(np.asarray([_FLAG_BN if f else 0 for f in model.batchnorm], dtype="<u4").tobytes())
        for i in range(len(model.weights)):
            fh.write(np.ascontiguousarray(model.weights[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(model.biases[i], dtype="<f8").tobytes())
            if i < len(model.bn) and model.bn[i] is not None:
                for a in model.bn[i]:
                    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(f"model file truncated while reading {what}", offset=len(data), path=path)
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    magic, version, n_layers, transform = _HEAD.unpack(take(_HEAD.size, "header"))
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != _VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4, path=path)
    codes = {v: k for k, v in _TRANSFORM_CODES.items()}
    if n_layers < 2 or transform not in codes:
        raise FormatError(f"invalid header (layers={n_layers}, transform={transform})", offset=8, path=path)
    dims = np.frombuffer(take(4 * n_layers, "dims"), "<u4").astype(int).tolist()
    flags = np.frombuffer(take(4 * (n_layers - 2), "flags"), "<u4").tolist()
    weights, biases, bn = [], [], []
    for i in range(n_layers - 1):
        a, b = dims[i], dims[i + 1]
        weights.append(np.frombuffer(take(8 * a * b, f"layer {i} weights"), "<f8").reshape(a, b).copy())
        biases.append(np.frombuffer(take(8 * b, f"layer {i} biases"), "<f8").copy())
        if i < n_layers - 2:
            if flags[i] & _FLAG_BN:
                bn.append([np.frombuffer(take(8 * b, "batch-norm state"), "<f8").copy() for _ in range(4)])
            else:
                bn.append(None)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after parameters", offset=pos, path=path)
    return MlpModel(dims, weights, biases, [bool(f & _FLAG_BN) for f in flags], bn, codes[transform])
