"""Feedforward ReLU predictor trained on values, or on values plus input Jacobians.

Plain loss:       sum_s ||f(theta_s) - x_s||^2
Sensitivity loss: plain + mu * sum_s ||df/dtheta(theta_s) - J_s||_F^2

The Jacobian term is skipped for samples without a Jacobian (degenerate
OPF instances). Gradients are exact: the ReLU masks are piecewise constant
in the weights, so the network's input Jacobian is a product of weight
matrices and fixed diagonal masks, and its weight gradient follows by
differentiating that product.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadDimensions, DimensionMismatch, EmptyBatch, NonFiniteLoss
from .sensitivity import SensitivityRecord

FORMAT_VERSION = 1
PLAIN = "plain"
SI = "si"
_MIN_SCALE = 1e-12
NORMALIZE_CHOICES = ("none", "shared", "column")


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, n: int) -> Standardizer:
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, data: np.ndarray, per_column: bool = True) -> Standardizer:
        """Per-column mean with per-column or one shared std.

        Degenerate scales (constant columns, or all columns when shared) become 1.
        """
        data = np.atleast_2d(data)
        mean = data.mean(axis=0)
        if per_column:
            scale = data.std(axis=0)
            scale = np.where(scale > _MIN_SCALE * (1.0 + np.abs(mean)), scale, 1.0)
        else:
            s = float(np.sqrt(np.mean((data - mean) ** 2)))
            s = s if s > _MIN_SCALE * (1.0 + float(np.abs(mean).max())) else 1.0
            scale = np.full(data.shape[1], s)
        return cls(mean, scale)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean) / self.scale

    def invert(self, v: np.ndarray) -> np.ndarray:
        return v * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def normalize_jacobians(jac: np.ndarray, theta_stats: Standardizer, x_stats: Standardizer) -> np.ndarray:
    """Map raw-space Jacobians (..., I, n) to standardized coordinates."""
    return jac * theta_stats.scale / x_stats.scale[:, None]


def denormalize_jacobians(jac: np.ndarray, theta_stats: Standardizer, x_stats: Standardizer) -> np.ndarray:
    return jac * x_stats.scale[:, None] / theta_stats.scale


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]  # each (d_out, d_in)
    biases: list[np.ndarray]
    seed: int = 0
    theta_stats: Standardizer | None = None
    x_stats: Standardizer | None = None

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> MlpModel:
        return replace(
            self,
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "activation": "relu",
            "layer_dims": list(self.layer_dims),
            "seed": self.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "theta_stats": None if self.theta_stats is None else self.theta_stats.to_dict(),
            "x_stats": None if self.x_stats is None else self.x_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        if d.get("format_version") != FORMAT_VERSION:
            raise BadConfig(f"unsupported model format version {d.get('format_version')!r}")
        model = cls(
            layer_dims=[int(k) for k in d["layer_dims"]],
            weights=[np.asarray(w, dtype=float).reshape(o, i) for w, o, i in
                     zip(d["weights"], d["layer_dims"][1:], d["layer_dims"][:-1])],
            biases=[np.asarray(b, dtype=float) for b in d["biases"]],
            seed=int(d.get("seed", 0)),
            theta_stats=None if d.get("theta_stats") is None else Standardizer.from_dict(d["theta_stats"]),
            x_stats=None if d.get("x_stats") is None else Standardizer.from_dict(d["x_stats"]),
        )
        _check_model(model)
        return model

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> MlpModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_model(model: MlpModel) -> None:
    dims = model.layer_dims
    if len(model.weights) != len(dims) - 1 or len(model.biases) != len(dims) - 1:
        raise BadDimensions("one weight matrix and bias per layer required")
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
            raise BadDimensions(f"layer {k} has shape {w.shape}/{b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise BadDimensions(f"layer {k} has non-finite parameters")


def init_model(layer_dims, seed: int = 0) -> MlpModel:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise BadDimensions(f"invalid layer dimensions {layer_dims!r}")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in)) for d_in, d_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(d_out) for d_out in dims[1:]]
    return MlpModel(dims, weights, biases, seed=seed)


def _as_batch(model: MlpModel, theta) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[1] != model.n_in:
        raise DimensionMismatch(f"model expects inputs of length {model.n_in}, got {theta.shape[1]}")
    return theta, single


def forward(model: MlpModel, theta) -> np.ndarray:
    """Network output in the model's own (possibly standardized) coordinates."""
    h, single = _as_batch(model, theta)
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        # ties at exactly zero count as inactive
        h = z if k == last else np.where(z > 0, z, 0.0)
    return h[0] if single else h


def input_jacobian(model: MlpModel, theta) -> np.ndarray:
    """d forward / d theta by forward-mode propagation of every input direction."""
    h, single = _as_batch(model, theta)
    S = h.shape[0]
    T = np.broadcast_to(np.eye(model.n_in), (S, model.n_in, model.n_in))
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        T = T @ W.T
        if k < last:
            mask = z > 0
            h = np.where(mask, z, 0.0)
            T = T * mask[:, None, :]
    jac = np.swapaxes(T, 1, 2)
    return jac[0] if single else jac


def predict(model: MlpModel, theta) -> np.ndarray:
    """Output in raw units, applying the model's standardization if present."""
    theta = np.asarray(theta, dtype=float)
    if model.theta_stats is not None:
        theta = model.theta_stats.apply(theta)
    out = forward(model, theta)
    if model.x_stats is not None:
        out = model.x_stats.invert(out)
    return out


def predict_jacobian(model: MlpModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if model.theta_stats is None or model.x_stats is None:
        return input_jacobian(model, theta)
    jac = input_jacobian(model, model.theta_stats.apply(theta))
    return denormalize_jacobians(jac, model.theta_stats, model.x_stats)


# -- data and configuration ------------------------------------------------


@dataclass
class TrainingSet:
    theta: np.ndarray  # S x n
    x: np.ndarray  # S x I
    jac: np.ndarray  # S x I x n, zero where missing
    has_jac: np.ndarray  # S bool

    def __post_init__(self) -> None:
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        S, n = self.theta.shape
        n_out = self.x.shape[1]
        if self.x.shape[0] != S:
            raise DimensionMismatch("theta and x sample counts differ")
        self.jac = np.asarray(self.jac, dtype=float).reshape(S, n_out, n)
        self.has_jac = np.asarray(self.has_jac, dtype=bool).reshape(S)

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def n_full(self) -> int:
        return int(self.has_jac.sum())

    @property
    def n_degenerate(self) -> int:
        return len(self) - self.n_full

    def subset(self, idx) -> TrainingSet:
        idx = np.asarray(idx)
        return TrainingSet(self.theta[idx], self.x[idx], self.jac[idx], self.has_jac[idx])

    @classmethod
    def from_records(cls, records: list[SensitivityRecord]) -> TrainingSet:
        if not records:
            raise EmptyBatch("no records")
        n = len(records[0].theta)
        n_out = len(records[0].x)
        if any(len(r.theta) != n or len(r.x) != n_out for r in records):
            raise DimensionMismatch("records disagree on theta or x length")
        jac = np.zeros((len(records), n_out, n))
        has = np.zeros(len(records), dtype=bool)
        for s, r in enumerate(records):
            if r.jacobian is not None and not r.degenerate:
                jac[s] = r.jacobian
                has[s] = True
        return cls(
            np.array([r.theta for r in records]),
            np.array([r.x for r in records]),
            jac,
            has,
        )

    def standardized(self, theta_stats: Standardizer, x_stats: Standardizer) -> TrainingSet:
        return TrainingSet(
            theta_stats.apply(self.theta),
            x_stats.apply(self.x),
            normalize_jacobians(self.jac, theta_stats, x_stats),
            self.has_jac,
        )


@dataclass
class TrainConfig:
    mode: str = SI
    jacobian_weight: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalize: str = "none"
    batch_size: int | None = None
    record_every: int = 1
    keep_best: bool = True

    def validate(self) -> None:
        if self.mode not in (PLAIN, SI):
            raise BadConfig(f"mode must be {PLAIN!r} or {SI!r}")
        if not self.learning_rate > 0:
            raise BadConfig("learning_rate must be positive")
        if self.epochs < 0:
            raise BadConfig("epochs must be nonnegative")
        if self.jacobian_weight < 0:
            raise BadConfig("jacobian_weight must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise BadConfig("batch_size must be positive")
        if self.record_every < 1:
            raise BadConfig("record_every must be positive")
        if self.normalize not in NORMALIZE_CHOICES:
            raise BadConfig(f"normalize must be one of {NORMALIZE_CHOICES}")


def _network_space(model: MlpModel, batch: TrainingSet) -> TrainingSet:
    if model.theta_stats is None or model.x_stats is None:
        return batch
    return batch.standardized(model.theta_stats, model.x_stats)


def _value_and_grad(weights, biases, data: TrainingSet, mu: float, si: bool, need_grad: bool = True):
    K = len(weights)
    h = data.theta
    hs = [h]
    masks = []
    for k in range(K - 1):
        z = h @ weights[k].T + biases[k]
        m = z > 0
        h = np.where(m, z, 0.0)
        masks.append(m)
        hs.append(h)
    out = h @ weights[-1].T + biases[-1]
    resid = out - data.x
    loss = float(np.sum(resid * resid))
    if not si and not need_grad:
        return loss, None, None

    S = data.theta.shape[0]
    d_out = weights[-1].shape[0]
    gW = [None] * K
    gb = [None] * K
    delta = 2.0 * resid
    if si:
        # Reverse pass of the d_out output unit vectors per sample gives the
        # input Jacobian; rows are stored flat as (sample, output) pairs.
        fmasks = [np.repeat(m, d_out, axis=0).astype(float) for m in masks]
        gamma = np.tile(np.eye(d_out), (S, 1))
        gammas = [None] * K
        for k in range(K - 1, -1, -1):
            gW[k] = delta.T @ hs[k]
            gb[k] = delta.sum(axis=0)
            gammas[k] = gamma
            gamma = gamma @ weights[k]
            if k > 0:
                delta = (delta @ weights[k]) * masks[k - 1]
                gamma *= fmasks[k - 1]
        n_in = data.theta.shape[1]
        weight = np.repeat(data.has_jac, d_out)[:, None]
        diff = (gamma - data.jac.reshape(S * d_out, n_in)) * weight
        loss += mu * float(np.sum(diff * diff))
        adj = 2.0 * mu * diff
        for k in range(K):
            gW[k] = gW[k] + gammas[k].T @ adj
            if k < K - 1:
                adj = (adj @ weights[k].T) * fmasks[k]
    else:
        for k in range(K - 1, -1, -1):
            gW[k] = delta.T @ hs[k]
            gb[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ weights[k]) * masks[k - 1]
    return loss, gW, gb


def _check_batch(model: MlpModel, batch: TrainingSet) -> None:
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    if batch.theta.shape[1] != model.n_in or batch.x.shape[1] != model.n_out:
        raise DimensionMismatch(
            f"batch has {batch.theta.shape[1]} inputs / {batch.x.shape[1]} outputs, "
            f"model expects {model.n_in} / {model.n_out}"
        )


def loss(model: MlpModel, batch: TrainingSet, config: TrainConfig) -> float:
    """Training loss, evaluated in the model's standardized coordinates if it has statistics."""
    _check_batch(model, batch)
    data = _network_space(model, batch)
    value, _, _ = _value_and_grad(
        model.weights, model.biases, data, config.jacobian_weight, config.mode == SI, need_grad=False
    )
    return value


def loss_gradient(model: MlpModel, batch: TrainingSet, config: TrainConfig):
    """Exact gradient as ``(weight_grads, bias_grads)`` lists shaped like the model."""
    _check_batch(model, batch)
    data = _network_space(model, batch)
    _, gW, gb = _value_and_grad(model.weights, model.biases, data, config.jacobian_weight, config.mode == SI)
    return gW, gb


class Adam:
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    seconds: float = 0.0


def value_mse(model: MlpModel, theta: np.ndarray, x: np.ndarray) -> float:
    """Mean over samples of the squared prediction error norm, raw units."""
    err = predict(model, theta) - x
    return float(np.mean(np.sum(err * err, axis=1)))


def train(
    model: MlpModel,
    data: TrainingSet,
    config: TrainConfig,
    validation: TrainingSet | None = None,
) -> tuple[MlpModel, TrainHistory]:
    """Full-batch (by default) Adam on the configured loss.

    Unless ``config.normalize`` is "none", for a model lacking statistics, standardization
    statistics are fitted on ``data`` and stored in the returned model. With
    ``epochs=0`` the input model is returned unchanged (as a copy).
    """
    config.validate()
    _check_batch(model, data)
    model = model.copy()
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    if config.normalize != "none" and model.theta_stats is None:
        per_column = config.normalize == "column"
        model.theta_stats = Standardizer.fit(data.theta, per_column)
        model.x_stats = Standardizer.fit(data.x, per_column)
    net_data = _network_space(model, data)
    si = config.mode == SI
    mu = config.jacobian_weight
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    params = model.weights + model.biases
    K = len(model.weights)
    rng = np.random.default_rng(config.seed)
    S = len(net_data)
    elapsed = 0.0
    full_batch = config.batch_size is None or config.batch_size >= S
    best_loss, best = np.inf, None
    for epoch in range(1, config.epochs + 1):
        tick = time.perf_counter()
        if full_batch:
            batches = [net_data]
        else:
            order = rng.permutation(S)
            batches = [net_data.subset(order[i : i + config.batch_size]) for i in range(0, S, config.batch_size)]
        epoch_loss = 0.0
        for batch in batches:
            value, gW, gb = _value_and_grad(params[:K], params[K:], batch, mu, si)
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch)
            epoch_loss += value
            if full_batch and config.keep_best and value < best_loss:
                best_loss, best = value, [p.copy() for p in params]
            opt.step(params, gW + gb)
        elapsed += time.perf_counter() - tick
        if epoch % config.record_every == 0 or epoch == config.epochs:
            history.epochs.append(epoch)
            history.train_loss.append(epoch_loss)
            if validation is not None:
                history.val_mse.append(value_mse(model, validation.theta, validation.x))
    if full_batch and config.keep_best:
        final, _, _ = _value_and_grad(params[:K], params[K:], net_data, mu, si, need_grad=False)
        if not final <= best_loss:
            params = best
    history.seconds = elapsed
    model.weights, model.biases = params[:K], params[K:]
    return model, history
