"""
Log-reparameterized MLP for the tracking penalty.

The network phi(mu) is regressed onto log(y); the penalty is exp(phi), which is
positive by construction.  Inputs are z-scored with statistics stored in the
model, so planners see one consistent function of the raw (x0, r) vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import numpy.typing as npt

from layertrack.dataset import TrainingSample, stack_samples
from layertrack.errors import DatasetFormatError, TrainingDivergence

Array = npt.NDArray[np.float64]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EPS_LABEL = 1e-8
STD_FLOOR = 1e-2  # features that barely vary in training are scaled as if they had 1 cm / 0.01 rad spread
DIVERGENCE_LOSS = 1e12

PAPER_HIDDEN = {"unicycle": (1000, 500, 200), "quadrotor": (500, 400, 200)}
DESK_HIDDEN = (128, 64)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 2500
    seed: int = 0
    hidden: tuple[int, ...] = PAPER_HIDDEN["unicycle"]
    val_fraction: float = 0.1
    span_init: bool = True  # start the first layer inside the span of the training inputs

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("batch_size", "learning_rate", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not all(h > 0 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def paper(cls, system: str, seed: int = 0) -> "TrainConfig":
        if system == "unicycle":
            return cls(64, 1e-4, 0.9, 2500, seed, PAPER_HIDDEN["unicycle"])
        return cls(64, 1e-3, 0.9, 2000, seed, PAPER_HIDDEN["quadrotor"])

    @classmethod
    def desk(cls, system: str, seed: int = 0) -> "TrainConfig":
        return cls(64, 1e-3, 0.9, 500, seed, DESK_HIDDEN)


@dataclass
class MlpModel:
    dims: list[int]
    weights: list[Array]  # layer l: (dims[l+1], dims[l])
    biases: list[Array]
    mean: Array
    std: Array
    rho: float = 1.0
    system: str = "unicycle"
    gains_hash: str = ""

    def __post_init__(self) -> None:
        assert self.dims[-1] == 1, "output layer must be scalar"
        assert len(self.weights) == len(self.biases) == len(self.dims) - 1, "layer count mismatch"
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            assert W.shape == (self.dims[l + 1], self.dims[l]), f"layer {l} weight shape {W.shape}"
            assert b.shape == (self.dims[l + 1],), f"layer {l} bias shape {b.shape}"
        assert self.mean.shape == self.std.shape == (self.dims[0],), "normalization size mismatch"
        assert np.all(self.std > 0.0), "input_std must be positive"

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def params(self) -> list[Array]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.mean.copy(),
            self.std.copy(),
            self.rho,
            self.system,
            self.gains_hash,
        )

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "system": self.system,
            "rho": self.rho,
            "dims": list(self.dims),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "gains_hash": self.gains_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported checkpoint version {d.get('version')!r}")
        try:
            return cls(
                dims=[int(k) for k in d["dims"]],
                weights=[np.asarray(W, float).reshape(len(W), -1) for W in d["weights"]],
                biases=[np.asarray(b, float) for b in d["biases"]],
                mean=np.asarray(d["mean"], float),
                std=np.asarray(d["std"], float),
                rho=float(d["rho"]),
                system=d["system"],
                gains_hash=d.get("gains_hash", ""),
            )
        except (KeyError, ValueError, AssertionError) as exc:
            raise DatasetFormatError(f"malformed checkpoint: {exc}") from exc


def save_model(model: MlpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path: str | Path) -> MlpModel:
    return MlpModel.from_dict(json.loads(Path(path).read_text()))


def init_model(
    dims: Sequence[int],
    rng: np.random.Generator,
    mean: Array | None = None,
    std: Array | None = None,
    **meta,
) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    mean = np.zeros(dims[0]) if mean is None else mean
    std = np.ones(dims[0]) if std is None else std
    return MlpModel(dims, weights, biases, mean, std, **meta)


def elu(z: Array) -> Array:
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: Array) -> Array:
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def _check_input(model: MlpModel, mu: Array) -> Array:
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] != model.input_dim:
        raise ValueError(f"input has {mu.shape[-1]} features, model expects {model.input_dim}")
    return mu


def _forward(model: MlpModel, X: Array) -> tuple[Array, list[Array], list[Array]]:
    """Batch forward on raw inputs X (B, d); returns phi (B,), layer inputs, pre-activations."""
    h = (X - model.mean) / model.std
    inputs, pre = [], []
    L = len(model.weights)
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = elu(z) if l < L - 1 else z
    return h[:, 0], inputs, pre


def _backward(model: MlpModel, inputs: list[Array], pre: list[Array], dphi: Array) -> tuple[list[Array], Array]:
    """Backpropagate dL/dphi (B,) to parameter gradients and dL/d(normalized input)."""
    grads: list[Array] = []
    delta = dphi[:, None]
    L = len(model.weights)
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            delta = delta * elu_grad(pre[l])
        grads.append(inputs[l].T @ delta)  # transposed below
        grads.append(delta.sum(axis=0))
        delta = delta @ model.weights[l]
    # grads were appended as (dW^T, db) from the last layer backwards
    out = []
    for l in range(L):
        dWt, db = grads[2 * (L - 1 - l)], grads[2 * (L - 1 - l) + 1]
        out += [dWt.T, db]
    return out, delta


def mlp_forward(model: MlpModel, mu: Array):
    """phi(mu); scalar for a single input, (B,) for a batch."""
    mu = _check_input(model, mu)
    single = mu.ndim == 1
    phi, _, _ = _forward(model, np.atleast_2d(mu))
    return float(phi[0]) if single else phi


def penalty(model: MlpModel, mu: Array):
    return np.exp(mlp_forward(model, mu))


def phi_and_input_grad(model: MlpModel, mu: Array) -> tuple[float, Array]:
    """phi and d phi / d mu for a single raw input."""
    mu = _check_input(model, mu)
    phi, inputs, pre = _forward(model, mu[None, :])
    _, dz = _backward(model, inputs, pre, np.ones(1))
    return float(phi[0]), dz[0] / model.std


def input_gradient(model: MlpModel, mu: Array) -> Array:
    """Gradient of exp(phi) with respect to the un-normalized input."""
    phi, g = phi_and_input_grad(model, mu)
    return np.exp(phi) * g


def log_labels(y: Array) -> Array:
    return np.log(np.maximum(np.asarray(y, dtype=float), EPS_LABEL))


def loss_and_grads(model: MlpModel, X: Array, y: Array) -> tuple[float, list[Array]]:
    """
    Mean of (phi(mu_i) - log y_i)^2 over the batch and its gradients, ordered
    like ``model.params()``.  Labels are clamped at EPS_LABEL before the log.
    """
    X = _check_input(model, np.atleast_2d(X))
    target = log_labels(y)
    phi, inputs, pre = _forward(model, X)
    resid = phi - target
    loss = float(np.mean(resid**2))
    grads, _ = _backward(model, inputs, pre, 2.0 * resid / len(resid))
    return loss, grads


def momentum_step(params: list[Array], velocity: list[Array], grads: list[Array], lr: float, momentum: float) -> None:
    """v <- m v - lr g; theta <- theta + v, in place."""
    for p, v, g in zip(params, velocity, grads):
        v *= momentum
        v -= lr * g
        p += v


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for e, tl, vl in zip(self.epoch, self.train_loss, self.val_loss):
            rows.append(f"{e},{tl!r},{vl!r}")
        return "\n".join(rows) + "\n"


def input_span(Z: Array, rtol: float = 1e-10) -> Array:
    """Orthonormal rows spanning the (normalized) training inputs."""
    _, S, Vt = np.linalg.svd(Z, full_matrices=False)
    return Vt[S > rtol * S[0]] if S.size and S[0] > 0 else Vt[:0]


def normalization_stats(X: Array) -> tuple[Array, Array]:
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    return mean, std


def train(
    samples: Sequence[TrainingSample] | tuple[Array, Array],
    config: TrainConfig,
    rho: float = 1.0,
    system: str = "unicycle",
    gains_hash: str = "",
) -> tuple[MlpModel, TrainLog]:
    """
    Shuffled mini-batch SGD with classical momentum on log labels.

    A seeded ``val_fraction`` of the samples is held out for the validation
    column of the log.  Deterministic for a fixed ``config.seed``.

    :raises TrainingDivergence: when the loss is non-finite or exceeds 1e12.
    """
    X, y = samples if isinstance(samples, tuple) else stack_samples(samples)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) < 1:
        raise ValueError("need at least one training sample")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(X))
    n_val = int(round(config.val_fraction * len(X))) if len(X) >= 10 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, ytr = X[tr_idx], y[tr_idx]
    mean, std = normalization_stats(Xtr)
    dims = [X.shape[1], *config.hidden, 1]
    model = init_model(dims, rng, mean, std, rho=rho, system=system, gains_hash=gains_hash)
    if config.span_init:
        # SGD only ever adds multiples of training inputs to the first-layer rows,
        # so any component outside their span would stay at its random initial
        # value and make the input gradient arbitrary in directions no data covers.
        V = input_span((Xtr - mean) / std)
        model.weights[0] = (model.weights[0] @ V.T) @ V
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(Xtr))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(model, Xtr[batch], ytr[batch])
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise TrainingDivergence(f"loss {loss:.3g} at epoch {epoch}; lower the learning rate")
            momentum_step(params, velocity, grads, config.learning_rate, config.momentum)
        train_loss = float(np.mean((mlp_forward(model, Xtr) - log_labels(ytr)) ** 2))
        if not np.isfinite(train_loss) or train_loss > DIVERGENCE_LOSS:
            raise TrainingDivergence(f"loss {train_loss:.3g} at epoch {epoch}; lower the learning rate")
        val_loss = float(np.mean((mlp_forward(model, X[val_idx]) - log_labels(y[val_idx])) ** 2)) if n_val else float("nan")
        log.epoch.append(epoch)
        log.train_loss.append(train_loss)
        log.val_loss.append(val_loss)
    return model, log
