"""
Small layered neural networks: feed-forward backpropagation, Jordan-Elman recurrent
nets with two-phase (conditioning, output) training, NARX tapped-delay nets and
topology search by growth plus Fisher pruning.

Hidden layers use tanh (or logistic), the output layer is linear. Training works in
normalized space; normalization is fitted on the training split only and applied
symmetrically at inference. Loss is 0.5 * mean over the batch of the summed squared error.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit
from scipy.stats import f as f_dist

from errors import DivergenceError, ModeError, RangeError, ShapeError, StateError

logger = logging.getLogger("nnet")

SERIAL_FORMAT = "moldpilot-network"
SERIAL_VERSION = 1
FULL_BATCH_LIMIT = 500
MINI_BATCH = 32

Activation = Literal["tanh", "logistic"]
RecurrenceKind = Literal["none", "jordan_elman", "narx"]


def _tanh_grad(z: np.ndarray) -> np.ndarray:
    return 1.0 - z * z


def _logistic_grad(z: np.ndarray) -> np.ndarray:
    return z * (1.0 - z)


# activation, derivative expressed through the activation output
ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    "tanh": (np.tanh, _tanh_grad),
    "logistic": (expit, _logistic_grad),
}


@dataclass(frozen=True)
class Topology:
    """
    layer_sizes includes input and output layers (e.g. (9, 21, 2)).
    Jordan-Elman nets feed [mix * context, (1 - mix) * previous output] back into the first hidden layer;
    the context decays with context_decay. NARX nets read input_lags exogenous samples and
    output_lags past outputs, so layer_sizes[0] = n_exogenous * input_lags + n_outputs * output_lags.
    """

    layer_sizes: tuple[int, ...]
    activation: Activation = "tanh"
    recurrence: RecurrenceKind = "none"
    context_decay: float = 0.0
    context_mix: float = 0.5
    input_lags: int = 1
    output_lags: int = 1

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ShapeError(f"topology needs >= 2 layers of size >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.recurrence not in ("none", "jordan_elman", "narx"):
            raise ShapeError(f"unknown recurrence {self.recurrence!r}")
        if self.recurrence == "jordan_elman":
            if len(sizes) < 3:
                raise ShapeError("a Jordan-Elman net needs at least one hidden layer")
            if not 0.0 <= self.context_decay < 1.0:
                raise ShapeError(f"context_decay must be in [0, 1), got {self.context_decay}")
            if not 0.0 <= self.context_mix <= 1.0:
                raise ShapeError(f"context_mix must be in [0, 1], got {self.context_mix}")
        if self.recurrence == "narx":
            if self.input_lags < 1 or self.output_lags < 1:
                raise ShapeError("NARX lags must be >= 1")
            exog = sizes[0] - self.n_outputs * self.output_lags
            if exog <= 0 or exog % self.input_lags:
                raise ShapeError(
                    f"input width {sizes[0]} is not n_exogenous * {self.input_lags} + {self.n_outputs} * {self.output_lags}"
                )

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def n_exogenous(self) -> int:
        if self.recurrence != "narx":
            return self.n_inputs
        return (self.n_inputs - self.n_outputs * self.output_lags) // self.input_lags

    def label(self) -> str:
        return "-".join(str(s) for s in self.layer_sizes)

    def as_dict(self) -> dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "recurrence": self.recurrence,
            "context_decay": self.context_decay,
            "context_mix": self.context_mix,
            "input_lags": self.input_lags,
            "output_lags": self.output_lags,
        }


@dataclass
class Network:
    """Weights are (out, in) matrices. recurrent is the Jordan-Elman feedback matrix, None otherwise."""

    topology: Topology
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    recurrent: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_scale: np.ndarray | None = None
    trained: bool = False

    def __post_init__(self) -> None:
        sizes = self.topology.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("one weight matrix and bias vector per layer transition")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} inconsistent with {sizes}")
        if self.topology.recurrence == "jordan_elman":
            expected = (sizes[1], sizes[1] + sizes[-1])
            if self.recurrent is None or self.recurrent.shape != expected:
                raise ShapeError(f"Jordan-Elman feedback must be {expected}")
        n_in, n_out = sizes[0], sizes[-1]
        self.x_mean = np.zeros(n_in) if self.x_mean is None else np.asarray(self.x_mean, dtype=float)
        self.x_scale = np.ones(n_in) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        self.y_mean = np.zeros(n_out) if self.y_mean is None else np.asarray(self.y_mean, dtype=float)
        self.y_scale = np.ones(n_out) if self.y_scale is None else np.asarray(self.y_scale, dtype=float)

    def copy(self) -> "Network":
        return Network(
            topology=self.topology,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            recurrent=None if self.recurrent is None else self.recurrent.copy(),
            x_mean=self.x_mean.copy(),
            x_scale=self.x_scale.copy(),
            y_mean=self.y_mean.copy(),
            y_scale=self.y_scale.copy(),
            trained=self.trained,
        )

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (weights, biases, feedback)."""
        arrays = [*self.weights, *self.biases]
        if self.recurrent is not None:
            arrays.append(self.recurrent)
        return arrays

    def normalize_inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_scale

    def denormalize_inputs(self, xn: np.ndarray) -> np.ndarray:
        return xn * self.x_scale + self.x_mean

    def normalize_outputs(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_scale

    def denormalize_outputs(self, yn: np.ndarray) -> np.ndarray:
        return yn * self.y_scale + self.y_mean


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    recurrent: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        arrays = [*self.weights, *self.biases]
        if self.recurrent is not None:
            arrays.append(self.recurrent)
        return arrays

    def norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


class TrainConfig(BaseModel):
    """Gradient-descent hyperparameters. batch_size None means full batch below 500 samples, else 32."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(1000, ge=0)
    batch_size: int | None = Field(None, ge=1)
    validation_fraction: float = Field(0.2, ge=0, le=0.5)
    seed: int = Field(0, ge=0)
    patience: int = Field(50, ge=1, description="epochs without validation improvement before stopping")


@dataclass
class TrainingHistory:
    train_mse: list[float] = field(default_factory=list)
    validation_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_validation_mse(self) -> float:
        if not self.validation_mse:
            return float("inf")
        return self.validation_mse[self.best_epoch - 1]


def init(topology: Topology, seed: int = 0) -> Network:
    """Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; feedback drawn last."""
    rng = np.random.default_rng(seed)
    sizes = topology.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    recurrent = None
    if topology.recurrence == "jordan_elman":
        fan_in = sizes[1] + sizes[-1]
        bound = 1.0 / math.sqrt(fan_in)
        recurrent = rng.uniform(-bound, bound, size=(sizes[1], fan_in))
    return Network(topology=topology, weights=weights, biases=biases, recurrent=recurrent)


# --- layered forward / backward in normalized space ---


def _forward_from(net: Network, z: np.ndarray, start: int = 0) -> list[np.ndarray]:
    """Outputs of every layer from `start` on; element 0 is the input z."""
    act, _ = ACTIVATIONS[net.topology.activation]
    last = len(net.weights) - 1
    outs = [z]
    for k in range(start, len(net.weights)):
        a = z @ net.weights[k].T + net.biases[k]
        z = a if k == last else act(a)
        outs.append(z)
    return outs


def _backward_from(
    net: Network, outs: list[np.ndarray], d_out: np.ndarray, grads: Gradients, start: int = 0
) -> np.ndarray:
    """Accumulate layer gradients into grads; returns the gradient w.r.t. the input of layer `start`."""
    _, dact = ACTIVATIONS[net.topology.activation]
    delta = d_out
    for k in reversed(range(start, len(net.weights))):
        z_in = outs[k - start]
        grads.weights[k] += delta.T @ z_in
        grads.biases[k] += delta.sum(axis=0)
        d_in = delta @ net.weights[k]
        if k == start:
            return d_in
        delta = d_in * dact(z_in)
    return delta


def _zero_grads(net: Network) -> Gradients:
    return Gradients(
        weights=[np.zeros_like(w) for w in net.weights],
        biases=[np.zeros_like(b) for b in net.biases],
        recurrent=None if net.recurrent is None else np.zeros_like(net.recurrent),
    )


def _as_batch(net: Network, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.topology.n_inputs:
        raise ShapeError(f"input width {batch.shape[-1]} != {net.topology.n_inputs}")
    return batch, single


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Inference on one input vector or a (batch, n_in) matrix. Pure: the network is not modified."""
    if net.topology.recurrence == "jordan_elman":
        raise ModeError("Jordan-Elman nets run through je_step / je_predict with a session")
    batch, single = _as_batch(net, x)
    y = net.denormalize_outputs(_forward_from(net, net.normalize_inputs(batch))[-1])
    return y[0] if single else y


def _ff_loss_grad(net: Network, xn: np.ndarray, yn: np.ndarray, want_grad: bool = True) -> tuple[float, Gradients | None]:
    outs = _forward_from(net, xn)
    err = outs[-1] - yn
    n = len(xn)
    loss = 0.5 * float(np.sum(err * err)) / n
    if not want_grad:
        return loss, None
    grads = _zero_grads(net)
    _backward_from(net, outs, err / n, grads)
    return loss, grads


def _check_batch(net: Network, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise RangeError("empty batch")
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ShapeError("inputs and targets must be 2-D with one row per sample")
    if x.shape[1] != net.topology.n_inputs or y.shape[1] != net.topology.n_outputs:
        raise ShapeError(f"batch widths ({x.shape[1]}, {y.shape[1]}) do not match {net.topology.label()}")
    return x, y


def loss(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    """Training loss in normalized space, 0.5 * mean over samples of summed squared error."""
    x, y = _check_batch(net, x, y)
    return _ff_loss_grad(net, net.normalize_inputs(x), net.normalize_outputs(y), want_grad=False)[0]


def backprop_gradients(net: Network, x: np.ndarray, y: np.ndarray) -> Gradients:
    """Gradient of `loss` w.r.t. every weight and bias (mean over the batch)."""
    if net.topology.recurrence == "jordan_elman":
        raise ModeError("use je_gradients for Jordan-Elman nets")
    x, y = _check_batch(net, x, y)
    return _ff_loss_grad(net, net.normalize_inputs(x), net.normalize_outputs(y))[1]


# --- training ---


def _stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    scale = a.std(axis=0)
    return mean, np.where(scale < 1e-12, 1.0, scale)


def split_indices(n: int, validation_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, validation) index split; at least one validation sample when the fraction is > 0."""
    n_val = int(round(validation_fraction * n))
    if validation_fraction > 0:
        n_val = max(n_val, 1)
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


LossGrad = Callable[[Network, np.ndarray, bool], "tuple[float, Gradients | None]"]


def _descend(
    net: Network,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    loss_grad: LossGrad,
) -> tuple[Network, TrainingHistory]:
    """Momentum gradient descent with early stopping; returns the best-validation weights."""
    n_out = net.topology.n_outputs
    batch = config.batch_size or (len(train_idx) if len(train_idx) < FULL_BATCH_LIMIT else MINI_BATCH)
    velocity = [np.zeros_like(p) for p in net.params()]
    history = TrainingHistory()
    best, best_val, since = net.copy(), math.inf, 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(train_idx)
            for start in range(0, len(order), batch):
                _, grads = loss_grad(net, order[start : start + batch], True)
                for p, v, g in zip(net.params(), velocity, grads.arrays()):
                    v *= config.momentum
                    v -= config.learning_rate * g
                    p += v
            train_loss = loss_grad(net, train_idx, False)[0]
            val_loss = loss_grad(net, val_idx, False)[0] if len(val_idx) else train_loss
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise DivergenceError(epoch)
            history.train_mse.append(2.0 * train_loss / n_out)
            history.validation_mse.append(2.0 * val_loss / n_out)
            if val_loss < best_val:
                best, best_val, since = net.copy(), val_loss, 0
                history.best_epoch = epoch
            else:
                since += 1
                if since >= config.patience:
                    logger.debug("Early stop at epoch %d (best %d)", epoch, history.best_epoch)
                    break
    best.trained = True
    return best, history


def _check_dataset(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} inputs for {len(y)} targets")
    if len(x) < 10:
        raise RangeError(f"dataset needs >= 10 samples, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise RangeError("dataset contains non-finite values")
    return x, y


def train(net: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig | None = None) -> tuple[Network, TrainingHistory]:
    """
    Train a feed-forward (or NARX core, series-parallel) network.
    The input network is not modified; zero epochs return it unchanged with an empty history.
    """
    if net.topology.recurrence == "jordan_elman":
        raise ModeError("use je_train for Jordan-Elman nets")
    config = config or TrainConfig()
    x, y = _check_dataset(x, y)
    _check_batch(net, x[:1], y[:1])
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_indices(len(x), config.validation_fraction, rng)
    if config.epochs == 0:
        return net.copy(), TrainingHistory()
    net = net.copy()
    net.x_mean, net.x_scale = _stats(x[train_idx])
    net.y_mean, net.y_scale = _stats(y[train_idx])
    xn, yn = net.normalize_inputs(x), net.normalize_outputs(y)

    def loss_grad(n: Network, idx: np.ndarray, want: bool) -> tuple[float, Gradients | None]:
        return _ff_loss_grad(n, xn[idx], yn[idx], want)

    trained, history = _descend(net, train_idx, val_idx, config, rng, loss_grad)
    logger.info(
        "Trained %s: best epoch %d, validation MSE %.6g",
        net.topology.label(),
        history.best_epoch,
        history.best_validation_mse,
    )
    return trained, history


# --- Jordan-Elman ---


def _je_loss_grad(net: Network, un: np.ndarray, yn: np.ndarray, want_grad: bool) -> tuple[float, Gradients | None]:
    """
    Conditioning phase feeds every step and updates the context. The output phase is one more
    step with a null external input; only its output is compared to the target.
    """
    topo = net.topology
    act, dact = ACTIVATIONS[topo.activation]
    decay, mix = topo.context_decay, topo.context_mix
    n, _, n_in = un.shape
    steps = un.shape[1] + 1
    un = np.concatenate([un, np.zeros((n, 1, n_in))], axis=1)
    hidden, n_out = topo.layer_sizes[1], topo.n_outputs
    context = np.zeros((n, hidden))
    output = np.zeros((n, n_out))
    cache = []
    for t in range(steps):
        fed = np.hstack([mix * context, (1.0 - mix) * output])
        h = act(un[:, t] @ net.weights[0].T + net.biases[0] + fed @ net.recurrent.T)
        context = decay * context + (1.0 - decay) * h
        outs = _forward_from(net, context, start=1)
        output = outs[-1]
        cache.append((un[:, t], fed, h, outs))
    err = output - yn
    value = 0.5 * float(np.sum(err * err)) / n
    if not want_grad:
        return value, None

    grads = _zero_grads(net)
    d_context = np.zeros((n, hidden))
    d_output = np.zeros((n, n_out))
    for t in reversed(range(steps)):
        u, fed, h, outs = cache[t]
        if t == steps - 1:
            d_output = d_output + err / n
        d_c = _backward_from(net, outs, d_output, grads, start=1) + d_context
        d_a = (1.0 - decay) * d_c * dact(h)
        grads.weights[0] += d_a.T @ u
        grads.biases[0] += d_a.sum(axis=0)
        grads.recurrent += d_a.T @ fed
        d_fed = d_a @ net.recurrent
        d_context = decay * d_c + mix * d_fed[:, :hidden]
        d_output = (1.0 - mix) * d_fed[:, hidden:]
    return value, grads


def _check_sequences(net: Network, sequences: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if net.topology.recurrence != "jordan_elman":
        raise ModeError(f"network recurrence is {net.topology.recurrence!r}, expected 'jordan_elman'")
    try:
        seqs = np.asarray(sequences, dtype=float)
    except ValueError:
        raise ShapeError("sequences must all have the same length") from None
    targets = np.asarray(targets, dtype=float)
    if seqs.ndim != 3 or seqs.shape[2] != net.topology.n_inputs or seqs.shape[1] < 1:
        raise ShapeError(f"sequences must be (n, steps, {net.topology.n_inputs}), got {seqs.shape}")
    if targets.shape != (len(seqs), net.topology.n_outputs):
        raise ShapeError(f"targets must be ({len(seqs)}, {net.topology.n_outputs}), got {targets.shape}")
    return seqs, targets


def je_gradients(net: Network, sequences: np.ndarray, targets: np.ndarray) -> Gradients:
    seqs, targets = _check_sequences(net, sequences, targets)
    if len(seqs) == 0:
        raise RangeError("empty batch")
    return _je_loss_grad(net, net.normalize_inputs(seqs), net.normalize_outputs(targets), True)[1]


def je_loss(net: Network, sequences: np.ndarray, targets: np.ndarray) -> float:
    seqs, targets = _check_sequences(net, sequences, targets)
    return _je_loss_grad(net, net.normalize_inputs(seqs), net.normalize_outputs(targets), False)[0]


def je_train(
    net: Network, sequences: np.ndarray, targets: np.ndarray, config: TrainConfig | None = None
) -> tuple[Network, TrainingHistory]:
    """Two-phase training over (n, steps, n_in) sequences, each with one target for its output phase."""
    seqs, targets = _check_sequences(net, sequences, targets)
    config = config or TrainConfig()
    _check_dataset(seqs.reshape(len(seqs), -1), targets)
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_indices(len(seqs), config.validation_fraction, rng)
    if config.epochs == 0:
        return net.copy(), TrainingHistory()
    net = net.copy()
    net.x_mean, net.x_scale = _stats(seqs[train_idx].reshape(-1, seqs.shape[2]))
    net.y_mean, net.y_scale = _stats(targets[train_idx])
    un, yn = net.normalize_inputs(seqs), net.normalize_outputs(targets)

    def loss_grad(n: Network, idx: np.ndarray, want: bool) -> tuple[float, Gradients | None]:
        return _je_loss_grad(n, un[idx], yn[idx], want)

    trained, history = _descend(net, train_idx, val_idx, config, rng, loss_grad)
    logger.info("JE-trained %s over %d sequences: best epoch %d", net.topology.label(), len(seqs), history.best_epoch)
    return trained, history


@dataclass(frozen=True, eq=False)
class JESession:
    """Caller-owned recurrent state (normalized space)."""

    context: np.ndarray
    output: np.ndarray


def je_session(net: Network) -> JESession:
    if net.topology.recurrence != "jordan_elman":
        raise ModeError("sessions exist only for Jordan-Elman nets")
    return JESession(context=np.zeros(net.topology.layer_sizes[1]), output=np.zeros(net.topology.n_outputs))


def _je_advance(net: Network, session: JESession, un: np.ndarray) -> tuple[np.ndarray, JESession]:
    topo = net.topology
    act, _ = ACTIVATIONS[topo.activation]
    fed = np.concatenate([topo.context_mix * session.context, (1.0 - topo.context_mix) * session.output])
    h = act(un @ net.weights[0].T + net.biases[0] + net.recurrent @ fed)
    context = topo.context_decay * session.context + (1.0 - topo.context_decay) * h
    output = _forward_from(net, context[None, :], start=1)[-1][0]
    return net.denormalize_outputs(output), JESession(context=context, output=output)


def je_step(net: Network, session: JESession, u: np.ndarray) -> tuple[np.ndarray, JESession]:
    """Feed one input; returns the denormalized output and the next session. Neither argument is mutated."""
    if net.topology.recurrence != "jordan_elman":
        raise ModeError("je_step needs a Jordan-Elman net")
    batch, _ = _as_batch(net, u)
    return _je_advance(net, session, net.normalize_inputs(batch[0]))


def je_output(net: Network, session: JESession) -> tuple[np.ndarray, JESession]:
    """Output phase: one step from the session with a null (normalized zero) external input."""
    if net.topology.recurrence != "jordan_elman":
        raise ModeError("je_output needs a Jordan-Elman net")
    return _je_advance(net, session, np.zeros(net.topology.n_inputs))


def je_predict(net: Network, sequence: np.ndarray) -> np.ndarray:
    """Condition on a whole sequence from an empty context, then return the output-phase prediction."""
    session = je_session(net)
    steps = np.asarray(sequence, dtype=float)
    if steps.ndim != 2 or len(steps) == 0:
        raise ShapeError("sequence must be a non-empty (steps, n_in) array")
    for u in steps:
        _, session = je_step(net, session, u)
    return je_output(net, session)[0]


# --- NARX ---


def _require_narx(net: Network) -> Topology:
    if net.topology.recurrence != "narx":
        raise ModeError(f"network recurrence is {net.topology.recurrence!r}, expected 'narx'")
    return net.topology


def narx_inputs(topology: Topology, input_history: np.ndarray, output_history: np.ndarray) -> np.ndarray:
    """Tapped-delay vector [u(t), ..., u(t-du+1), y(t-1), ..., y(t-dy)]; histories are oldest-first."""
    u = np.atleast_2d(np.asarray(input_history, dtype=float))
    y = np.atleast_2d(np.asarray(output_history, dtype=float))
    du, dy = topology.input_lags, topology.output_lags
    if len(u) < du or len(y) < dy:
        raise RangeError(f"need >= {du} input and >= {dy} output samples, got {len(u)} and {len(y)}")
    if u.shape[1] != topology.n_exogenous or y.shape[1] != topology.n_outputs:
        raise ShapeError(f"history widths ({u.shape[1]}, {y.shape[1]}) do not match {topology.label()}")
    return np.concatenate([u[::-1][:du].ravel(), y[::-1][:dy].ravel()])


def narx_predict(net: Network, input_history: np.ndarray, output_history: np.ndarray) -> np.ndarray:
    """Series-parallel one-step prediction from true past outputs."""
    topo = _require_narx(net)
    return forward(net, narx_inputs(topo, input_history, output_history))


def narx_dataset(
    topology: Topology, inputs: np.ndarray, outputs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Lagged regression rows for series-parallel training. Row t targets outputs[t]."""
    u = np.asarray(inputs, dtype=float)
    y = np.asarray(outputs, dtype=float)
    if len(u) != len(y):
        raise ShapeError("input and output series must have the same length")
    start = max(topology.input_lags - 1, topology.output_lags)
    if len(u) <= start:
        raise RangeError(f"series of length {len(u)} too short for lags")
    rows = [narx_inputs(topology, u[: t + 1], y[:t]) for t in range(start, len(u))]
    return np.array(rows), y[start:]


def narx_free_run(net: Network, inputs: np.ndarray, initial_outputs: np.ndarray) -> np.ndarray:
    """Parallel (free-running) simulation: past outputs are the model's own predictions after the seed window."""
    topo = _require_narx(net)
    u = np.asarray(inputs, dtype=float)
    history = [row for row in np.atleast_2d(np.asarray(initial_outputs, dtype=float))]
    start = max(topo.input_lags - 1, topo.output_lags)
    if len(history) < start:
        raise RangeError(f"need {start} initial outputs, got {len(history)}")
    history = history[:start]
    predictions = []
    for t in range(start, len(u)):
        y = forward(net, narx_inputs(topo, u[: t + 1], np.array(history)))
        predictions.append(y)
        history.append(y)
    return np.array(predictions).reshape(-1, topo.n_outputs)


# --- topology search ---


@dataclass
class SearchReport:
    """Growth table, Fisher pruning steps and the depth comparison of one search."""

    hidden_sizes: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    validation_mse: list[float] = field(default_factory=list)
    grown_hidden: int = 0
    selected_validation_mse: float = math.inf
    pruned_hidden: int = 0
    pruned_validation_mse: float = math.inf
    pruning_steps: list[dict[str, float]] = field(default_factory=list)
    depth_comparison: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {
            "hidden_sizes": self.hidden_sizes,
            "train_mse": self.train_mse,
            "validation_mse": self.validation_mse,
            "grown_hidden": self.grown_hidden,
            "selected_validation_mse": self.selected_validation_mse,
            "pruned_hidden": self.pruned_hidden,
            "pruned_validation_mse": self.pruned_validation_mse,
            "pruning_steps": self.pruning_steps,
            "depth_comparison": self.depth_comparison,
        }


def _rss(design: np.ndarray, targets: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    resid = targets - design @ coef
    return float(np.sum(resid * resid))


def fisher_prune(
    net: Network, x: np.ndarray, y: np.ndarray, alpha: float = 0.05
) -> tuple[list[int], list[dict[str, float]]]:
    """
    Backward elimination of hidden units of a single-hidden-layer net.
    Each unit is tested by refitting the output layer with and without it:
    F = ((RSS_without - RSS_with) / q) / (RSS_with / df), q = n_outputs.
    The least significant unit is removed while its p-value is >= alpha; at least one unit stays.
    """
    if len(net.topology.hidden) != 1:
        raise ShapeError("Fisher pruning works on single-hidden-layer nets")
    act, _ = ACTIVATIONS[net.topology.activation]
    xn = net.normalize_inputs(np.asarray(x, dtype=float))
    yn = net.normalize_outputs(np.asarray(y, dtype=float))
    hidden = act(xn @ net.weights[0].T + net.biases[0])
    ones = np.ones((len(xn), 1))
    q = net.topology.n_outputs
    active = list(range(hidden.shape[1]))
    steps: list[dict[str, float]] = []
    while len(active) > 1:
        rss_with = _rss(np.hstack([hidden[:, active], ones]), yn)
        df = q * (len(xn) - len(active) - 1)
        if df <= 0:
            break
        worst_unit, worst_f, worst_p = -1, math.inf, -1.0
        for unit in active:
            kept = [j for j in active if j != unit]
            rss_without = _rss(np.hstack([hidden[:, kept], ones]), yn)
            gain = max(rss_without - rss_with, 0.0)
            if rss_with == 0:
                f_stat = math.inf if gain > 0 else 0.0
            else:
                f_stat = (gain / q) / (rss_with / df)
            p = 0.0 if math.isinf(f_stat) else float(f_dist.sf(f_stat, q, df))
            if p > worst_p:
                worst_unit, worst_f, worst_p = unit, f_stat, p
        if worst_p < alpha:
            break
        active.remove(worst_unit)
        steps.append({"unit": worst_unit, "f": worst_f, "p": worst_p, "remaining": len(active)})
    return active, steps


def topology_search(
    x: np.ndarray,
    y: np.ndarray,
    max_hidden_per_layer: int,
    config: TrainConfig | None = None,
    *,
    patience: int = 2,
    alpha: float = 0.05,
    activation: Activation = "tanh",
    compare_depth: bool = True,
) -> tuple[Topology, SearchReport]:
    """
    Grow a single hidden layer one unit at a time until validation MSE rises for
    `patience` consecutive sizes, keep the size with the lowest validation MSE, then
    prune its units by Fisher test on the validation split.
    """
    if max_hidden_per_layer < 1:
        raise RangeError(f"max_hidden_per_layer must be >= 1, got {max_hidden_per_layer}")
    config = config or TrainConfig()
    x, y = _check_dataset(x, y)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("inputs and targets must be 2-D")
    n_in, n_out = x.shape[1], y.shape[1]
    report = SearchReport()
    nets: list[Network] = []
    rises, previous = 0, math.inf
    for h in range(1, max_hidden_per_layer + 1):
        net, history = train(init(Topology((n_in, h, n_out), activation), config.seed), x, y, config)
        val = history.best_validation_mse
        report.hidden_sizes.append(h)
        report.validation_mse.append(val)
        report.train_mse.append(history.train_mse[history.best_epoch - 1] if history.train_mse else math.inf)
        nets.append(net)
        rises = rises + 1 if val > previous else 0
        previous = val
        logger.debug("Search: %d hidden units, validation MSE %.6g", h, val)
        if rises >= patience:
            break

    best = int(np.argmin(report.validation_mse))
    report.grown_hidden = report.hidden_sizes[best]
    report.selected_validation_mse = report.validation_mse[best]

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_indices(len(x), config.validation_fraction, rng)
    test_idx = val_idx if len(val_idx) > report.grown_hidden + 2 else train_idx
    active, report.pruning_steps = fisher_prune(nets[best], x[test_idx], y[test_idx], alpha)
    report.pruned_hidden = len(active)
    if report.pruned_hidden == report.grown_hidden:
        report.pruned_validation_mse = report.selected_validation_mse
    else:
        _, history = train(init(Topology((n_in, report.pruned_hidden, n_out), activation), config.seed), x, y, config)
        report.pruned_validation_mse = history.best_validation_mse
    if report.pruned_hidden == 1 and report.grown_hidden > 1:
        logger.warning("Fisher pruning collapsed %d hidden units to the minimal network", report.grown_hidden)

    if compare_depth:
        width = report.grown_hidden
        for depth in (2, 3):
            topo = Topology((n_in, *([width] * depth), n_out), activation)
            _, history = train(init(topo, config.seed), x, y, config)
            report.depth_comparison[f"{depth}_hidden_layers"] = history.best_validation_mse
        logger.info(
            "Depth comparison at width %d: 2 layers %.6g, 3 layers %.6g",
            width,
            report.depth_comparison["2_hidden_layers"],
            report.depth_comparison["3_hidden_layers"],
        )
    selected = Topology((n_in, report.pruned_hidden, n_out), activation)
    logger.info("Topology search selected %s (grown to %d units)", selected.label(), report.grown_hidden)
    return selected, report


# --- serialization ---


def _array_doc(a: np.ndarray) -> dict[str, Any]:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _array_load(doc: dict[str, Any]) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def to_document(net: Network) -> dict[str, Any]:
    return {
        "format": SERIAL_FORMAT,
        "version": SERIAL_VERSION,
        "topology": net.topology.as_dict(),
        "trained": net.trained,
        "normalization": {
            "x_mean": _array_doc(net.x_mean),
            "x_scale": _array_doc(net.x_scale),
            "y_mean": _array_doc(net.y_mean),
            "y_scale": _array_doc(net.y_scale),
        },
        "layers": [{"weight": _array_doc(w), "bias": _array_doc(b)} for w, b in zip(net.weights, net.biases)],
        "recurrent": None if net.recurrent is None else _array_doc(net.recurrent),
    }


def from_document(doc: dict[str, Any]) -> Network:
    if doc.get("format") != SERIAL_FORMAT or doc.get("version") != SERIAL_VERSION:
        raise StateError(f"unsupported network document {doc.get('format')!r} v{doc.get('version')!r}")
    topo = doc["topology"]
    norm = doc["normalization"]
    return Network(
        topology=Topology(tuple(topo["layer_sizes"]), **{k: v for k, v in topo.items() if k != "layer_sizes"}),
        weights=[_array_load(layer["weight"]) for layer in doc["layers"]],
        biases=[_array_load(layer["bias"]) for layer in doc["layers"]],
        recurrent=None if doc["recurrent"] is None else _array_load(doc["recurrent"]),
        x_mean=_array_load(norm["x_mean"]),
        x_scale=_array_load(norm["x_scale"]),
        y_mean=_array_load(norm["y_mean"]),
        y_scale=_array_load(norm["y_scale"]),
        trained=bool(doc["trained"]),
    )


def dumps(net: Network) -> str:
    """JSON text; floats use the shortest repr that round-trips exactly."""
    return json.dumps(to_document(net), indent=1)


def loads(text: str) -> Network:
    return from_document(json.loads(text))


def save_network(net: Network, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(net) + "\n", encoding="utf-8")
    return path


def load_network(path: str | Path) -> Network:
    return loads(Path(path).read_text(encoding="utf-8"))
