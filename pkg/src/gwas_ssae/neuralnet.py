"""Dense feedforward networks trained by backpropagation and gradient descent.

Weights follow the ``W[l]`` shape ``(s_{l+1}, s_l)`` convention, so a batch
of row vectors ``a`` moves forward as ``a @ W.T + b``.  Layer 0 is the input.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import metrics

RECTIFIER = "rectifier"
SIGMOID = "sigmoid"
LINEAR = "linear"
ACTIVATIONS = (RECTIFIER, SIGMOID, LINEAR)

SQUARED = "squared"
CROSS_ENTROPY = "cross_entropy"


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    """Training diverged; ``state`` holds the epoch state at the failure."""

    def __init__(self, message: str, state: "EpochState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class LayerSpec:
    size: int
    activation: str = RECTIFIER

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("layer size must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class NetworkParams:
    layers: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if len(self.weights) != len(self.layers) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("need one weight matrix and bias per layer transition")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layers[l + 1].size, self.layers[l].size)
            if w.shape != want or b.shape != (want[0],):
                raise ShapeMismatch(f"layer {l}: W {w.shape} b {b.shape}, expected {want}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.layers, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "NetworkParams") -> bool:
        return (
            self.layers == other.layers
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    rate_annealing: float = 1e-6
    rate_decay: float = 1.0
    weight_decay: float = 0.0
    momentum_start: float = 0.5
    momentum_ramp: float = 1e-6
    momentum_stable: float = 0.0
    epochs_max: int = 100
    hidden_dropout: float = 0.5
    input_dropout: float = 0.0
    seed: int = 0
    early_stop_patience: int | None = 5
    batch_size: int | None = 32
    loss: str = CROSS_ENTROPY
    freeze_layers: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("hidden_dropout", "input_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.loss not in (SQUARED, CROSS_ENTROPY):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActivationTrace:
    zs: list[np.ndarray | None]  # zs[0] is None (input)
    activations: list[np.ndarray]  # activations[0] is the (masked) input
    masks: list[np.ndarray | None]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == RECTIFIER:
        return np.maximum(z, 0.0)
    if kind == SIGMOID:
        return expit(z)
    return z


def activation_derivative(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    """f'(z); the rectifier's derivative at exactly 0 is 0."""
    if kind == RECTIFIER:
        return (z > 0).astype(z.dtype)
    if kind == SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


def init_network(layer_specs: Sequence[LayerSpec | int], seed: int = 0) -> NetworkParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights and zero biases."""
    specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec(int(s)) for s in layer_specs)
    if len(specs) < 2:
        raise ValueError("a network needs at least an input and an output layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip((s.size for s in specs[:-1]), (s.size for s in specs[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(specs, weights, biases)


def classifier_layers(n_inputs: int, hidden: Sequence[int] = (10, 10, 10, 10), n_outputs: int = 2) -> list[LayerSpec]:
    """Rectifier hidden layers with a sigmoid output head."""
    return [LayerSpec(n_inputs, LINEAR)] + [LayerSpec(h, RECTIFIER) for h in hidden] + [LayerSpec(n_outputs, SIGMOID)]


def _as_batch(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"input has shape {x.shape}, network expects width {width}")
    return x


def draw_dropout_masks(
    params: NetworkParams,
    n_rows: int,
    rng: np.random.Generator,
    input_rate: float = 0.0,
    hidden_rate: float = 0.0,
) -> list[np.ndarray | None]:
    """Inverted-dropout masks (kept units scaled by 1 / (1 - rate)); none on the output."""
    masks: list[np.ndarray | None] = []
    last = params.n_layers - 1
    for l, spec in enumerate(params.layers):
        rate = input_rate if l == 0 else hidden_rate if l < last else 0.0
        if rate > 0:
            keep = rng.random((n_rows, spec.size)) >= rate
            masks.append(keep / (1.0 - rate))
        else:
            masks.append(None)
    return masks


def forward(params: NetworkParams, x: np.ndarray, dropout_masks: Sequence[np.ndarray | None] | None = None) -> ActivationTrace:
    """Activations of every layer for a batch (rows are examples).

    Without masks this is inference mode: no dropout and no rescaling.
    """
    a = _as_batch(x, params.layers[0].size)
    masks = list(dropout_masks) if dropout_masks is not None else [None] * params.n_layers
    if len(masks) != params.n_layers:
        raise ShapeMismatch("need one (possibly None) mask per layer")
    if masks[0] is not None:
        a = a * masks[0]
    zs: list[np.ndarray | None] = [None]
    acts = [a]
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = activate(z, params.layers[l + 1].activation)
        if masks[l + 1] is not None:
            a = a * masks[l + 1]
        zs.append(z)
        acts.append(a)
    return ActivationTrace(zs, acts, masks)


def targets_for(y: np.ndarray, n_outputs: int) -> np.ndarray:
    """Label vector -> target matrix: a column for one output, one-hot for two."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if n_outputs == 1:
        return y[:, None]
    if n_outputs == 2:
        return np.column_stack([1.0 - y, y])
    raise ShapeMismatch("classification heads have 1 or 2 outputs")


def decay_term(params: NetworkParams) -> float:
    """Sum of squared non-bias weights."""
    return float(sum(np.sum(w * w) for w in params.weights))


def data_cost(output: np.ndarray, y: np.ndarray, loss: str = SQUARED) -> float:
    """Mean per-example loss (no weight decay)."""
    if loss == SQUARED:
        return float(np.mean(0.5 * np.sum((output - y) ** 2, axis=1)))
    p = np.clip(output, 1e-15, 1 - 1e-15)
    return float(np.mean(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p), axis=1)))


def cost(params: NetworkParams, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0, loss: str = SQUARED) -> float:
    """J(W, b) = mean per-example loss + (lambda / 2) * sum of squared weights."""
    out = forward(params, x).output
    y = np.asarray(y, dtype=np.float64).reshape(out.shape)
    return data_cost(out, y, loss) + 0.5 * weight_decay * decay_term(params)


def backprop_trace(
    params: NetworkParams,
    trace: ActivationTrace,
    y: np.ndarray,
    loss: str = SQUARED,
    hidden_penalty: dict[int, np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the per-example losses, summed over the batch.

    ``hidden_penalty`` maps a hidden layer index to a term added to the
    back-propagated error before multiplying by f'(z) at that layer.
    """
    L = params.n_layers - 1
    out = trace.activations[L]
    y = np.asarray(y, dtype=np.float64).reshape(out.shape)
    out_kind = params.layers[L].activation
    if loss == SQUARED:
        delta = -(y - out) * activation_derivative(trace.zs[L], out, out_kind)
    else:
        if out_kind != SIGMOID:
            raise ValueError("cross-entropy loss needs a sigmoid output layer")
        delta = out - y

    grads_w: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    for l in range(L - 1, -1, -1):
        grads_w[l] = delta.T @ trace.activations[l]
        grads_b[l] = delta.sum(axis=0)
        if l == 0:
            break
        err = delta @ params.weights[l]
        if hidden_penalty is not None and l in hidden_penalty:
            err = err + hidden_penalty[l]
        kind = params.layers[l].activation
        a = trace.activations[l]
        if trace.masks[l] is not None:
            # a holds the masked activation; f' uses the unmasked value
            a_raw = activate(trace.zs[l], kind)
            delta = err * activation_derivative(trace.zs[l], a_raw, kind) * trace.masks[l]
        else:
            delta = err * activation_derivative(trace.zs[l], a, kind)
    return grads_w, grads_b


def backprop(params: NetworkParams, x: np.ndarray, y: np.ndarray, loss: str = SQUARED,
             dropout_masks=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-example gradients (summed when ``x`` holds several rows)."""
    return backprop_trace(params, forward(params, x, dropout_masks), y, loss)


def cost_gradient(params: NetworkParams, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0,
                  loss: str = SQUARED) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradient of :func:`cost`: (1/m) * summed gradients + lambda * W; biases not decayed."""
    x = _as_batch(x, params.layers[0].size)
    m = x.shape[0]
    gw, gb = backprop(params, x, y, loss)
    return [g / m + weight_decay * w for g, w in zip(gw, params.weights)], [g / m for g in gb]


# -- training ---------------------------------------------------------------

@dataclass
class EpochState:
    rng: np.random.Generator
    samples_seen: int = 0
    epoch: int = 0
    velocity_w: list[np.ndarray] = field(default_factory=list)
    velocity_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: NetworkParams, seed: int) -> "EpochState":
        return cls(
            rng=np.random.default_rng(seed),
            velocity_w=[np.zeros_like(w) for w in params.weights],
            velocity_b=[np.zeros_like(b) for b in params.biases],
        )


def effective_learning_rate(config: TrainConfig, samples_seen: int) -> float:
    return config.learning_rate / (1.0 + config.rate_annealing * samples_seen)


def momentum_at(config: TrainConfig, samples_seen: int) -> float:
    """Linear ramp from ``momentum_start`` to ``momentum_stable`` over ``momentum_ramp`` samples."""
    if config.momentum_ramp <= 0:
        return config.momentum_stable
    frac = min(1.0, samples_seen / config.momentum_ramp)
    return config.momentum_start + (config.momentum_stable - config.momentum_start) * frac


PenaltyFn = Callable[[NetworkParams, ActivationTrace], "dict[int, np.ndarray] | None"]


def gradient_descent_epoch(
    params: NetworkParams,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    state: EpochState,
    penalty: PenaltyFn | None = None,
) -> NetworkParams:
    """One pass over (x, y) in batches; returns updated parameters.

    Each update is W <- W + v with v <- mu * v - rate * [(1/m) dW + lambda W],
    where rate = alpha / (1 + annealing * samples_seen), scaled by
    ``rate_decay ** k`` for the k-th weight layer counted back from the output.
    """
    params = params.copy()
    x = _as_batch(x, params.layers[0].size)
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    L = len(params.weights)
    if config.batch_size is None or config.batch_size >= n:
        batches = [np.arange(n)]
    else:
        order = state.rng.permutation(n)
        batches = [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
    dropout = config.hidden_dropout > 0 or config.input_dropout > 0

    for idx in batches:
        xb, yb = x[idx], y[idx]
        m = xb.shape[0]
        masks = (draw_dropout_masks(params, m, state.rng, config.input_dropout, config.hidden_dropout)
                 if dropout else None)
        trace = forward(params, xb, masks)
        extra = penalty(params, trace) if penalty is not None else None
        gw, gb = backprop_trace(params, trace, yb, config.loss, extra)
        rate = effective_learning_rate(config, state.samples_seen)
        mu = momentum_at(config, state.samples_seen)
        for l in range(config.freeze_layers, L):
            layer_rate = rate * config.rate_decay ** (L - 1 - l)
            grad_w = gw[l] / m + config.weight_decay * params.weights[l]
            grad_b = gb[l] / m
            state.velocity_w[l] = mu * state.velocity_w[l] - layer_rate * grad_w
            state.velocity_b[l] = mu * state.velocity_b[l] - layer_rate * grad_b
            params.weights[l] += state.velocity_w[l]
            params.biases[l] += state.velocity_b[l]
        state.samples_seen += m
        if not all(np.isfinite(w).all() for w in params.weights):
            raise NonFiniteLoss(f"non-finite weights after {state.samples_seen} samples", state)
    state.epoch += 1
    return params


def predict(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Case probability per row: the single output, or the second of two."""
    out = forward(params, x).output
    return out[:, -1].copy()


HISTORY_COLUMNS = ("epoch", "train_logloss", "valid_logloss", "train_auc", "valid_auc", "valid_misclass")


def _safe_auc(p, y) -> float:
    try:
        return metrics.auc_rank(p, y)
    except metrics.SingleClass:
        return math.nan


def train(
    params: NetworkParams,
    train_set: tuple[np.ndarray, np.ndarray],
    valid_set: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
) -> tuple[NetworkParams, list[dict]]:
    """Train with early stopping on validation misclassification.

    Stops once validation misclassification has not improved for
    ``early_stop_patience`` epochs (``None`` means never) and returns the
    parameters of the best validation epoch; ties on misclassification are
    broken by validation logloss.
    """
    x_tr, y_tr = train_set
    x_va, y_va = valid_set
    n_out = params.layers[-1].size
    t_tr = targets_for(y_tr, n_out)
    state = EpochState.fresh(params, config.seed)
    history: list[dict] = []
    best = params.copy()
    best_key = (math.inf, math.inf)
    best_misclass = math.inf
    since_improved = 0
    for epoch in range(1, config.epochs_max + 1):
        params = gradient_descent_epoch(params, x_tr, t_tr, config, state)
        p_tr = predict(params, x_tr)
        p_va = predict(params, x_va)
        row = {
            "epoch": epoch,
            "train_logloss": metrics.logloss(p_tr, y_tr),
            "valid_logloss": metrics.logloss(p_va, y_va),
            "train_auc": _safe_auc(p_tr, y_tr),
            "valid_auc": _safe_auc(p_va, y_va),
            "valid_misclass": metrics.misclassification(p_va, y_va),
        }
        history.append(row)
        key = (row["valid_misclass"], row["valid_logloss"])
        if key < best_key:
            best_key, best = key, params.copy()
        if row["valid_misclass"] < best_misclass:
            best_misclass = row["valid_misclass"]
            since_improved = 0
        else:
            since_improved += 1
        if config.early_stop_patience is not None and since_improved >= config.early_stop_patience:
            break
    return best, history


def write_history_csv(history: list[dict], path: Path | str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[c]) for c in HISTORY_COLUMNS) + "\n")


# -- model container --------------------------------------------------------

MODEL_MAGIC = b"GSNN"
MODEL_VERSION = 1


def save_model(
    path: Path | str,
    params: NetworkParams,
    config: TrainConfig | None = None,
    seed: int | None = None,
    extra: dict | None = None,
) -> None:
    """Binary container (header JSON + little-endian float64 arrays) and a ``.json`` sidecar."""
    path = Path(path)
    header = {
        "version": MODEL_VERSION,
        "layers": [asdict(s) for s in params.layers],
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(blob)) + blob)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = dict(header, shapes=[list(w.shape) for w in params.weights])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path: Path | str) -> tuple[NetworkParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model container")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 10
    header = json.loads(raw[offset : offset + hlen])
    offset += hlen
    layers = tuple(LayerSpec(**d) for d in header["layers"])
    weights, biases = [], []
    for a, b in zip(layers[:-1], layers[1:]):
        nw, nb = b.size * a.size, b.size
        weights.append(np.frombuffer(raw, "<f8", nw, offset).reshape(b.size, a.size).astype(np.float64))
        offset += 8 * nw
        biases.append(np.frombuffer(raw, "<f8", nb, offset).astype(np.float64))
        offset += 8 * nb
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return NetworkParams(layers, weights, biases), header


def config_from_dict(d: dict | None, **overrides) -> TrainConfig:
    base = TrainConfig(**(d or {}))
    return replace(base, **overrides) if overrides else base
