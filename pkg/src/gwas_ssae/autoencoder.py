"""Sparse autoencoders with a Bernoulli KL sparsity penalty, and greedy stacking.

Each autoencoder is a three-layer network: input, sigmoid hidden layer,
linear reconstruction.  Training minimises the squared reconstruction cost
plus weight decay plus ``beta * sum_j KL(p || p_hat_j)``, where ``p_hat_j``
is hidden unit ``j``'s mean activation over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neuralnet as nn
from .neuralnet import LINEAR, SIGMOID, LayerSpec, NetworkParams, TrainConfig

logger = logging.getLogger(__name__)

P_HAT_CLAMP = 1e-6


class EmptyBatch(ValueError):
    pass


class DepthOutOfRange(IndexError):
    pass


@dataclass
class SparseAeConfig:
    hidden_size: int
    sparsity_target: float = 0.05
    sparsity_weight: float = 3.0
    # Full-batch steps, so p_hat in every update is the exact training-set mean.
    base: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.5, rate_annealing=0.0, momentum_start=0.9, momentum_stable=0.9,
        hidden_dropout=0.0, early_stop_patience=None, loss=nn.SQUARED, epochs_max=2000,
        weight_decay=1e-4, batch_size=None))

    def __post_init__(self):
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity target must lie in (0, 1)")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity weight must be >= 0")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")


@dataclass
class EncoderLayer:
    weight: np.ndarray  # (hidden, input)
    bias: np.ndarray
    mean_activation: np.ndarray  # achieved p_hat per hidden unit

    @property
    def hidden_size(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class TrainedAutoencoder:
    params: NetworkParams  # full encoder + decoder
    mean_activation: np.ndarray
    cost_history: list[float]

    @property
    def encoder(self) -> EncoderLayer:
        return EncoderLayer(self.params.weights[0].copy(), self.params.biases[0].copy(),
                            self.mean_activation.copy())


@dataclass
class AutoencoderStack:
    input_dim: int
    layers: list[EncoderLayer]
    sparsity_target: float = 0.05
    sparsity_weight: float = 3.0

    def __post_init__(self):
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.input_dim != width:
                raise nn.ShapeMismatch(f"stack layer {i} takes {layer.input_dim} inputs, previous width is {width}")
            width = layer.hidden_size

    @property
    def sizes(self) -> list[int]:
        return [layer.hidden_size for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


def autoencoder_layers(input_dim: int, hidden_size: int) -> list[LayerSpec]:
    return [LayerSpec(input_dim, LINEAR), LayerSpec(hidden_size, SIGMOID), LayerSpec(input_dim, LINEAR)]


def mean_hidden_activation(encoder: EncoderLayer | NetworkParams, x: np.ndarray) -> np.ndarray:
    """p_hat_j: average sigmoid activation of each hidden unit over the rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyBatch("mean activation of an empty batch")
    if isinstance(encoder, NetworkParams):
        w, b = encoder.weights[0], encoder.biases[0]
    else:
        w, b = encoder.weight, encoder.bias
    return nn.activate(x @ w.T + b, SIGMOID).mean(axis=0)


def _clamp(p_hat: np.ndarray) -> np.ndarray:
    return np.clip(p_hat, P_HAT_CLAMP, 1.0 - P_HAT_CLAMP)


def kl_penalty(p: float, p_hat) -> float:
    """sum_j p log(p / p_hat_j) + (1 - p) log((1 - p) / (1 - p_hat_j))."""
    q = _clamp(np.asarray(p_hat, dtype=np.float64))
    return float(np.sum(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))))


def sparsity_delta(p: float, p_hat: np.ndarray, beta: float) -> np.ndarray:
    """beta * (-p / p_hat + (1 - p) / (1 - p_hat)), the hidden-layer error term."""
    q = _clamp(p_hat)
    return beta * (-p / q + (1 - p) / (1 - q))


def sparse_cost(params: NetworkParams, x: np.ndarray, weight_decay: float, beta: float, p: float) -> float:
    """Reconstruction cost (target = input) with weight decay plus the KL sparsity penalty."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    trace = nn.forward(params, x)
    recon = nn.data_cost(trace.output, x, nn.SQUARED) + 0.5 * weight_decay * nn.decay_term(params)
    return recon + beta * kl_penalty(p, trace.activations[1].mean(axis=0))


def _penalty(beta: float, p: float) -> nn.PenaltyFn:
    """Hidden-layer term for backprop; p_hat comes from the batch's first forward pass."""

    def term(params: NetworkParams, trace: nn.ActivationTrace) -> dict[int, np.ndarray]:
        hidden = trace.activations[1]
        if hidden.shape[0] == 0:
            raise EmptyBatch("sparse backprop on an empty batch")
        return {1: sparsity_delta(p, hidden.mean(axis=0), beta)}

    return term


def sparse_backprop(params: NetworkParams, x: np.ndarray, beta: float, p: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Summed reconstruction gradients with the sparsity term added at the hidden layer."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyBatch("sparse backprop on an empty batch")
    trace = nn.forward(params, x)
    return nn.backprop_trace(params, trace, x, nn.SQUARED, _penalty(beta, p)(params, trace))


def sparse_cost_gradient(params: NetworkParams, x: np.ndarray, weight_decay: float, beta: float, p: float):
    """Gradient of :func:`sparse_cost`."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = x.shape[0]
    gw, gb = sparse_backprop(params, x, beta, p)
    return [g / m + weight_decay * w for g, w in zip(gw, params.weights)], [g / m for g in gb]


def _ae_train_config(cfg: SparseAeConfig) -> TrainConfig:
    # Dropout would distort p_hat; the reconstruction uses squared error.
    return replace(cfg.base, hidden_dropout=0.0, input_dropout=0.0, loss=nn.SQUARED, freeze_layers=0)


def train_autoencoder(x: np.ndarray, cfg: SparseAeConfig, params: NetworkParams | None = None) -> TrainedAutoencoder:
    """Gradient descent on the sparse cost for ``cfg.base.epochs_max`` epochs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyBatch("cannot train on an empty matrix")
    tc = _ae_train_config(cfg)
    if params is None:
        params = nn.init_network(autoencoder_layers(x.shape[1], cfg.hidden_size), tc.seed)
    elif params.layers[0].size != x.shape[1]:
        raise nn.ShapeMismatch("autoencoder input width differs from data")
    beta, p, lam = cfg.sparsity_weight, cfg.sparsity_target, tc.weight_decay
    penalty = _penalty(beta, p)
    state = nn.EpochState.fresh(params, tc.seed)
    history = [sparse_cost(params, x, lam, beta, p)]
    for _ in range(tc.epochs_max):
        params = nn.gradient_descent_epoch(params, x, x, tc, state, penalty)
        history.append(sparse_cost(params, x, lam, beta, p))
        if not np.isfinite(history[-1]):
            raise nn.NonFiniteLoss("sparse autoencoder cost diverged", state)
    return TrainedAutoencoder(params, mean_hidden_activation(params, x), history)


def train_plain_autoencoder(x: np.ndarray, cfg: SparseAeConfig) -> NetworkParams:
    """Same schedule as :func:`train_autoencoder` without any sparsity term."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tc = _ae_train_config(cfg)
    params = nn.init_network(autoencoder_layers(x.shape[1], cfg.hidden_size), tc.seed)
    state = nn.EpochState.fresh(params, tc.seed)
    for _ in range(tc.epochs_max):
        params = nn.gradient_descent_epoch(params, x, x, tc, state)
    return params


def stack_train(
    x: np.ndarray,
    sizes: Sequence[int],
    cfgs: SparseAeConfig | Sequence[SparseAeConfig],
    standardize: bool = False,
) -> AutoencoderStack:
    """Greedy layer-wise training: layer k learns to reconstruct layer k-1's code.

    With ``standardize`` each layer is trained on its input z-scored by
    column, and the scaling is folded into the stored encoder so that
    ``encode`` still applies plain sigmoid(W a + b) to raw inputs.  Without
    it, deep layers see codes of shrinking spread and learn little.
    """
    sizes = list(sizes)
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError("stack sizes must be a non-empty list of positive integers")
    if isinstance(cfgs, SparseAeConfig):
        cfgs = [replace(cfgs, hidden_size=s) for s in sizes]
    cfgs = list(cfgs)
    if len(cfgs) != len(sizes):
        raise ValueError("one config per stack layer")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    layers: list[EncoderLayer] = []
    code = x
    for k, (size, cfg) in enumerate(zip(sizes, cfgs)):
        cfg = replace(cfg, hidden_size=size)
        if standardize:
            mu = code.mean(axis=0)
            sd = code.std(axis=0)
            sd[sd == 0] = 1.0
            ae = train_autoencoder((code - mu) / sd, cfg)
            w = ae.params.weights[0] / sd
            b = ae.params.biases[0] - w @ mu
            ae.params.weights[0], ae.params.biases[0] = w, b
        else:
            ae = train_autoencoder(code, cfg)
        layers.append(ae.encoder)
        logger.debug("stack layer %d: %d -> %d, mean p_hat %.4f", k + 1, code.shape[1], size,
                     float(ae.mean_activation.mean()))
        code = nn.activate(code @ ae.params.weights[0].T + ae.params.biases[0], SIGMOID)
    first = cfgs[0]
    return AutoencoderStack(x.shape[1], layers, first.sparsity_target, first.sparsity_weight)


def encode(stack: AutoencoderStack, x: np.ndarray, depth: int) -> np.ndarray:
    """Hidden code after the first ``depth`` encoders."""
    if not 1 <= depth <= len(stack):
        raise DepthOutOfRange(f"depth {depth} outside 1..{len(stack)}")
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for layer in stack.layers[:depth]:
        a = nn.activate(a @ layer.weight.T + layer.bias, SIGMOID)
    return a


def init_classifier_from_stack(
    stack: AutoencoderStack,
    depth: int,
    head_layers: Sequence[LayerSpec | int] = (10, 10, 10, 10, 2),
    seed: int = 0,
) -> NetworkParams:
    """Copied encoders (sigmoid) followed by a freshly initialised head.

    ``head_layers`` lists the layers after the latent code.  Integer
    entries become rectifier layers, except the last, which is the sigmoid
    output.
    """
    if not 1 <= depth <= len(stack):
        raise DepthOutOfRange(f"depth {depth} outside 1..{len(stack)}")
    latent = stack.layers[depth - 1].hidden_size
    head = list(head_layers)
    specs = []
    for i, h in enumerate(head):
        if isinstance(h, LayerSpec):
            specs.append(h)
        else:
            specs.append(LayerSpec(int(h), SIGMOID if i == len(head) - 1 else nn.RECTIFIER))
    head_params = nn.init_network([LayerSpec(latent, SIGMOID)] + specs, seed)
    enc_specs = [LayerSpec(stack.input_dim, LINEAR)] + [LayerSpec(l.hidden_size, SIGMOID) for l in stack.layers[:depth]]
    weights = [l.weight.copy() for l in stack.layers[:depth]] + head_params.weights
    biases = [l.bias.copy() for l in stack.layers[:depth]] + head_params.biases
    return NetworkParams(tuple(enc_specs) + head_params.layers[1:], weights, biases)


def save_stack(path: Path | str, stack: AutoencoderStack) -> None:
    """Stack as a model container (encoders chained) with a manifest in the header."""
    specs = [LayerSpec(stack.input_dim, LINEAR)] + [LayerSpec(l.hidden_size, SIGMOID) for l in stack.layers]
    params = NetworkParams(specs, [l.weight for l in stack.layers], [l.bias for l in stack.layers])
    manifest = {
        "kind": "autoencoder_stack",
        "sizes": stack.sizes,
        "sparsity_target": stack.sparsity_target,
        "sparsity_weight": stack.sparsity_weight,
        "mean_activation": [l.mean_activation.tolist() for l in stack.layers],
        "mean_p_hat": [float(l.mean_activation.mean()) for l in stack.layers],
    }
    nn.save_model(path, params, extra=manifest)


def load_stack(path: Path | str) -> AutoencoderStack:
    params, header = nn.load_model(path)
    manifest = header["extra"]
    if manifest.get("kind") != "autoencoder_stack":
        raise ValueError(f"{path}: not an autoencoder stack")
    layers = [EncoderLayer(w, b, np.asarray(ma)) for w, b, ma in
              zip(params.weights, params.biases, manifest["mean_activation"])]
    return AutoencoderStack(params.layers[0].size, layers, manifest["sparsity_target"], manifest["sparsity_weight"])

