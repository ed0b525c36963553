"""
A small fully-connected network with an explicit activation tape.

The network maps a ``C``-wide cost-volume cell to a scalar matching score.
``forward`` records what ``backward`` needs in a :class:`Tape`; tapes are tied
to the parameter version they were recorded with, so reusing one after an
update is refused instead of silently producing wrong gradients.
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..exceptions import ContractViolation, DataFormatError, DomainError
from ..utils.fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

LEAKY_RELU = "leaky_relu"
IDENTITY = "identity"
ACTIVATIONS = (IDENTITY, LEAKY_RELU)

CHECKPOINT_MAGIC = b"DRMLP001"
_CHECKPOINT_HEADER = struct.Struct("<8sIQd")
_LAYER_HEADER = struct.Struct("<III")

_net_ids = itertools.count()


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = LEAKY_RELU

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class Tape:
    net_id: int
    version: int
    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]
    batched: bool


@dataclass(frozen=True, eq=False)
class MlpGradients:
    """Parameter gradients in :meth:`Mlp.parameters` order, plus the input gradient."""

    params: list[np.ndarray]
    inputs: np.ndarray


class Mlp:
    def __init__(self, layers: Sequence[DenseLayer], slope: float = 0.01, seed: int = 0):
        if not layers:
            raise ContractViolation("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ContractViolation(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if layers[-1].out_dim != 1 or layers[-1].activation != IDENTITY:
            raise ContractViolation("the last layer must be a linear map to one score")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation '{layer.activation}'")
        self.layers = [
            DenseLayer(
                np.array(l.weight, dtype=np.float64), np.array(l.bias, dtype=np.float64), l.activation
            )
            for l in layers
        ]
        self.slope = float(slope)
        self.seed = int(seed)
        self._id = next(_net_ids)
        self._version = 0

    @classmethod
    def create(
        cls,
        in_dim: int,
        hidden: int = 64,
        n_hidden: int = 2,
        slope: float = 0.01,
        seed: int = 0,
    ) -> "Mlp":
        """Seeded network with ``U(-sqrt(1/fan_in), sqrt(1/fan_in))`` initialisation."""
        if in_dim < 1 or hidden < 1 or n_hidden < 0:
            raise DomainError(f"bad network shape in={in_dim} hidden={hidden}x{n_hidden}")
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * n_hidden + [1]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            bound = np.sqrt(1.0 / fan_in)
            activation = IDENTITY if i == len(dims) - 2 else LEAKY_RELU
            layers.append(
                DenseLayer(
                    rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                    rng.uniform(-bound, bound, size=fan_out),
                    activation,
                )
            )
        return cls(layers, slope=slope, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def version(self) -> int:
        return self._version

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ContractViolation(f"expected {2 * len(self.layers)} arrays, got {len(params)}")
        for layer, weight, bias in zip(self.layers, params[::2], params[1::2]):
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise ContractViolation("parameter shapes do not match the network")
            layer.weight = np.array(weight, dtype=np.float64)
            layer.bias = np.array(bias, dtype=np.float64)
        self._version += 1

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        params = []
        offset = 0
        for p in self.parameters():
            params.append(np.asarray(flat[offset : offset + p.size]).reshape(p.shape))
            offset += p.size
        if offset != len(flat):
            raise ContractViolation(f"expected {offset} parameters, got {len(flat)}")
        self.set_parameters(params)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp(self.layers, slope=self.slope, seed=self.seed)

    def _activate(self, z: np.ndarray, activation: str) -> np.ndarray:
        if activation == LEAKY_RELU:
            return np.where(z > 0, z, self.slope * z)
        return z

    def forward(self, x: np.ndarray):
        """Score one ``C`` vector (returns a float) or an ``M x C`` batch."""
        x = np.asarray(x)
        batched = x.ndim == 2
        a = x if batched else x[None, :]
        if a.shape[1] != self.in_dim:
            raise ContractViolation(f"input width {a.shape[1]} != network width {self.in_dim}")
        inputs = []
        pre = []
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            pre.append(z)
            a = self._activate(z, layer.activation)
        tape = Tape(self._id, self._version, tuple(inputs), tuple(pre), batched)
        scores = a[:, 0]
        return (scores if batched else float(scores[0])), tape

    def backward(self, tape: Tape, upstream) -> MlpGradients:
        """Gradients of ``sum(upstream * scores)``, summed over the batch."""
        if tape.net_id != self._id or tape.version != self._version:
            raise ContractViolation("tape was recorded with different parameters")
        g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        if g.shape[0] != tape.inputs[0].shape[0]:
            raise ContractViolation("upstream gradient does not match the recorded batch")
        grads: list[np.ndarray] = []
        steps = zip(reversed(self.layers), reversed(tape.inputs), reversed(tape.pre_activations))
        for layer, a_in, z in steps:
            if layer.activation == LEAKY_RELU:
                g = g * np.where(z > 0, 1.0, self.slope)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ a_in)
            g = g @ layer.weight
        grads.reverse()
        inputs = g if tape.batched else g[0]
        return MlpGradients(params=grads, inputs=inputs)


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    h: float = 1e-4,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps a flat parameter vector to ``(value, gradient)``.
    """
    params = np.array(params, dtype=np.float64)
    _, analytic = fn(params.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(params.size):
        plus = params.copy()
        plus[i] += h
        minus = params.copy()
        minus[i] -= h
        numeric = (fn(plus)[0] - fn(minus)[0]) / (2.0 * h)
        a = analytic[i]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_parameters(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamWState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adamw_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState
) -> tuple[list[np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update; returns new parameters and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("parameters, gradients and optimiser state disagree in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params.append(p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamWState(
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        step=step,
        m=new_m,
        v=new_v,
    )


def save_checkpoint(path: str | Path, net: Mlp) -> None:
    """Header with layer shapes, activations and seed, then float32 weights and biases."""
    chunks = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, len(net.layers), net.seed, net.slope)]
    for layer in net.layers:
        chunks.append(
            _LAYER_HEADER.pack(layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation))
        )
    for layer in net.layers:
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    logger.info(f"Saved {net.parameter_count}-parameter checkpoint to {path}")


def load_checkpoint(path: str | Path) -> Mlp:
    raw = Path(path).read_bytes()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise DataFormatError(path, "truncated checkpoint header", len(raw))
    magic, n_layers, seed, slope = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(path, f"bad magic {magic!r}", 0)
    offset = _CHECKPOINT_HEADER.size
    shapes = []
    for _ in range(n_layers):
        if offset + _LAYER_HEADER.size > len(raw):
            raise DataFormatError(path, "truncated layer table", offset)
        in_dim, out_dim, act = _LAYER_HEADER.unpack_from(raw, offset)
        if act >= len(ACTIVATIONS):
            raise DataFormatError(path, f"unknown activation id {act}", offset)
        shapes.append((in_dim, out_dim, ACTIVATIONS[act]))
        offset += _LAYER_HEADER.size
    layers = []
    for in_dim, out_dim, activation in shapes:
        n_weights = in_dim * out_dim
        end = offset + 4 * (n_weights + out_dim)
        if end > len(raw):
            raise DataFormatError(path, "truncated weight payload", offset)
        values = np.frombuffer(raw, dtype="<f4", count=n_weights + out_dim, offset=offset)
        layers.append(
            DenseLayer(
                values[:n_weights].astype(np.float64).reshape(out_dim, in_dim),
                values[n_weights:].astype(np.float64),
                activation,
            )
        )
        offset = end
    if offset != len(raw):
        raise DataFormatError(path, "trailing bytes after weights", offset)
    try:
        return Mlp(layers, slope=slope, seed=seed)
    except ContractViolation as e:
        raise DataFormatError(path, str(e)) from e
