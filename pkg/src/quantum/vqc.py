"""
Variational quantum circuit: angle embedding, strongly entangling layers and
all-qubit Z readout, with parameter-shift gradients.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError, TapeError
from src.quantum.qsim import (
    MAX_QUBITS,
    StateVector,
    apply_1q,
    apply_cnot,
    expect_z,
    init_zero,
    make_rotation,
)

OUTPUT_ACTIVATIONS = ("none", "relu")
SHIFT = math.pi / 2


def default_ranges(n_qubits: int, n_layers: int) -> Tuple[int, ...]:
    """CNOT offsets (l mod (n_qubits - 1)) + 1 per layer."""
    if n_qubits < 2:
        return tuple()
    return tuple((layer % (n_qubits - 1)) + 1 for layer in range(n_layers))


@dataclass(frozen=True)
class VqcConfig:
    n_qubits: int = 5
    n_layers: int = 3
    ranges: Optional[Tuple[int, ...]] = None
    hadamard_prefix: bool = True
    input_scale: float = math.pi / 2
    output_activation: str = "none"

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ConfigError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_qubits < 2:
            raise ConfigError("entangling layers need n_qubits >= 2, got 1")
        ranges = self.ranges
        if ranges is None:
            ranges = default_ranges(self.n_qubits, self.n_layers)
        ranges = tuple(int(r) for r in ranges)
        if len(ranges) != self.n_layers:
            raise ConfigError(f"expected {self.n_layers} ranges, got {len(ranges)}")
        for layer, r in enumerate(ranges):
            if not 1 <= r <= self.n_qubits - 1:
                raise ConfigError(
                    f"range of layer {layer} must be in [1, {self.n_qubits - 1}], got {r}")
        object.__setattr__(self, "ranges", ranges)
        if not math.isfinite(self.input_scale):
            raise ConfigError(f"input_scale must be finite, got {self.input_scale}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(
                f"output_activation must be one of {OUTPUT_ACTIVATIONS}, got {self.output_activation!r}")

    @property
    def weight_shape(self) -> Tuple[int, int, int]:
        return (self.n_layers, self.n_qubits, 3)


@dataclass
class VqcWeights:
    angles: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.ndim != 3 or self.angles.shape[-1] != 3:
            raise ShapeError(f"VQC angles must have shape (n_layers, n_qubits, 3), got {self.angles.shape}")

    @property
    def size(self) -> int:
        return int(self.angles.size)

    def check(self, config: VqcConfig) -> None:
        if self.angles.shape != config.weight_shape:
            raise ShapeError(
                f"VQC angles have shape {self.angles.shape}, config expects {config.weight_shape}")

    @classmethod
    def zeros(cls, config: VqcConfig) -> "VqcWeights":
        return cls(np.zeros(config.weight_shape))

    @classmethod
    def random(cls, config: VqcConfig, rng: np.random.Generator) -> "VqcWeights":
        return cls(rng.uniform(0.0, 2 * math.pi, size=config.weight_shape))


@dataclass
class VqcTape:
    """states[0] 为编码后的态，states[l + 1] 为第 l 个纠缠层之后的态"""
    features: np.ndarray
    angles: np.ndarray
    states: List[StateVector] = field(default_factory=list)
    batched: bool = False


def _as_batch(features: np.ndarray, n_qubits: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != n_qubits:
        raise ShapeError(f"features must have length {n_qubits}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("features must be finite")
    return (x if batched else x[None, :]), batched


def _embed_batch(config: VqcConfig, x: np.ndarray) -> StateVector:
    state = init_zero(config.n_qubits, batch_size=x.shape[0])
    if config.hadamard_prefix:
        hadamard = make_rotation("H")
        for q in range(config.n_qubits):
            state = apply_1q(state, q, hadamard)
    for q in range(config.n_qubits):
        state = apply_1q(state, q, make_rotation("RY", config.input_scale * x[:, q]))
    return state


def embed(config: VqcConfig, features: np.ndarray) -> StateVector:
    """RY(input_scale * x_q) on each qubit, after an optional Hadamard wall."""
    x, batched = _as_batch(features, config.n_qubits)
    state = _embed_batch(config, x)
    if batched:
        return state
    return StateVector(config.n_qubits, state.amplitudes[0])


def _apply_layer(config: VqcConfig, layer: int, layer_angles: np.ndarray,
                 state: StateVector) -> StateVector:
    for q in range(config.n_qubits):
        phi, theta, omega = layer_angles[q]
        state = apply_1q(state, q, make_rotation("Rot", phi, theta, omega))
    r = config.ranges[layer]
    for q in range(config.n_qubits):
        state = apply_cnot(state, q, (q + r) % config.n_qubits)
    return state


def entangling_layers(config: VqcConfig, weights: VqcWeights, state: StateVector) -> StateVector:
    weights.check(config)
    if state.n_qubits != config.n_qubits:
        raise ShapeError(f"state has {state.n_qubits} qubits, config expects {config.n_qubits}")
    for layer in range(config.n_layers):
        state = _apply_layer(config, layer, weights.angles[layer], state)
    return state


def measure_all_z(state: StateVector) -> np.ndarray:
    """每个量子比特的 Z 期望值，形状 (n_qubits,) 或 (batch, n_qubits)"""
    values = [expect_z(state, q) for q in range(state.n_qubits)]
    return np.stack(values, axis=-1) if state.batched else np.array(values)


def _activate(config: VqcConfig, z: np.ndarray) -> np.ndarray:
    if config.output_activation == "relu":
        return np.maximum(z, 0.0)
    return z


def vqc_forward(config: VqcConfig, weights: VqcWeights, features: np.ndarray,
                return_tape: bool = False):
    """
    Q = M o L o E. Returns the readout (batch-shaped like features) and, when
    return_tape is set, the VqcTape needed by vqc_gradients.
    """
    weights.check(config)
    x, batched = _as_batch(features, config.n_qubits)
    state = _embed_batch(config, x)
    states = [state]
    for layer in range(config.n_layers):
        state = _apply_layer(config, layer, weights.angles[layer], state)
        states.append(state)
    out = _activate(config, measure_all_z(state))
    if not batched:
        out = out[0]
    if not return_tape:
        return out
    tape = VqcTape(features=x.copy(), angles=weights.angles.copy(), states=states, batched=batched)
    return out, tape


def _readout_from(config: VqcConfig, angles: np.ndarray, start_layer: int,
                  state: StateVector) -> np.ndarray:
    for layer in range(start_layer, config.n_layers):
        state = _apply_layer(config, layer, angles[layer], state)
    return measure_all_z(state)


def vqc_gradients(config: VqcConfig, weights: VqcWeights, features: np.ndarray,
                  upstream: np.ndarray, tape: Optional[VqcTape] = None
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parameter-shift gradients of sum(upstream * output).

    Every rotation angle and every embedding angle is shifted by +-pi/2; the
    embedding derivative is chain-ruled through input_scale. Weight gradients
    are summed over the batch, feature gradients are per sample.
    """
    weights.check(config)
    x, batched = _as_batch(features, config.n_qubits)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape[-1] != config.n_qubits or up.ndim != (2 if batched else 1):
        raise ShapeError(f"upstream must match readout shape, got {up.shape}")
    up = up if batched else up[None, :]
    if up.shape[0] != x.shape[0]:
        raise ShapeError(f"upstream batch {up.shape[0]} != feature batch {x.shape[0]}")

    if tape is None:
        _, tape = vqc_forward(config, weights, x, return_tape=True)
    elif (tape.features.shape != x.shape or not np.array_equal(tape.features, x)
          or not np.array_equal(tape.angles, weights.angles)
          or len(tape.states) != config.n_layers + 1):
        raise TapeError("VQC tape does not match these weights/features")

    angles = weights.angles
    raw = measure_all_z(tape.states[-1])
    if config.output_activation == "relu":
        # ReLU 截断处梯度为零
        up = up * (raw > 0.0)

    # 只从被平移那一层重新演化，前面的态直接取 tape
    grad_weights = np.zeros_like(angles)
    for layer in range(config.n_layers):
        start = tape.states[layer]
        for q in range(config.n_qubits):
            for k in range(3):
                shifted = angles.copy()
                shifted[layer, q, k] += SHIFT
                plus = _readout_from(config, shifted, layer, start)
                shifted[layer, q, k] -= 2 * SHIFT
                minus = _readout_from(config, shifted, layer, start)
                grad_weights[layer, q, k] = 0.5 * np.sum(up * (plus - minus))

    grad_features = np.zeros_like(x)
    # 编码角为 input_scale * x，对 x 平移 SHIFT / input_scale 等价于对角度平移 SHIFT
    if config.input_scale != 0.0:
        step = SHIFT / config.input_scale
        for q in range(config.n_qubits):
            shifted = x.copy()
            shifted[:, q] += step
            plus = _readout_from(config, angles, 0, _embed_batch(config, shifted))
            shifted[:, q] -= 2 * step
            minus = _readout_from(config, angles, 0, _embed_batch(config, shifted))
            grad_features[:, q] = 0.5 * config.input_scale * np.sum(up * (plus - minus), axis=-1)

    if not batched:
        grad_features = grad_features[0]
    return grad_features, grad_weights


def vqc_param_count(n_qubits: int, n_layers: int) -> int:
    """W_VQC = 3 * n_qubits * n_layers."""
    if n_qubits < 1 or n_layers < 1:
        raise ConfigError(f"n_qubits and n_layers must be positive, got {n_qubits}, {n_layers}")
    return 3 * n_qubits * n_layers
