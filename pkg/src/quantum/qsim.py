"""
Exact statevector simulation of small qubit registers.

Qubit 0 is the most significant bit of the amplitude index, so a register is
equivalently a tensor of shape (2,) * n_qubits whose axis q belongs to qubit q.
Every operation accepts an optional leading batch axis: amplitudes of shape
(2**n,) or (batch, 2**n). States are read-only; operations return new states.
"""
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from src.errors import ConfigError

MAX_QUBITS = 12

ArrayLike = Union[float, np.ndarray]

GATE_KINDS = ("RX", "RY", "RZ", "H", "Rot")
_N_ANGLES = {"RX": 1, "RY": 1, "RZ": 1, "H": 0, "Rot": 3}


def _check_n_qubits(n_qubits: int) -> None:
    if not isinstance(n_qubits, (int, np.integer)) or not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigError(
            f"n_qubits must be an integer in [1, {MAX_QUBITS}], got {n_qubits!r}")


@dataclass(frozen=True)
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        _check_n_qubits(self.n_qubits)
        amps = np.array(self.amplitudes, dtype=np.complex128)
        if amps.ndim not in (1, 2) or amps.shape[-1] != 2 ** self.n_qubits:
            raise ConfigError(
                f"amplitudes must have shape (2**{self.n_qubits},) or "
                f"(batch, 2**{self.n_qubits}), got {amps.shape}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def batched(self) -> bool:
        return self.amplitudes.ndim == 2

    @property
    def batch_size(self) -> int:
        return self.amplitudes.shape[0] if self.batched else 1

    def tensor(self) -> np.ndarray:
        """振幅张量的副本，形状 (batch?,) + (2,) * n_qubits"""
        lead = self.amplitudes.shape[:-1]
        return self.amplitudes.reshape(lead + (2,) * self.n_qubits).copy()

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> ArrayLike:
        return np.sqrt(self.probabilities().sum(axis=-1))

    @classmethod
    def from_tensor(cls, n_qubits: int, tensor: np.ndarray, batched: bool) -> "StateVector":
        lead = tensor.shape[:1] if batched else ()
        return cls(n_qubits, tensor.reshape(lead + (2 ** n_qubits,)))


@dataclass(frozen=True)
class Gate1Q:
    """A single-qubit unitary; matrix is (2, 2) or a batch (batch, 2, 2)."""
    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=np.complex128)
        if mat.shape[-2:] != (2, 2) or mat.ndim not in (2, 3):
            raise ConfigError(f"gate matrix must be 2x2 (optionally batched), got {mat.shape}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    def is_unitary(self, atol: float = 1e-12) -> bool:
        mat = self.matrix
        prod = mat @ np.conj(np.swapaxes(mat, -1, -2))
        return bool(np.allclose(prod, np.broadcast_to(np.eye(2), prod.shape), rtol=0.0, atol=atol))


def init_zero(n_qubits: int, batch_size: int = None) -> StateVector:
    """|0...0>，可按 batch 复制"""
    _check_n_qubits(n_qubits)
    dim = 2 ** n_qubits
    if batch_size is None:
        amps = np.zeros(dim, dtype=np.complex128)
        amps[0] = 1.0
    else:
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        amps = np.zeros((batch_size, dim), dtype=np.complex128)
        amps[:, 0] = 1.0
    return StateVector(n_qubits, amps)


def _rx(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.stack([np.stack([c + 0j, -1j * s], -1),
                     np.stack([-1j * s, c + 0j], -1)], -2)


def _ry(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.stack([np.stack([c, -s], -1),
                     np.stack([s, c], -1)], -2).astype(np.complex128)


def _rz(theta: np.ndarray) -> np.ndarray:
    zero = np.zeros_like(theta, dtype=np.complex128)
    return np.stack([np.stack([np.exp(-0.5j * theta), zero], -1),
                     np.stack([zero, np.exp(0.5j * theta)], -1)], -2)


def make_rotation(kind: str, *angles: ArrayLike) -> Gate1Q:
    """
    Build a standard single-qubit gate.

    Rot(phi, theta, omega) is RZ(omega) @ RY(theta) @ RZ(phi), i.e. phi acts
    first in circuit order. Angles may be arrays, giving a batched gate.
    """
    if kind not in _N_ANGLES:
        raise ConfigError(f"unknown gate kind {kind!r}; expected one of {GATE_KINDS}")
    if len(angles) != _N_ANGLES[kind]:
        raise ConfigError(f"{kind} takes {_N_ANGLES[kind]} angle(s), got {len(angles)}")
    arrays = [np.asarray(a, dtype=np.float64) for a in angles]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ConfigError(f"{kind} angle must be finite, got {a}")

    if kind == "H":
        return Gate1Q(np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0))
    if kind == "RX":
        return Gate1Q(_rx(arrays[0]))
    if kind == "RY":
        return Gate1Q(_ry(arrays[0]))
    if kind == "RZ":
        return Gate1Q(_rz(arrays[0]))
    phi, theta, omega = np.broadcast_arrays(*arrays)
    return Gate1Q(_rz(omega) @ _ry(theta) @ _rz(phi))


def _check_qubit(state: StateVector, qubit: int, role: str = "qubit") -> None:
    if not isinstance(qubit, (int, np.integer)) or not 0 <= qubit < state.n_qubits:
        raise ConfigError(
            f"{role} index {qubit!r} out of range for {state.n_qubits}-qubit register")


def apply_1q(state: StateVector, qubit: int, gate: Gate1Q) -> StateVector:
    """(I x ... x U x ... x I) |state> with U on the given qubit."""
    _check_qubit(state, qubit)
    mat = gate.matrix
    lead = 1 if state.batched else 0
    if mat.ndim == 3:
        if not state.batched or mat.shape[0] != state.batch_size:
            raise ConfigError(
                f"batched gate of size {mat.shape[0]} needs a state batch of the same size")

    psi = np.moveaxis(state.tensor(), lead + qubit, -1)
    moved_shape = psi.shape
    if mat.ndim == 2:
        out = psi @ mat.T
    else:
        flat = psi.reshape(state.batch_size, -1, 2)
        out = (flat @ np.swapaxes(mat, -1, -2)).reshape(moved_shape)
    out = np.moveaxis(out, -1, lead + qubit)
    return StateVector.from_tensor(state.n_qubits, out, state.batched)


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """控制位为 1 的基矢上翻转目标位"""
    _check_qubit(state, control, "control")
    _check_qubit(state, target, "target")
    if control == target:
        raise ConfigError(f"control and target must differ, both are {control}")
    lead = 1 if state.batched else 0
    psi = state.tensor()
    index = [slice(None)] * psi.ndim
    index[lead + control] = 1
    index = tuple(index)
    # 切片后控制位那一维没了，目标轴要前移
    target_axis = lead + target - (1 if target > control else 0)
    psi[index] = np.flip(psi[index], axis=target_axis)
    return StateVector.from_tensor(state.n_qubits, psi, state.batched)


def expect_z(state: StateVector, qubit: int) -> ArrayLike:
    """<psi|Z_qubit|psi>, a float (or one value per batch row)."""
    _check_qubit(state, qubit)
    lead = 1 if state.batched else 0
    probs = np.abs(state.tensor()) ** 2
    probs = np.moveaxis(probs, lead + qubit, -1)
    diff = probs[..., 0] - probs[..., 1]
    value = diff.reshape(diff.shape[:lead] + (-1,)).sum(axis=-1)
    value = np.clip(value, -1.0, 1.0)
    return value if state.batched else float(value)
