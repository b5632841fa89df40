import math
from functools import reduce

import numpy as np
import pytest

from src.errors import ConfigError, ShapeError, TapeError
from src.quantum.qsim import StateVector, init_zero, make_rotation
from src.quantum.test_qsim import dense_1q, dense_cnot
from src.quantum.vqc import (
    VqcConfig,
    VqcWeights,
    default_ranges,
    embed,
    entangling_layers,
    measure_all_z,
    vqc_forward,
    vqc_gradients,
    vqc_param_count,
)

FIVE_BY_THREE = VqcConfig(n_qubits=5, n_layers=3)
H = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2)
Z = np.diag([1.0, -1.0])


def dense_forward(config, angles, x):
    """Matrix-chain oracle built only from Kronecker products."""
    n = config.n_qubits
    psi = np.zeros(2 ** n, dtype=complex)
    psi[0] = 1.0
    if config.hadamard_prefix:
        psi = reduce(np.kron, [H] * n) @ psi
    psi = reduce(np.kron, [make_rotation("RY", config.input_scale * v).matrix for v in x]) @ psi
    for layer in range(config.n_layers):
        psi = reduce(np.kron, [make_rotation("Rot", *angles[layer, q]).matrix for q in range(n)]) @ psi
        for q in range(n):
            psi = dense_cnot(n, q, (q + config.ranges[layer]) % n) @ psi
    return np.array([np.real(np.conj(psi) @ dense_1q(n, q, Z) @ psi) for q in range(n)])


def random_inputs(config, seed):
    rng = np.random.default_rng(seed)
    return VqcWeights.random(config, rng), rng.uniform(-1.0, 1.0, size=config.n_qubits)


def test_default_ranges():
    assert default_ranges(5, 3) == (1, 2, 3)
    assert default_ranges(3, 4) == (1, 2, 1, 2)
    assert FIVE_BY_THREE.ranges == (1, 2, 3)


@pytest.mark.parametrize("kwargs", [
    {"n_qubits": 1, "n_layers": 1},
    {"n_qubits": 5, "n_layers": 0},
    {"n_qubits": 5, "n_layers": 2, "ranges": (1, 5)},
    {"n_qubits": 5, "n_layers": 2, "ranges": (1,)},
    {"n_qubits": 3, "n_layers": 1, "output_activation": "sigmoid"},
    {"n_qubits": 3, "n_layers": 1, "input_scale": math.inf},
])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        VqcConfig(**kwargs)


def test_embed_zero_features():
    with_prefix = embed(VqcConfig(n_qubits=3, n_layers=1), np.zeros(3))
    np.testing.assert_allclose(measure_all_z(with_prefix), 0.0, atol=1e-12)
    without = embed(VqcConfig(n_qubits=3, n_layers=1, hadamard_prefix=False), np.zeros(3))
    np.testing.assert_allclose(measure_all_z(without), 1.0, atol=1e-12)


def test_embed_rotation_formula():
    config = VqcConfig(n_qubits=2, n_layers=1, hadamard_prefix=False)
    np.testing.assert_allclose(measure_all_z(embed(config, [1.0, -1.0])), [0.0, 0.0], atol=1e-12)


def test_embed_rejects_length():
    with pytest.raises(ShapeError):
        embed(FIVE_BY_THREE, np.zeros(4))


def test_zero_layers_keep_zero_state():
    config = VqcConfig(n_qubits=4, n_layers=2)
    out = entangling_layers(config, VqcWeights.zeros(config), init_zero(4))
    np.testing.assert_allclose(out.amplitudes, init_zero(4).amplitudes, atol=1e-15)


def test_two_qubit_ring_matches_dense_oracle():
    # RY(pi) on qubit 0, then CNOT(0, 1) and CNOT(1, 0): |00> -> |10> -> |11> -> |01>
    config = VqcConfig(n_qubits=2, n_layers=1)
    angles = np.zeros(config.weight_shape)
    angles[0, 0] = (0.0, math.pi, 0.0)
    out = entangling_layers(config, VqcWeights(angles), init_zero(2))
    psi = np.kron(make_rotation("RY", math.pi).matrix, np.eye(2)) @ init_zero(2).amplitudes
    psi = dense_cnot(2, 1, 0) @ dense_cnot(2, 0, 1) @ psi
    np.testing.assert_allclose(out.amplitudes, psi, atol=1e-15)
    assert np.abs(out.amplitudes[0b01]) ** 2 == pytest.approx(1.0)


def test_random_layers_preserve_norm():
    config = VqcConfig(n_qubits=3, n_layers=3)
    weights, _ = random_inputs(config, 5)
    out = entangling_layers(config, weights, embed(config, [0.2, -0.4, 0.9]))
    assert abs(out.norm() - 1.0) < 1e-12


def test_entangling_layers_shape_checks():
    config = VqcConfig(n_qubits=3, n_layers=2)
    with pytest.raises(ShapeError):
        entangling_layers(config, VqcWeights(np.zeros((2, 4, 3))), init_zero(3))
    with pytest.raises(ShapeError):
        entangling_layers(config, VqcWeights.zeros(config), init_zero(4))


def test_measure_all_z():
    np.testing.assert_allclose(measure_all_z(init_zero(3)), [1, 1, 1])
    amps = np.zeros(8)
    amps[0b101] = 1.0
    np.testing.assert_allclose(measure_all_z(StateVector(3, amps)), [-1, 1, -1])


def test_identity_circuit():
    config = VqcConfig(n_qubits=4, n_layers=2, hadamard_prefix=False)
    np.testing.assert_allclose(vqc_forward(config, VqcWeights.zeros(config), np.zeros(4)), 1.0)


@pytest.mark.parametrize("config", [
    VqcConfig(n_qubits=2, n_layers=2),
    VqcConfig(n_qubits=3, n_layers=3, hadamard_prefix=False),
    VqcConfig(n_qubits=3, n_layers=2, ranges=(2, 2), input_scale=1.3),
])
def test_forward_matches_dense_oracle(config):
    weights, x = random_inputs(config, 9)
    np.testing.assert_allclose(vqc_forward(config, weights, x), dense_forward(config, weights.angles, x),
                               atol=1e-10)


def test_five_qubit_config_matches_dense_oracle():
    weights, x = random_inputs(FIVE_BY_THREE, 42)
    out = vqc_forward(FIVE_BY_THREE, weights, x)
    np.testing.assert_allclose(out, dense_forward(FIVE_BY_THREE, weights.angles, x), atol=1e-10)
    assert np.all(np.abs(out) <= 1.0)


def test_batch_rows_match_single_calls():
    rng = np.random.default_rng(1)
    weights = VqcWeights.random(FIVE_BY_THREE, rng)
    batch = rng.uniform(-1, 1, size=(6, 5))
    out = vqc_forward(FIVE_BY_THREE, weights, batch)
    assert out.shape == (6, 5)
    for row in range(6):
        np.testing.assert_allclose(out[row], vqc_forward(FIVE_BY_THREE, weights, batch[row]), atol=1e-14)


def test_single_feature_derivative():
    # <Z> on qubit 1 is cos(theta) after the CNOT ring, so d/dtheta = -sin(theta)
    config = VqcConfig(n_qubits=2, n_layers=1, hadamard_prefix=False, input_scale=1.0)
    weights = VqcWeights.zeros(config)
    theta = math.pi / 2
    out = vqc_forward(config, weights, [theta, 0.0])
    assert out[1] == pytest.approx(math.cos(theta), abs=1e-12)
    grad_x, _ = vqc_gradients(config, weights, [theta, 0.0], [0.0, 1.0])
    assert grad_x[0] == pytest.approx(-1.0, abs=1e-12)


def test_zero_upstream_gives_zero_gradients():
    config = VqcConfig(n_qubits=3, n_layers=2)
    grad_x, grad_w = vqc_gradients(config, VqcWeights.zeros(config), np.zeros(3), np.zeros(3))
    assert not grad_x.any() and not grad_w.any()


def finite_differences(config, angles, x, upstream, h=1e-5):
    def f(a, v):
        return float(upstream @ vqc_forward(config, VqcWeights(a), v))

    grad_w = np.zeros_like(angles)
    for idx in np.ndindex(angles.shape):
        plus, minus = angles.copy(), angles.copy()
        plus[idx] += h
        minus[idx] -= h
        grad_w[idx] = (f(plus, x) - f(minus, x)) / (2 * h)
    grad_x = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus[i] += h
        minus[i] -= h
        grad_x[i] = (f(angles, plus) - f(angles, minus)) / (2 * h)
    return grad_x, grad_w


@pytest.mark.parametrize("seed", range(20))
def test_parameter_shift_matches_finite_differences(seed):
    weights, x = random_inputs(FIVE_BY_THREE, seed)
    upstream = np.random.default_rng(1000 + seed).normal(size=5)
    grad_x, grad_w = vqc_gradients(FIVE_BY_THREE, weights, x, upstream)
    fd_x, fd_w = finite_differences(FIVE_BY_THREE, weights.angles, x, upstream)
    np.testing.assert_allclose(grad_w, fd_w, atol=1e-6, rtol=0)
    np.testing.assert_allclose(grad_x, fd_x, atol=1e-6, rtol=0)


def test_batched_gradients_sum_weights():
    rng = np.random.default_rng(8)
    config = VqcConfig(n_qubits=3, n_layers=2)
    weights = VqcWeights.random(config, rng)
    x = rng.uniform(-1, 1, size=(4, 3))
    up = rng.normal(size=(4, 3))
    grad_x, grad_w = vqc_gradients(config, weights, x, up)
    rows = [vqc_gradients(config, weights, x[i], up[i]) for i in range(4)]
    np.testing.assert_allclose(grad_w, sum(r[1] for r in rows), atol=1e-12)
    np.testing.assert_allclose(grad_x, np.stack([r[0] for r in rows]), atol=1e-12)


def test_tape_replay_equals_fresh_gradients():
    weights, x = random_inputs(FIVE_BY_THREE, 4)
    up = np.ones(5)
    _, tape = vqc_forward(FIVE_BY_THREE, weights, x, return_tape=True)
    assert len(tape.states) == FIVE_BY_THREE.n_layers + 1
    replay = vqc_gradients(FIVE_BY_THREE, weights, x, up, tape=tape)
    fresh = vqc_gradients(FIVE_BY_THREE, weights, x, up)
    np.testing.assert_array_equal(replay[0], fresh[0])
    np.testing.assert_array_equal(replay[1], fresh[1])


def test_mismatched_tape_rejected():
    weights, x = random_inputs(FIVE_BY_THREE, 4)
    _, tape = vqc_forward(FIVE_BY_THREE, weights, x, return_tape=True)
    with pytest.raises(TapeError):
        vqc_gradients(FIVE_BY_THREE, weights, x + 0.1, np.ones(5), tape=tape)


def test_upstream_shape_checked():
    weights, x = random_inputs(FIVE_BY_THREE, 4)
    with pytest.raises(ShapeError):
        vqc_gradients(FIVE_BY_THREE, weights, x, np.ones(4))


def test_zero_input_scale_ignores_features():
    config = VqcConfig(n_qubits=3, n_layers=2, input_scale=0.0)
    weights, _ = random_inputs(config, 2)
    a = vqc_forward(config, weights, [0.1, 0.2, 0.3])
    b = vqc_forward(config, weights, [-0.9, 0.5, 0.7])
    np.testing.assert_allclose(a, b, atol=1e-14)
    grad_x, _ = vqc_gradients(config, weights, [0.1, 0.2, 0.3], np.ones(3))
    assert not grad_x.any()


def test_relu_readout_masks_gradient():
    plain = VqcConfig(n_qubits=3, n_layers=2)
    relu = VqcConfig(n_qubits=3, n_layers=2, output_activation="relu")
    weights, x = random_inputs(plain, 6)
    raw = vqc_forward(plain, weights, x)
    np.testing.assert_allclose(vqc_forward(relu, weights, x), np.maximum(raw, 0.0))
    up = np.array([1.0, -2.0, 0.5])
    _, masked = vqc_gradients(relu, weights, x, up)
    _, expected = vqc_gradients(plain, weights, x, up * (raw > 0))
    np.testing.assert_allclose(masked, expected, atol=1e-14)


@pytest.mark.parametrize("n_q,n_d,expected", [(5, 3, 45), (1, 1, 3), (4, 2, 24)])
def test_param_count(n_q, n_d, expected):
    assert vqc_param_count(n_q, n_d) == expected


def test_param_count_matches_weights():
    for n_q, n_d in [(2, 1), (5, 3), (7, 4)]:
        config = VqcConfig(n_qubits=n_q, n_layers=n_d)
        assert VqcWeights.zeros(config).size == vqc_param_count(n_q, n_d)
