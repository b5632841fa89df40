"""
修饰量子网络（dressed quantum network）：前置全连接 + tanh，变分量子线路，后置全连接 + softmax。
"""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError, TapeError
from src.models.layers import kaiming_uniform, softmax, softmax_backward
from src.quantum.vqc import (
    VqcConfig,
    VqcTape,
    VqcWeights,
    vqc_forward,
    vqc_gradients,
    vqc_param_count,
)

PARAM_KEYS = ("pre.weight", "pre.bias", "vqc.angles", "post.weight", "post.bias")


@dataclass
class DressedQuantumNet:
    pre_weight: np.ndarray      # (n_ip, n_q)
    pre_bias: np.ndarray        # (n_q,)
    vqc_config: VqcConfig
    vqc_weights: VqcWeights
    post_weight: np.ndarray     # (n_q, n_c)
    post_bias: np.ndarray       # (n_c,)
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        n_q = self.vqc_config.n_qubits
        if self.pre_weight.ndim != 2 or self.pre_weight.shape[1] != n_q:
            raise ShapeError(f"pre-net weight must be (n_ip, {n_q}), got {self.pre_weight.shape}")
        if self.pre_bias.shape != (n_q,):
            raise ShapeError(f"pre-net bias must be ({n_q},), got {self.pre_bias.shape}")
        if self.post_weight.ndim != 2 or self.post_weight.shape[0] != n_q:
            raise ShapeError(f"post-net weight must be ({n_q}, n_c), got {self.post_weight.shape}")
        if self.post_bias.shape != (self.post_weight.shape[1],):
            raise ShapeError(f"post-net bias must be ({self.post_weight.shape[1]},), got {self.post_bias.shape}")
        self.vqc_weights.check(self.vqc_config)

    @property
    def n_ip(self) -> int:
        return self.pre_weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.post_weight.shape[1]

    @classmethod
    def initialize(cls, n_ip: int, vqc_config: VqcConfig, n_classes: int,
                   rng: np.random.Generator) -> "DressedQuantumNet":
        if n_ip < 1 or n_classes < 1:
            raise ConfigError(f"n_ip and n_classes must be positive, got {n_ip}, {n_classes}")
        n_q = vqc_config.n_qubits
        return cls(
            pre_weight=kaiming_uniform(rng, (n_ip, n_q), fan_in=n_ip),
            pre_bias=np.zeros(n_q),
            vqc_config=vqc_config,
            vqc_weights=VqcWeights.random(vqc_config, rng),
            post_weight=kaiming_uniform(rng, (n_q, n_classes), fan_in=n_q),
            post_bias=np.zeros(n_classes),
        )

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {
            "pre.weight": self.pre_weight,
            "pre.bias": self.pre_bias,
            "vqc.angles": self.vqc_weights.angles,
            "post.weight": self.post_weight,
            "post.bias": self.post_bias,
        }

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        current = self.params
        for key, value in params.items():
            if key not in current:
                raise ConfigError(f"unknown dressed-network parameter {key!r}")
            if np.shape(value) != current[key].shape:
                raise ShapeError(f"{key}: expected shape {current[key].shape}, got {np.shape(value)}")
        self.pre_weight = np.array(params.get("pre.weight", self.pre_weight), dtype=np.float64)
        self.pre_bias = np.array(params.get("pre.bias", self.pre_bias), dtype=np.float64)
        self.vqc_weights = VqcWeights(np.array(params.get("vqc.angles", self.vqc_weights.angles)))
        self.post_weight = np.array(params.get("post.weight", self.post_weight), dtype=np.float64)
        self.post_bias = np.array(params.get("post.bias", self.post_bias), dtype=np.float64)
        self.version += 1

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def breakdown(self) -> Dict[str, int]:
        return dqn_param_breakdown(self.n_ip, self.vqc_config.n_qubits,
                                   self.vqc_config.n_layers, self.n_classes)


@dataclass
class DqnTape:
    net_id: int
    version: int
    x: np.ndarray
    a: np.ndarray
    z: np.ndarray
    probs: np.ndarray
    vqc_tape: VqcTape
    batched: bool


def dqn_forward(net: DressedQuantumNet, features: np.ndarray) -> Tuple[np.ndarray, DqnTape]:
    """softmax(post(VQC(tanh(pre(x))))). Accepts (n_ip,) or (batch, n_ip)."""
    x = np.asarray(features, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_ip:
        raise ShapeError(f"dressed network expects {net.n_ip} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("dressed network input must be finite")
    x = x if batched else x[None, :]

    # tanh 把特征压到 (-1, 1)，再作为编码角度送入线路
    a = np.tanh(x @ net.pre_weight + net.pre_bias)
    z, vqc_tape = vqc_forward(net.vqc_config, net.vqc_weights, a, return_tape=True)
    probs = softmax(z @ net.post_weight + net.post_bias)

    tape = DqnTape(net_id=id(net), version=net.version, x=x, a=a, z=z,
                   probs=probs, vqc_tape=vqc_tape, batched=batched)
    return (probs if batched else probs[0]), tape


def dqn_backward(net: DressedQuantumNet, tape: DqnTape, grad_output: np.ndarray
                 ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    给定 dL/dprobs，返回量子头所有参数的梯度以及 grad_input。

    前置网络的梯度经 VQC 的参数平移特征梯度穿过量子部分，再乘 tanh 的导数。
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise TapeError("dressed-network tape is stale or belongs to another network")
    g = np.asarray(grad_output, dtype=np.float64)
    g = g if tape.batched else g[None, :]
    if g.shape != tape.probs.shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {tape.probs.shape}")

    dlogits = softmax_backward(tape.probs, g)
    grads = {
        "post.weight": tape.z.T @ dlogits,
        "post.bias": dlogits.sum(axis=0),
    }
    dz = dlogits @ net.post_weight.T
    da, grads["vqc.angles"] = vqc_gradients(net.vqc_config, net.vqc_weights, tape.a, dz,
                                            tape=tape.vqc_tape)
    # tanh' = 1 - tanh^2
    dh = da * (1.0 - tape.a ** 2)
    grads["pre.weight"] = tape.x.T @ dh
    grads["pre.bias"] = dh.sum(axis=0)
    grad_input = dh @ net.pre_weight.T
    return grads, (grad_input if tape.batched else grad_input[0])


def dqn_param_breakdown(n_ip: int, n_q: int, n_d: int, n_c: int) -> Dict[str, int]:
    for name, value in (("n_ip", n_ip), ("n_q", n_q), ("n_d", n_d), ("n_c", n_c)):
        if value < 1:
            raise ConfigError(f"{name} must be positive, got {value}")
    w_pre = n_ip * n_q + n_q
    w_vqc = vqc_param_count(n_q, n_d)
    w_post = n_q * n_c + n_c
    return {"w_pre": w_pre, "w_vqc": w_vqc, "w_post": w_post, "w_dqn": w_pre + w_vqc + w_post}


def dqn_param_count(n_ip: int, n_q: int, n_d: int, n_c: int) -> int:
    """W_dqn = (n_ip*n_q + n_q) + 3*n_q*n_d + (n_q*n_c + n_c)."""
    return dqn_param_breakdown(n_ip, n_q, n_d, n_c)["w_dqn"]
