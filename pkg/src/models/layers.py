"""
Minimal sequential network stack with explicit forward and backward passes.

Tensors are float64 numpy arrays. Images are (N, C, H, W); dense weights are
(in_dim, out_dim); conv weights are (out_ch, in_ch, k, k). Convolution and
pooling use valid padding: out = (in - k) // s + 1.
"""
import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ConfigError, ShapeError, TapeError

LAYER_KINDS = ("conv2d", "maxpool2d", "flatten", "dense", "dropout", "activation")
ACTIVATIONS = ("relu", "tanh", "softmax", "identity")
PROB_FLOOR = 1e-12


@dataclass
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    in_dim: int = 0
    out_dim: int = 0
    p: float = 0.0
    fn: str = ""
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind == "conv2d" and min(self.in_ch, self.out_ch, self.kernel) < 1:
            raise ConfigError(f"conv2d dimensions must be positive: {self.describe()}")
        if self.kind in ("conv2d", "maxpool2d") and (self.kernel < 1 or self.stride < 1):
            raise ConfigError(f"kernel and stride must be >= 1: {self.describe()}")
        if self.kind == "dense" and min(self.in_dim, self.out_dim) < 1:
            raise ConfigError(f"dense dimensions must be positive: {self.describe()}")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout p must be in [0, 1), got {self.p}")
        if self.kind == "activation" and self.fn not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.fn!r}; expected one of {ACTIVATIONS}")

    def describe(self) -> str:
        if self.kind == "conv2d":
            return f"Conv2D ({self.in_ch}, {self.out_ch}, {self.kernel}, {self.stride})"
        if self.kind == "maxpool2d":
            return f"MaxPool2D ({self.kernel}, {self.stride})"
        if self.kind == "dense":
            return f"Linear ({self.in_dim}, {self.out_dim})"
        if self.kind == "dropout":
            return f"dropout (p={self.p})"
        if self.kind == "activation":
            return self.fn
        return "Flatten ()"

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind == "conv2d":
            return {"weight": (self.out_ch, self.in_ch, self.kernel, self.kernel),
                    "bias": (self.out_ch,)}
        if self.kind == "dense":
            return {"weight": (self.in_dim, self.out_dim), "bias": (self.out_dim,)}
        return {}

    def param_count(self) -> int:
        if self.kind == "conv2d":
            return self.out_ch * self.in_ch * self.kernel ** 2 + self.out_ch
        if self.kind == "dense":
            return self.out_dim * self.in_dim + self.out_dim
        return 0

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Shape of one sample after this layer; raises ShapeError if it does not fit."""
        if self.kind in ("conv2d", "maxpool2d"):
            if len(shape) != 3:
                raise ShapeError(f"{self.describe()} needs a (C, H, W) input, got {shape}")
            ch, h, w = shape
            if self.kind == "conv2d" and ch != self.in_ch:
                raise ShapeError(f"{self.describe()} expects {self.in_ch} channels, got {ch}")
            if h < self.kernel or w < self.kernel:
                raise ShapeError(f"{self.describe()} kernel exceeds the {h}x{w} input map")
            out_ch = self.out_ch if self.kind == "conv2d" else ch
            return (out_ch, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "dense":
            if shape != (self.in_dim,):
                raise ShapeError(f"{self.describe()} expects ({self.in_dim},), got {shape}")
            return (self.out_dim,)
        return shape

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(**data)


def conv2d(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride)


def maxpool2d(kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel=kernel, stride=stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def dropout(p: float) -> LayerSpec:
    return LayerSpec("dropout", p=p)


def activation(fn: str) -> LayerSpec:
    return LayerSpec("activation", fn=fn)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_key(index: int, name: str) -> str:
    return f"{index}.{name}"


@dataclass
class LayerGraph:
    name: str
    layers: List[LayerSpec]
    input_shape: Optional[Tuple[int, ...]] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    published_param_count: Optional[int] = None
    trained: bool = False
    version: int = 0

    def init_params(self, rng: np.random.Generator) -> "LayerGraph":
        """权重用 Kaiming 均匀分布初始化，偏置置零"""
        self.params = {}
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv2d":
                fan_in = spec.in_ch * spec.kernel ** 2
            elif spec.kind == "dense":
                fan_in = spec.in_dim
            else:
                continue
            shapes = spec.param_shapes()
            self.params[param_key(i, "weight")] = kaiming_uniform(rng, shapes["weight"], fan_in)
            self.params[param_key(i, "bias")] = np.zeros(shapes["bias"])
        self.version += 1
        return self

    def param_count(self) -> int:
        return sum(spec.param_count() for spec in self.layers)

    def infer_shapes(self, input_shape: Optional[Tuple[int, ...]] = None) -> List[Tuple[int, ...]]:
        """Per-layer output shapes; the error names the first layer that does not fit."""
        shape = tuple(input_shape or self.input_shape or ())
        if not shape:
            raise ShapeError(f"{self.name}: no input shape to infer from")
        shapes = []
        for i, spec in enumerate(self.layers):
            try:
                shape = spec.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"{self.name} layer {i} ({spec.describe()}): {e}") from None
            shapes.append(shape)
        return shapes

    def trainable_keys(self) -> List[str]:
        keys = []
        for i, spec in enumerate(self.layers):
            if spec.parametric and not spec.frozen:
                keys += [param_key(i, "weight"), param_key(i, "bias")]
        return keys

    def freeze(self) -> None:
        for spec in self.layers:
            spec.frozen = True
        self.version += 1

    def set_params(self, params: Dict[str, np.ndarray]) -> None:
        for key, value in params.items():
            if key not in self.params:
                raise ConfigError(f"{self.name}: unknown parameter {key!r}")
            if np.shape(value) != self.params[key].shape:
                raise ShapeError(f"{self.name} {key}: expected {self.params[key].shape}, got {np.shape(value)}")
        for key, value in params.items():
            self.params[key] = np.array(value, dtype=np.float64)
        self.version += 1

    def copy(self) -> "LayerGraph":
        return LayerGraph(
            name=self.name,
            layers=copy.deepcopy(self.layers),
            input_shape=self.input_shape,
            params={k: v.copy() for k, v in self.params.items()},
            published_param_count=self.published_param_count,
            trained=self.trained,
        )


@dataclass
class Tape:
    graph_id: int
    version: int
    input_shape: Tuple[int, ...]
    caches: List[object]
    output: np.ndarray


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _conv_forward(x, w, b, s):
    k = w.shape[-1]
    win = _windows(x, k, s)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None], win


def _conv_backward(dout, x, w, win, s, need_params):
    k = w.shape[-1]
    ho, wo = dout.shape[2:]
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
    if not need_params:
        return dx, None, None
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def _pool_forward(x, k, s):
    win = _windows(x, k, s)
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout, x_shape, arg, k, s):
    ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            hit = dout * (arg == i * k + j)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += hit
    return dx


def forward(graph: LayerGraph, batch: np.ndarray, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Tape]:
    """
    对一个 batch 做前向。dropout 只在 train_mode 下生效，掩码从 rng 抽取。
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"{graph.name}: batch must have a leading batch axis, got {x.shape}")
    graph.infer_shapes(x.shape[1:])
    if train_mode and rng is None:
        rng = np.random.default_rng()

    caches = []
    for i, spec in enumerate(graph.layers):
        if spec.kind == "conv2d":
            w, b = graph.params[param_key(i, "weight")], graph.params[param_key(i, "bias")]
            out, win = _conv_forward(x, w, b, spec.stride)
            caches.append((x, win))
        elif spec.kind == "maxpool2d":
            out, arg = _pool_forward(x, spec.kernel, spec.stride)
            caches.append((x.shape, arg))
        elif spec.kind == "flatten":
            out = x.reshape(x.shape[0], -1)
            caches.append(x.shape)
        elif spec.kind == "dense":
            out = x @ graph.params[param_key(i, "weight")] + graph.params[param_key(i, "bias")]
            caches.append(x)
        elif spec.kind == "dropout":
            if train_mode and spec.p > 0.0:
                # inverted dropout，推理时不用再缩放
                mask = (rng.random(x.shape) >= spec.p) / (1.0 - spec.p)
                out = x * mask
            else:
                mask = None
                out = x
            caches.append(mask)
        else:
            if spec.fn == "relu":
                out = np.maximum(x, 0.0)
            elif spec.fn == "tanh":
                out = np.tanh(x)
            elif spec.fn == "softmax":
                out = softmax(x)
            else:
                out = x
            caches.append(out if spec.fn != "relu" else x)
        x = out

    tape = Tape(graph_id=id(graph), version=graph.version, input_shape=tuple(batch.shape),
                caches=caches, output=x)
    return x, tape


def backward(graph: LayerGraph, tape: Tape, grad_output: np.ndarray
             ) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    反向传播 dL/doutput。冻结层不产生参数梯度，但梯度照常往前传。
    """
    if tape.graph_id != id(graph) or tape.version != graph.version or len(tape.caches) != len(graph.layers):
        raise TapeError(f"{graph.name}: tape is stale or belongs to another graph")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ShapeError(f"{graph.name}: grad_output shape {g.shape} != output shape {tape.output.shape}")

    grads: Dict[str, np.ndarray] = {}
    for i in range(len(graph.layers) - 1, -1, -1):
        spec, cache = graph.layers[i], tape.caches[i]
        if spec.kind == "conv2d":
            x, win = cache
            w = graph.params[param_key(i, "weight")]
            g, dw, db = _conv_backward(g, x, w, win, spec.stride, need_params=not spec.frozen)
            if not spec.frozen:
                grads[param_key(i, "weight")], grads[param_key(i, "bias")] = dw, db
        elif spec.kind == "maxpool2d":
            x_shape, arg = cache
            g = _pool_backward(g, x_shape, arg, spec.kernel, spec.stride)
        elif spec.kind == "flatten":
            g = g.reshape(cache)
        elif spec.kind == "dense":
            x = cache
            if not spec.frozen:
                grads[param_key(i, "weight")] = x.T @ g
                grads[param_key(i, "bias")] = g.sum(axis=0)
            g = g @ graph.params[param_key(i, "weight")].T
        elif spec.kind == "dropout":
            if cache is not None:
                g = g * cache
        else:
            if spec.fn == "relu":
                g = g * (cache > 0.0)
            elif spec.fn == "tanh":
                g = g * (1.0 - cache ** 2)
            elif spec.fn == "softmax":
                g = softmax_backward(cache, g)
    return grads, g


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln(probs[label]) with a 1e-12 floor."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError(f"probs must be a vector, got shape {p.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"probs must sum to 1, got {p.sum()}")
    if not isinstance(label, (int, np.integer)) or not 0 <= label < p.size:
        raise ConfigError(f"label {label!r} out of range for {p.size} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def cross_entropy_batch(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """批内平均交叉熵，及其对 probs 的梯度"""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = probs.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigError(f"labels must be {n} class indices in [0, {n_classes})")
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (picked * n)
    return loss, grad
