"""
Classical convolutional architectures.

CM-1/2/3 follow the published layer listings, with ReLU after every conv and
hidden dense layer and softmax at the output. CM-T is a desk-scale model with
the same dense tail shape, used for synthetic 32x32 runs.
"""
from typing import Callable, Dict, List, Optional

import numpy as np

from src.errors import ConfigError
from src.models.layers import (
    LayerGraph,
    LayerSpec,
    activation,
    conv2d,
    dense,
    dropout,
    flatten,
    maxpool2d,
)

FULL_INPUT_SHAPE = (1, 200, 200)
DESK_INPUT_SHAPE = (1, 32, 32)


def _conv_block(in_ch: int, out_ch: int, kernel: int, stride: int) -> List[LayerSpec]:
    return [conv2d(in_ch, out_ch, kernel, stride), activation("relu")]


def _tail(widths: List[int], dropouts: Dict[int, float]) -> List[LayerSpec]:
    """Dense chain over widths; dropouts maps a hidden-layer position to p."""
    layers = [flatten()]
    last = len(widths) - 2
    for i in range(len(widths) - 1):
        layers.append(dense(widths[i], widths[i + 1]))
        if i < last:
            layers.append(activation("relu"))
            if i in dropouts:
                layers.append(dropout(dropouts[i]))
    layers.append(activation("softmax"))
    return layers


def _cm1() -> LayerGraph:
    layers = (
        _conv_block(1, 32, 32, 2) + [maxpool2d(8, 1)]
        + _conv_block(32, 64, 16, 2) + [maxpool2d(8, 1)]
        + _conv_block(64, 128, 16, 2) + [maxpool2d(8, 1)]
        + _conv_block(128, 128, 2, 1) + [maxpool2d(8, 2)]
        + _tail([3200, 128, 64, 32, 16, 2], {0: 0.5, 1: 0.25, 2: 0.12})
    )
    return LayerGraph("CM-1", layers, FULL_INPUT_SHAPE, published_param_count=1_076_338)


def _cm2() -> LayerGraph:
    layers = (
        _conv_block(1, 32, 4, 2) + [maxpool2d(4, 2)]
        + _conv_block(32, 64, 8, 2) + [maxpool2d(2, 2)]
        + _conv_block(64, 128, 4, 2)
        + _tail([2048, 128, 64, 16, 2], {0: 0.5, 1: 0.25})
    )
    return LayerGraph("CM-2", layers, FULL_INPUT_SHAPE, published_param_count=534_482)


def _cm3() -> LayerGraph:
    layers = (
        _conv_block(1, 32, 8, 2) + [maxpool2d(4, 2)]
        + _conv_block(32, 64, 4, 2) + [maxpool2d(4, 1)]
        + _conv_block(64, 128, 2, 1) + [maxpool2d(4, 2)]
        + _tail([8192, 128, 64, 16, 2], {0: 0.5, 1: 0.25})
    )
    return LayerGraph("CM-3", layers, FULL_INPUT_SHAPE, published_param_count=1_125_842)


def _cmt() -> LayerGraph:
    layers = (
        _conv_block(1, 4, 3, 1) + [maxpool2d(2, 2)]
        + _conv_block(4, 8, 3, 1) + [maxpool2d(2, 2)]
        + _tail([288, 128, 64, 16, 2], {0: 0.5, 1: 0.25})
    )
    return LayerGraph("CM-T", layers, DESK_INPUT_SHAPE)


PRESETS: Dict[str, Callable[[], LayerGraph]] = {
    "CM-1": _cm1,
    "CM-2": _cm2,
    "CM-3": _cm3,
    "CM-T": _cmt,
}

# CM-1 按原表结构在 1x200x200 上跑不通：最后一个池化层比特征图还大，只能计参数
COUNT_ONLY = frozenset({"CM-1"})


def preset_names() -> List[str]:
    return list(PRESETS)


def preset(name: str, seed: Optional[int] = 0) -> LayerGraph:
    """按名称构建预设模型；给了 seed 才初始化参数"""
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; available: {', '.join(PRESETS)}")
    graph = PRESETS[name]()
    if seed is not None:
        graph.init_params(np.random.default_rng(seed))
    return graph
