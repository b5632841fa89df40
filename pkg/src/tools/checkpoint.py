"""
QTLC checkpoint codec.

Layout (little-endian): magic "QTLC", u16 format version, u32 header length,
a UTF-8 JSON header (layer table, tensor index, counts, provenance), then the
raw float64 tensors in header order.
"""
import json
import os
from dataclasses import asdict
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.errors import CheckpointError
from src.models.layers import LayerGraph, LayerSpec
from src.models.surgery import CutPlan, HybridModel
from src.quantum.dressed import DressedQuantumNet
from src.quantum.vqc import VqcConfig, VqcWeights
from src.tools.files import atomic_write
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, setup_logger

logger = setup_logger("checkpoint")

MAGIC = b"QTLC"
VERSION = 1
PREAMBLE = np.dtype([("magic", "S4"), ("version", "<u2"), ("header_len", "<u4")])

Model = Union[LayerGraph, HybridModel]


def _graph_header(graph: LayerGraph) -> Dict[str, object]:
    return {
        "name": graph.name,
        "layers": [spec.to_dict() for spec in graph.layers],
        "input_shape": list(graph.input_shape) if graph.input_shape else None,
        "published_param_count": graph.published_param_count,
        "trained": graph.trained,
        "param_keys": sorted(graph.params, key=lambda k: (int(k.split(".")[0]), k)),
    }


def _graph_from_header(meta: Dict[str, object], tensors: Dict[str, np.ndarray]) -> LayerGraph:
    graph = LayerGraph(
        name=meta["name"],
        layers=[LayerSpec.from_dict(d) for d in meta["layers"]],
        input_shape=tuple(meta["input_shape"]) if meta["input_shape"] else None,
        params={k: tensors[k] for k in meta["param_keys"]},
        published_param_count=meta["published_param_count"],
        trained=meta["trained"],
    )
    for i, spec in enumerate(graph.layers):
        for name, shape in spec.param_shapes().items():
            key = f"{i}.{name}"
            if key not in graph.params or graph.params[key].shape != shape:
                raise CheckpointError(f"tensor {key} missing or mis-shaped for {spec.describe()}")
    return graph


def save_checkpoint(model: Model, path: str, seed: Optional[int] = None,
                    provenance: Optional[Dict[str, object]] = None) -> str:
    tensors: List[Tuple[str, np.ndarray]] = []
    if isinstance(model, HybridModel):
        graph = model.frozen_prefix
        head = model.head
        header = {
            "kind": "hybrid",
            "graph": _graph_header(graph),
            "plan": asdict(model.plan),
            "vqc_config": {**asdict(head.vqc_config), "ranges": list(head.vqc_config.ranges)},
            "source_published_count": model.source_published_count,
            "head_seed": model.seed,
        }
        tensors += [(k, graph.params[k]) for k in header["graph"]["param_keys"]]
        tensors += [(f"head.{k}", v) for k, v in head.params.items()]
    elif isinstance(model, LayerGraph):
        header = {"kind": "graph", "graph": _graph_header(model)}
        tensors += [(k, model.params[k]) for k in header["graph"]["param_keys"]]
    else:
        raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")

    header["param_count"] = model.param_count()
    header["seed"] = seed
    header["provenance"] = provenance or {}
    header["tensors"] = [{"key": k, "shape": list(v.shape)} for k, v in tensors]

    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    # header 用 sort_keys，同样的模型写出的字节完全相同
    preamble = np.zeros(1, dtype=PREAMBLE)
    preamble[0] = (MAGIC, VERSION, len(meta))
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in tensors)
    target = atomic_write(path, preamble.tobytes() + meta + body)
    logger.info(f"{SUCCESS_ICON} checkpoint {target}: {header['param_count']:,} parameters")
    return target


def _read(path: str) -> Tuple[Dict[str, object], bytes, int]:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < PREAMBLE.itemsize:
        raise CheckpointError(f"{path}: truncated preamble")
    pre = np.frombuffer(blob, dtype=PREAMBLE, count=1)[0]
    if bytes(pre["magic"]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic {bytes(pre['magic'])!r}")
    if int(pre["version"]) != VERSION:
        raise CheckpointError(f"{path}: found format version {int(pre['version'])}, expected {VERSION}")
    start = PREAMBLE.itemsize
    end = start + int(pre["header_len"])
    if len(blob) < end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    return header, blob, end


def read_header(path: str) -> Dict[str, object]:
    header, _, _ = _read(path)
    return header


def load_checkpoint(path: str) -> Model:
    """重建 LayerGraph 或 HybridModel，文件有问题时直接抛异常"""
    header, blob, offset = _read(path)
    # 张量索引本身也可能损坏：缺键、形状不是整数列表
    try:
        index = [(str(t["key"]), tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt tensor index ({e!r})") from None
    if any(d < 0 for _, shape in index for d in shape):
        raise CheckpointError(f"{path}: negative tensor dimension")
    expected = offset + sum(8 * int(np.prod(shape, dtype=np.int64)) for _, shape in index)
    if len(blob) != expected:
        logger.error(f"{ERROR_ICON} {path}: {len(blob)} bytes, expected {expected}")
        raise CheckpointError(f"{path}: truncated or padded tensor data")

    tensors: Dict[str, np.ndarray] = {}
    for key, shape in index:
        count = int(np.prod(shape, dtype=np.int64))
        tensors[key] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset += 8 * count

    try:
        graph = _graph_from_header(header["graph"], tensors)
        if header["kind"] == "graph":
            return graph
        if header["kind"] != "hybrid":
            raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
        cfg = dict(header["vqc_config"])
        cfg["ranges"] = tuple(cfg["ranges"])
        vqc_config = VqcConfig(**cfg)
        head = DressedQuantumNet(
            pre_weight=tensors["head.pre.weight"],
            pre_bias=tensors["head.pre.bias"],
            vqc_config=vqc_config,
            vqc_weights=VqcWeights(tensors["head.vqc.angles"]),
            post_weight=tensors["head.post.weight"],
            post_bias=tensors["head.post.bias"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: inconsistent header ({e})") from None
    for value in graph.params.values():
        value.setflags(write=False)
    return HybridModel(graph, head, CutPlan(**header["plan"]), header["head_seed"],
                       source_published_count=header["source_published_count"])
