"""
迁移学习的模型手术：在全连接尾部的某个边界切开训练好的经典网络，
冻结前缀，用修饰量子网络替换被切掉的尾部。
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError, TransferContractError
from src.models.layers import LayerGraph, forward
from src.quantum.dressed import DressedQuantumNet, dqn_forward, dqn_param_breakdown
from src.quantum.vqc import VqcConfig
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, setup_logger

logger = setup_logger("surgery")

QTL_PRESETS = ("QTL-M-1", "QTL-M-2", "QTL-M-3", "custom")
TAIL_KINDS = ("dense", "dropout", "activation")
_FIXED_WIDTHS = {"QTL-M-1": 64, "QTL-M-2": 128}


@dataclass(frozen=True)
class CutPlan:
    source: str
    cut_index: int
    n_ip: int
    preset: str
    replaced_param_sum: int


def _tail_start(graph: LayerGraph) -> int:
    start = len(graph.layers)
    while start > 0 and graph.layers[start - 1].kind in TAIL_KINDS:
        start -= 1
    return start


def available_widths(graph: LayerGraph) -> List[int]:
    start = _tail_start(graph)
    return [spec.in_dim for spec in graph.layers[start:] if spec.kind == "dense"]


def plan_cut(graph: LayerGraph, preset: str, width: Optional[int] = None) -> CutPlan:
    """
    按量子头的输入宽度定位切点。

    QTL-M-1 切在读入 64 维的全连接层之前，QTL-M-2 切在读入 128 维的之前，
    QTL-M-3 切在第一个全连接层之前（整个全连接尾部被替换）；custom 需显式给出宽度。
    """
    if preset not in QTL_PRESETS:
        raise ConfigError(f"unknown QTL preset {preset!r}; expected one of {QTL_PRESETS}")
    start = _tail_start(graph)
    widths = available_widths(graph)
    if not widths:
        raise ConfigError(f"{graph.name} has no dense tail to replace")

    if preset == "custom":
        if width is None:
            raise ConfigError("the custom QTL preset needs an explicit width")
    elif preset == "QTL-M-3":
        width = widths[0]
    else:
        width = _FIXED_WIDTHS[preset]

    for index in range(start, len(graph.layers)):
        spec = graph.layers[index]
        if spec.kind == "dense" and spec.in_dim == width:
            break
    else:
        raise ConfigError(
            f"{graph.name} has no cut with head input width {width}; available widths: {widths}")

    # 切点前最后一个全连接层的输出维度必须等于头的输入维度
    previous = [s for s in graph.layers[start:index] if s.kind == "dense"]
    if previous and previous[-1].out_dim != width:
        raise ShapeError(
            f"{graph.name}: layer before cut emits {previous[-1].out_dim} features, head expects {width}")

    replaced = sum(spec.param_count() for spec in graph.layers[index:])
    plan = CutPlan(graph.name, index, width, preset, replaced)
    logger.debug(f"{graph.name} {preset}: cut at layer {index}, n_ip={width}, replaced={replaced}")
    return plan


@dataclass
class HybridModel:
    frozen_prefix: LayerGraph
    head: DressedQuantumNet
    plan: CutPlan
    seed: int = 0
    source_published_count: Optional[int] = field(default=None, compare=False)

    def check_frozen(self) -> None:
        for i, spec in enumerate(self.frozen_prefix.layers):
            if spec.parametric and not spec.frozen:
                raise TransferContractError(
                    f"prefix layer {i} ({spec.describe()}) of {self.frozen_prefix.name} is not frozen")

    def param_count(self) -> int:
        return self.frozen_prefix.param_count() + self.head.param_count()

    def features(self, batch: np.ndarray) -> np.ndarray:
        """切点处的前缀激活值，始终按推理模式计算"""
        out, _ = forward(self.frozen_prefix, batch, train_mode=False)
        return out.reshape(out.shape[0], -1)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        probs, _ = dqn_forward(self.head, self.features(batch))
        return probs

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)


def build_hybrid(graph: LayerGraph, plan: CutPlan, vqc_config: VqcConfig,
                 n_classes: int = 2, seed: int = 0, allow_untrained: bool = False) -> HybridModel:
    if not graph.trained and not allow_untrained:
        raise ConfigError(f"{graph.name} is untrained; pass allow_untrained to graft anyway")
    if plan.source != graph.name or plan.cut_index >= len(graph.layers):
        raise ConfigError(f"cut plan for {plan.source} does not match graph {graph.name}")
    cut = graph.layers[plan.cut_index]
    if cut.kind != "dense" or cut.in_dim != plan.n_ip:
        raise ConfigError(f"layer {plan.cut_index} of {graph.name} is not a dense layer reading {plan.n_ip}")
    if not graph.params:
        raise ConfigError(f"{graph.name} has no parameters to transfer")

    source = graph.copy()
    prefix_layers = source.layers[:plan.cut_index]
    for spec in prefix_layers:
        spec.frozen = True
    prefix_params = {k: v for k, v in source.params.items() if int(k.split(".")[0]) < plan.cut_index}
    for value in prefix_params.values():
        value.setflags(write=False)
    prefix = LayerGraph(
        name=f"{graph.name}[:{plan.cut_index}]",
        layers=prefix_layers,
        input_shape=graph.input_shape,
        params=prefix_params,
        trained=graph.trained,
    )
    head = DressedQuantumNet.initialize(plan.n_ip, vqc_config, n_classes, np.random.default_rng(seed))
    model = HybridModel(prefix, head, plan, seed, source_published_count=graph.published_param_count)
    logger.info(f"{SUCCESS_ICON} {graph.name} + {plan.preset}: {model.param_count():,} parameters "
                f"({head.param_count():,} trainable)")
    return model


def reduction_replaced(replaced_param_sum: float, dqn_params: float) -> float:
    """Layer-local reduction: (sum W_i - W_dqn) / sum W_i * 100."""
    if replaced_param_sum <= 0:
        raise ConfigError(f"replaced parameter sum must be positive, got {replaced_param_sum}")
    return (replaced_param_sum - dqn_params) / replaced_param_sum * 100.0


def reduction_total(classical_total: float, hybrid_total: float) -> float:
    """整个模型的参数减少百分比"""
    if classical_total <= 0:
        raise ConfigError(f"classical total must be positive, got {classical_total}")
    return (classical_total - hybrid_total) / classical_total * 100.0


@dataclass
class ParamReport:
    model: str
    qtl: str
    classical_total: int
    replaced: int
    n_ip: int
    w_pre: int
    w_vqc: int
    w_post: int
    w_dqn: int
    hybrid_total: int
    reduction_total: float
    reduction_replaced: float
    published_total: Optional[int] = None
    reference_hybrid_total: Optional[int] = None
    reference_reduction_total: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def param_report(graph: LayerGraph, qtl_preset: str, vqc_config: Optional[VqcConfig] = None,
                 n_classes: int = 2, width: Optional[int] = None) -> ParamReport:
    """
    Count-only accounting of a graft; needs no parameters or forward pass.

    When the graph carries a published total, the hybrid total is also
    reported against it as published - replaced + W_dqn.
    """
    vqc_config = vqc_config or VqcConfig()
    plan = plan_cut(graph, qtl_preset, width)
    parts = dqn_param_breakdown(plan.n_ip, vqc_config.n_qubits, vqc_config.n_layers, n_classes)
    classical = graph.param_count()
    hybrid = classical - plan.replaced_param_sum + parts["w_dqn"]
    report = ParamReport(
        model=graph.name,
        qtl=qtl_preset,
        classical_total=classical,
        replaced=plan.replaced_param_sum,
        n_ip=plan.n_ip,
        hybrid_total=hybrid,
        reduction_total=reduction_total(classical, hybrid),
        reduction_replaced=reduction_replaced(plan.replaced_param_sum, parts["w_dqn"]),
        **parts,
    )
    published = graph.published_param_count
    if published is not None:
        report.published_total = published
        report.reference_hybrid_total = published - plan.replaced_param_sum + parts["w_dqn"]
        report.reference_reduction_total = reduction_total(published, report.reference_hybrid_total)
        if published != classical:
            logger.warning(f"{ERROR_ICON} {graph.name}: constructed total {classical:,} "
                           f"differs from published {published:,}")
    return report


def hybrid_counts(graph: LayerGraph, vqc_config: Optional[VqcConfig] = None) -> Dict[str, Tuple[int, Optional[int]]]:
    """(constructed, published-reference) hybrid totals for the three fixed cuts."""
    out = {}
    for qtl in QTL_PRESETS[:3]:
        report = param_report(graph, qtl, vqc_config)
        out[qtl] = (report.hybrid_total, report.reference_hybrid_total)
    return out
