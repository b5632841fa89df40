"""
训练与评估：经典模型多次重启预训练、量子头迁移微调、k 折交叉验证以及二分类指标。
"""
import concurrent.futures
import time
from dataclasses import asdict, dataclass, field, replace
from functools import singledispatch
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import ConfigError, ShapeError
from src.models.layers import LayerGraph, backward, cross_entropy_batch, forward
from src.models.optim import AdamState, adam_step
from src.models.presets import preset
from src.models.surgery import HybridModel
from src.quantum.dressed import dqn_backward, dqn_forward
from src.tools.dataset import ANOMALOUS, Dataset, holdout_split, kfold_split
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, WAIT_ICON, setup_logger
from src.tools.report import convergence_frame, summarize

logger = setup_logger("trainer")

EVAL_CHUNK = 256
METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "loss")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 120
    learning_rate: float = 0.001
    seed: int = 0
    restarts: int = 5
    normalize_loss: bool = True
    test_fraction: float = 0.2
    workers: int = 1
    cache_features: bool = True

    def __post_init__(self):
        self.validate()

    @classmethod
    def classical(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def hybrid(cls, **overrides) -> "TrainConfig":
        values = {"epochs": 40, "learning_rate": 0.0008, "restarts": 1}
        values.update(overrides)
        return cls(**values)

    def validate(self, n_train: Optional[int] = None) -> None:
        """验证训练参数"""
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if n_train is not None and self.batch_size > n_train:
            raise ConfigError(f"batch_size {self.batch_size} exceeds {n_train} training samples")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    loss: float = 0.0

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, loss: float = 0.0) -> "Metrics":
        total = tp + fp + tn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        accuracy = (tp + tn) / total if total else 0.0
        return cls(accuracy, precision, recall, f1, tp, fp, tn, fn, loss)

    @classmethod
    def from_predictions(cls, labels: np.ndarray, predictions: np.ndarray, loss: float = 0.0) -> "Metrics":
        labels = np.asarray(labels)
        predictions = np.asarray(predictions)
        pos, pred_pos = labels == ANOMALOUS, predictions == ANOMALOUS
        return cls.from_counts(
            tp=int(np.sum(pos & pred_pos)),
            fp=int(np.sum(~pos & pred_pos)),
            tn=int(np.sum(~pos & ~pred_pos)),
            fn=int(np.sum(pos & ~pred_pos)),
            loss=loss,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ConvergenceRecord:
    label: str = ""
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_acc: List[float] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, test_loss: float, test_acc: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.test_loss.append(test_loss)
        self.test_acc.append(test_acc)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_frame(self, normalize: bool = True) -> pd.DataFrame:
        return convergence_frame({
            "epoch": self.epochs,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
        }, normalize=normalize and len(self) > 0)


@singledispatch
def predict_proba(model: Any, batch: np.ndarray) -> np.ndarray:
    """推理模式下的类别概率 (N, n_classes)"""
    if hasattr(model, "predict_proba"):
        return np.asarray(model.predict_proba(batch), dtype=np.float64)
    raise ConfigError(f"cannot evaluate a {type(model).__name__}")


@predict_proba.register
def _(model: LayerGraph, batch: np.ndarray) -> np.ndarray:
    out, _ = forward(model, batch, train_mode=False)
    return out


@predict_proba.register
def _(model: HybridModel, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


def _chunked(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + EVAL_CHUNK]) for i in range(0, len(x), EVAL_CHUNK)])


def metrics_from_probs(probs: np.ndarray, labels: np.ndarray) -> Metrics:
    loss, _ = cross_entropy_batch(probs, labels)
    return Metrics.from_predictions(labels, np.argmax(probs, axis=1), loss)


def evaluate(model: Any, dataset: Dataset) -> Metrics:
    """取 argmax 判别，异常类为正类"""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    probs = _chunked(lambda x: predict_proba(model, x), dataset.images)
    return metrics_from_probs(probs, dataset.labels)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_graph(graph: LayerGraph, train: Dataset, test: Dataset, config: TrainConfig,
                seed: int, label: str = "") -> ConvergenceRecord:
    """对所有未冻结层做小批量 Adam 训练"""
    graph.infer_shapes(train.sample_shape)
    config.validate(len(train))
    rng = np.random.default_rng(seed)
    state = AdamState(learning_rate=config.learning_rate)
    record = ConvergenceRecord(label=label or graph.name)
    trainable = graph.trainable_keys()

    for epoch in range(1, config.epochs + 1):
        started = time.time()
        total = 0.0
        for idx in _batches(rng, len(train), config.batch_size):
            probs, tape = forward(graph, train.images[idx], train_mode=True, rng=rng)
            loss, grad = cross_entropy_batch(probs, train.labels[idx])
            grads, _ = backward(graph, tape, grad)
            params = {k: graph.params[k] for k in trainable}
            updated, state = adam_step(params, grads, state)
            graph.set_params(updated)
            total += loss * len(idx)
            logger.debug(f"{record.label} epoch {epoch} batch loss {loss:.6f}")
        test_metrics = evaluate(graph, test)
        record.append(epoch, total / len(train), test_metrics.loss, test_metrics.accuracy)
        logger.info(f"{record.label} epoch {epoch}/{config.epochs}: loss {total / len(train):.4f}, "
                    f"test loss {test_metrics.loss:.4f}, test acc {test_metrics.accuracy:.4f} "
                    f"({time.time() - started:.1f}s)")
    graph.trained = graph.trained or config.epochs > 0
    return record


@dataclass
class ClassicalResult:
    model: LayerGraph
    records: List[ConvergenceRecord]
    metrics: List[Metrics]
    seeds: List[int]
    best: int


def train_classical(preset_name: str, dataset: Dataset, config: TrainConfig,
                    test: Optional[Dataset] = None) -> ClassicalResult:
    """
    用种子 seed..seed+restarts-1 各训练一个新模型，保留最终测试 F1 最高的那个
    （F1 相同比测试损失，再相同取较小的种子）。
    """
    if test is None:
        train, test = holdout_split(dataset, config.test_fraction, config.seed)
    else:
        train = dataset
    config.validate(len(train))
    # 训练前先检查形状，避免跑到一半才失败
    preset(preset_name, seed=None).infer_shapes(train.sample_shape)

    graphs, records, metrics, seeds = [], [], [], []
    for r in range(config.restarts):
        seed = config.seed + r
        logger.info(f"{WAIT_ICON} {preset_name} restart {r + 1}/{config.restarts} (seed {seed})")
        graph = preset(preset_name, seed=seed)
        record = train_graph(graph, train, test, config, seed, label=f"{preset_name}_restart{r}")
        final = evaluate(graph, test)
        logger.info(f"{SUCCESS_ICON} restart {r}: test F1 {final.f1:.4f}, test loss {final.loss:.4f}")
        graphs.append(graph)
        records.append(record)
        metrics.append(final)
        seeds.append(seed)

    best = min(range(len(graphs)), key=lambda i: (-metrics[i].f1, metrics[i].loss, seeds[i]))
    logger.info(f"{SUCCESS_ICON} best restart {best} (seed {seeds[best]}), F1 {metrics[best].f1:.4f}")
    return ClassicalResult(graphs[best], records, metrics, seeds, best)


def prefix_features(hybrid: HybridModel, images: np.ndarray) -> np.ndarray:
    return _chunked(hybrid.features, images)


def train_qtl(hybrid: HybridModel, dataset: Dataset, config: TrainConfig,
              test: Optional[Dataset] = None, seed: Optional[int] = None,
              features: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              label: str = "") -> ConvergenceRecord:
    """
    Fine-tune only the dressed head. With cache_features the frozen prefix is
    evaluated once per run; features may also be handed in precomputed as
    (train, test) arrays.
    """
    hybrid.check_frozen()
    if test is None:
        train, test = holdout_split(dataset, config.test_fraction, config.seed)
    else:
        train = dataset
    seed = config.seed if seed is None else seed
    record = ConvergenceRecord(label=label or f"{hybrid.plan.source}_{hybrid.plan.preset}")
    if config.epochs == 0:
        return record
    config.validate(len(train))

    if features is not None:
        train_x, test_x = features
    elif config.cache_features:
        train_x, test_x = prefix_features(hybrid, train.images), prefix_features(hybrid, test.images)
    else:
        train_x = test_x = None
    # 外部传入的特征必须和切分后的样本数一致
    if train_x is not None and (len(train_x) != len(train) or len(test_x) != len(test)):
        raise ShapeError("precomputed features do not match the train/test sizes")

    head = hybrid.head
    rng = np.random.default_rng(seed)
    state = AdamState(learning_rate=config.learning_rate)
    for epoch in range(1, config.epochs + 1):
        started = time.time()
        total = 0.0
        for idx in _batches(rng, len(train), config.batch_size):
            x = train_x[idx] if train_x is not None else hybrid.features(train.images[idx])
            probs, tape = dqn_forward(head, x)
            loss, grad = cross_entropy_batch(probs, train.labels[idx])
            grads, _ = dqn_backward(head, tape, grad)
            updated, state = adam_step(head.params, grads, state)
            head.set_params(updated)
            total += loss * len(idx)
        if test_x is not None:
            probs, _ = dqn_forward(head, test_x)
            test_metrics = metrics_from_probs(probs, test.labels)
        else:
            test_metrics = evaluate(hybrid, test)
        record.append(epoch, total / len(train), test_metrics.loss, test_metrics.accuracy)
        logger.info(f"{record.label} epoch {epoch}/{config.epochs}: loss {total / len(train):.4f}, "
                    f"test loss {test_metrics.loss:.4f}, test acc {test_metrics.accuracy:.4f} "
                    f"({time.time() - started:.1f}s)")
    return record


@singledispatch
def fit(model: Any, train: Dataset, test: Dataset, config: TrainConfig, seed: int,
        label: str = "", features=None) -> ConvergenceRecord:
    """没有训练规则的模型按原样评估"""
    return ConvergenceRecord(label=label)


@fit.register
def _(model: LayerGraph, train, test, config, seed, label="", features=None):
    return train_graph(model, train, test, config, seed, label)


@fit.register
def _(model: HybridModel, train, test, config, seed, label="", features=None):
    return train_qtl(model, train, config, test=test, seed=seed, features=features, label=label)


@dataclass
class CvResult:
    metrics: List[Metrics]
    records: List[ConvergenceRecord]
    summary: Dict[str, Dict[str, float]]
    models: List[Any] = field(default_factory=list, repr=False)

    @property
    def mean_f1(self) -> float:
        return self.summary["f1"]["mean"]


def _same_prefix(models: List[Any]) -> bool:
    if not models or not all(isinstance(m, HybridModel) for m in models):
        return False
    first = models[0].frozen_prefix.params
    return all(
        m.frozen_prefix.params.keys() == first.keys()
        and all(np.array_equal(m.frozen_prefix.params[k], first[k]) for k in first)
        for m in models[1:]
    )


def cross_validate(model_builder: Callable[[int], Any], dataset: Dataset, k: int,
                   config: TrainConfig) -> CvResult:
    """
    For fold i, build a fresh model with seed+i, train on the other folds and
    evaluate on fold i. Folds may run in a thread pool; results are reduced
    in fold order.
    """
    split = kfold_split(dataset, k, config.seed)
    models = [model_builder(config.seed + i) for i in range(k)]

    # 冻结前缀相同时，整个数据集的前缀特征只算一次
    cached = None
    if config.cache_features and _same_prefix(models):
        logger.info(f"{WAIT_ICON} caching prefix activations for {len(dataset)} samples")
        cached = prefix_features(models[0], dataset.images)

    def run_fold(i: int) -> Tuple[Metrics, ConvergenceRecord]:
        train_idx, test_idx = split.train_test(i)
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        features = (cached[train_idx], cached[test_idx]) if cached is not None else None
        record = fit(models[i], train, test, config, config.seed + i, label=f"fold{i}", features=features)
        if cached is not None:
            probs, _ = dqn_forward(models[i].head, cached[test_idx])
            metrics = metrics_from_probs(probs, test.labels)
        else:
            metrics = evaluate(models[i], test)
        logger.info(f"{SUCCESS_ICON} fold {i + 1}/{k}: F1 {metrics.f1:.4f}, acc {metrics.accuracy:.4f}")
        return metrics, record

    results: Dict[int, Tuple[Metrics, ConvergenceRecord]] = {}
    if config.workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as executor:
            futures = {executor.submit(run_fold, i): i for i in range(k)}
            for future in concurrent.futures.as_completed(futures):
                i = futures[future]
                try:
                    results[i] = future.result()
                except Exception as e:
                    logger.error(f"{ERROR_ICON} fold {i} failed: {e}")
                    raise
    else:
        for i in range(k):
            results[i] = run_fold(i)

    metrics = [results[i][0] for i in range(k)]
    records = [results[i][1] for i in range(k)]
    summary = summarize([m.to_dict() for m in metrics], METRIC_FIELDS)
    logger.info(f"{SUCCESS_ICON} {k}-fold mean F1 {summary['f1']['mean']:.4f} "
                f"(std {summary['f1']['std']:.4f})")
    return CvResult(metrics, records, summary, models)


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    values = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **values)
