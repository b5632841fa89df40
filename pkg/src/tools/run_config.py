"""
运行配置：用 python-dotenv 读取的 KEY=VALUE 文本文件。

按键名前缀分组（DATASET_、MODEL_、QTL_、VQC_、TRAIN_、OUTPUT_），
所有键都可省略，未设置时取默认值。
"""
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Tuple

from dotenv import dotenv_values

from src.errors import ConfigError
from src.quantum.vqc import VqcConfig
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, setup_logger
from src.trainer import TrainConfig, with_overrides

logger = setup_logger("run_config")

DATASET_SOURCES = ("synthetic", "cache", "neu-det")


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _names(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


# 配置键 -> (字段名, 解析函数)
_KEYS: Dict[str, Tuple[str, Callable[[str], object]]] = {
    "DATASET_SOURCE": ("dataset_source", str),
    "DATASET_PATH": ("dataset_path", str),
    "DATASET_N_PER_CLASS": ("n_per_class", int),
    "DATASET_IMAGE_SIZE": ("image_size", int),
    "DATASET_DEFECT": ("synthetic_defect", str),
    "DATASET_DROPPED": ("dropped_classes", _names),
    "DATASET_TARGET_SIZE": ("target_size", int),
    "DATASET_MIN_PATCH": ("min_patch", int),
    "DATASET_CACHE": ("dataset_cache", str),
    "MODEL_PRESET": ("model_preset", str),
    "MODEL_CHECKPOINT": ("model_checkpoint", str),
    "QTL_PRESET": ("qtl_preset", str),
    "QTL_WIDTH": ("qtl_width", int),
    "QTL_FOLDS": ("folds", int),
    "QTL_CV_SOURCE": ("cv_source", str),
    "VQC_QUBITS": ("vqc_qubits", int),
    "VQC_LAYERS": ("vqc_layers", int),
    "VQC_RANGES": ("vqc_ranges", _ints),
    "VQC_HADAMARD": ("vqc_hadamard", _bool),
    "VQC_INPUT_SCALE": ("vqc_input_scale", float),
    "VQC_OUTPUT_ACTIVATION": ("vqc_output_activation", str),
    "TRAIN_BATCH_SIZE": ("batch_size", int),
    "TRAIN_EPOCHS": ("epochs", int),
    "TRAIN_LEARNING_RATE": ("learning_rate", float),
    "TRAIN_SEED": ("seed", int),
    "TRAIN_RESTARTS": ("restarts", int),
    "TRAIN_NORMALIZE_LOSS": ("normalize_loss", _bool),
    "TRAIN_TEST_FRACTION": ("test_fraction", float),
    "TRAIN_WORKERS": ("workers", int),
    "TRAIN_CACHE_FEATURES": ("cache_features", _bool),
    "OUTPUT_DIR": ("output_dir", str),
}

_TRAIN_FIELDS = ("batch_size", "epochs", "learning_rate", "seed", "restarts", "normalize_loss",
                 "test_fraction", "workers", "cache_features")
# 路径类字段不进哈希，同一配置换个目录跑出的文件逐字节相同
_UNHASHED = ("source_file", "output_dir", "dataset_path", "dataset_cache", "model_checkpoint")


@dataclass
class RunConfig:
    dataset_source: str = "synthetic"
    dataset_path: Optional[str] = None
    n_per_class: int = 100
    image_size: int = 32
    synthetic_defect: str = "blob"
    dropped_classes: Tuple[str, ...] = ("pitted_surface", "crazing")
    target_size: int = 200
    min_patch: int = 32
    dataset_cache: Optional[str] = None
    model_preset: str = "CM-2"
    model_checkpoint: Optional[str] = None
    qtl_preset: str = "QTL-M-3"
    qtl_width: Optional[int] = None
    folds: int = 6
    cv_source: str = "full"
    vqc_qubits: int = 5
    vqc_layers: int = 3
    vqc_ranges: Optional[Tuple[int, ...]] = None
    vqc_hadamard: bool = True
    vqc_input_scale: float = math.pi / 2
    vqc_output_activation: str = "none"
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    seed: Optional[int] = None
    restarts: Optional[int] = None
    normalize_loss: Optional[bool] = None
    test_fraction: Optional[float] = None
    workers: Optional[int] = None
    cache_features: Optional[bool] = None
    output_dir: str = "runs"
    source_file: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.dataset_source not in DATASET_SOURCES:
            raise ConfigError(f"DATASET_SOURCE must be one of {DATASET_SOURCES}, got {self.dataset_source!r}")
        if self.cv_source not in ("full", "train"):
            raise ConfigError(f"QTL_CV_SOURCE must be 'full' or 'train', got {self.cv_source!r}")

    def vqc_config(self) -> VqcConfig:
        return VqcConfig(
            n_qubits=self.vqc_qubits,
            n_layers=self.vqc_layers,
            ranges=self.vqc_ranges,
            hadamard_prefix=self.vqc_hadamard,
            input_scale=self.vqc_input_scale,
            output_activation=self.vqc_output_activation,
        )

    def train_config(self, kind: str) -> TrainConfig:
        """Defaults for 'classical' or 'hybrid', overridden by any set TRAIN_ key."""
        if kind not in ("classical", "hybrid"):
            raise ConfigError(f"unknown training kind {kind!r}")
        base = TrainConfig.classical() if kind == "classical" else TrainConfig.hybrid()
        return with_overrides(base, **{name: getattr(self, name) for name in _TRAIN_FIELDS})

    def validate_paths(self, need_checkpoint: bool = False) -> None:
        """开始计算前检查所有引用的输入文件都存在"""
        if self.dataset_source in ("cache", "neu-det"):
            if not self.dataset_path:
                raise ConfigError(f"DATASET_PATH is required for source {self.dataset_source!r}")
            exists = os.path.isfile if self.dataset_source == "cache" else os.path.isdir
            if not exists(self.dataset_path):
                raise ConfigError(f"dataset path not found: {self.dataset_path}")
        if need_checkpoint:
            if not self.model_checkpoint:
                raise ConfigError("MODEL_CHECKPOINT is required")
            if not os.path.isfile(self.model_checkpoint):
                raise ConfigError(f"checkpoint not found: {self.model_checkpoint}")

    def config_hash(self) -> str:
        """影响结果的配置项的哈希，不含文件路径"""
        payload = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def parse_values(values: Dict[str, Optional[str]], source: str = "<dict>") -> RunConfig:
    unknown = sorted(k for k in values if k not in _KEYS)
    if unknown:
        logger.error(f"{ERROR_ICON} {source}: unknown keys {unknown}")
        raise ConfigError(f"{source}: unknown configuration keys {unknown}")
    kwargs = {}
    for key, raw in values.items():
        if raw is None or raw.strip() == "":
            continue
        name, parse = _KEYS[key]
        try:
            kwargs[name] = parse(raw.strip())
        except ValueError as e:
            raise ConfigError(f"{source}: invalid value for {key}: {e}") from None
    return RunConfig(source_file=None if source == "<dict>" else source, **kwargs)


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """读取运行配置文件（可选），再套用 seed、output_dir 等非 None 的覆盖项"""
    if path is None:
        config = RunConfig()
    else:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        config = parse_values(dotenv_values(path), source=path)
        logger.info(f"{SUCCESS_ICON} loaded run config {path}")
    for name, value in overrides.items():
        if value is None:
            continue
        if not hasattr(config, name):
            raise ConfigError(f"unknown override {name!r}")
        setattr(config, name, value)
    return config
