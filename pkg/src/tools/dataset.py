"""
Binary surface-defect datasets: assembly, standardization, splits, a
synthetic generator and the QTLD cache format.
"""
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import cv2
import numpy as np

from src.errors import ConfigError, DatasetError
from src.tools.annotations import AnnotatedImage, mine_normal_patches
from src.tools.files import atomic_write
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, setup_logger

logger = setup_logger("dataset")

NORMAL, ANOMALOUS = 0, 1
NEU_DET_CLASSES = ("crazing", "inclusion", "patches", "pitted_surface", "rolled-in_scale", "scratches")
DEFAULT_DROPPED = ("pitted_surface", "crazing")

QTLD_MAGIC = b"QTLD"
QTLD_VERSION = 1
QTLD_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("count", "<u4"),
    ("height", "<u4"),
    ("width", "<u4"),
    ("mean", "<f8"),
    ("std", "<f8"),
])


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray      # (N, 1, H, W) standardized float64
    labels: np.ndarray      # (N,) 0 = normal, 1 = anomalous
    mean: float
    std: float

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DatasetError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and not np.isin(self.labels, (NORMAL, ANOMALOUS)).all():
            raise DatasetError("labels must be binary")
        if not (math.isfinite(self.mean) and math.isfinite(self.std) and self.std > 0):
            raise DatasetError(f"invalid standardization stats mean={self.mean}, std={self.std}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> Dict[int, int]:
        return {label: int(np.sum(self.labels == label)) for label in (NORMAL, ANOMALOUS)}

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.mean, self.std)

    def summary(self) -> Dict[str, object]:
        counts = self.class_counts()
        return {
            "count": len(self),
            "normal": counts[NORMAL],
            "anomalous": counts[ANOMALOUS],
            "shape": list(self.sample_shape),
            "mean": self.mean,
            "std": self.std,
        }


def standardize(raw: np.ndarray, labels: np.ndarray) -> Dataset:
    """对整个数据集做同一个仿射变换：(x - mean) / std"""
    raw = np.asarray(raw, dtype=np.float64)
    mean = float(raw.mean())
    std = float(raw.std())
    if std <= 0:
        raise DatasetError("dataset has zero pixel variance")
    return Dataset((raw - mean) / std, np.asarray(labels, dtype=np.int64), mean, std)


def destandardize(dataset: Dataset) -> np.ndarray:
    return dataset.images * dataset.std + dataset.mean


def build_binary_dataset(images: Sequence[AnnotatedImage], dropped_classes: Sequence[str] = DEFAULT_DROPPED,
                         seed: int = 0, target_size: int = 200, min_patch: int = 32) -> Dataset:
    """
    异常样本取保留类别的全部图像；正常样本从挖出的无缺陷切片中随机抽同样多。
    """
    known = set(NEU_DET_CLASSES) | {image.class_label for image in images}
    unknown = [name for name in dropped_classes if name not in known]
    if unknown:
        raise ConfigError(f"unknown defect classes {unknown}; known: {sorted(known)}")

    dropped = set(dropped_classes)
    anomalous = [image for image in images if image.class_label not in dropped]
    if not anomalous:
        raise DatasetError("no images left after dropping classes")
    patches = mine_normal_patches(images, target_size=target_size, min_patch=min_patch, seed=seed)
    if len(patches) < len(anomalous):
        raise DatasetError(
            f"need {len(anomalous)} normal patches, mined only {len(patches)} "
            f"(shortfall {len(anomalous) - len(patches)})")

    # 切片不够时在上面已经报错，这里一定能无放回抽够
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(patches), size=len(anomalous), replace=False)
    rasters = [patches[i].pixels for i in sorted(chosen)]
    for image in anomalous:
        pixels = image.pixels
        if pixels.shape != (target_size, target_size):
            pixels = cv2.resize(pixels, (target_size, target_size), interpolation=cv2.INTER_LINEAR)
        rasters.append(pixels)
    labels = [NORMAL] * len(anomalous) + [ANOMALOUS] * len(anomalous)

    order = rng.permutation(len(labels))
    raw = np.stack(rasters).astype(np.float64)[order][:, None, :, :]
    dataset = standardize(raw, np.asarray(labels)[order])
    logger.info(f"{SUCCESS_ICON} binary dataset: {len(anomalous)} anomalous + {len(anomalous)} normal "
                f"(dropped {sorted(dropped)})")
    return dataset


def _class_quotas(counts: Sequence[int], total: int) -> List[int]:
    """Split total across classes proportionally; largest remainder, ties to the lower label."""
    n = sum(counts)
    exact = [total * c / n for c in counts]
    quotas = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[:total - sum(quotas)]:
        quotas[i] += 1
    return quotas


def holdout_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """分层切分，测试集样本数为 round_half_up(n * test_fraction)"""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(math.floor(n * test_fraction + 0.5))
    if not 0 < n_test < n:
        raise ConfigError(f"test_fraction {test_fraction} leaves an empty side for {n} samples")

    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    classes = [NORMAL, ANOMALOUS]
    quotas = _class_quotas([int(np.sum(labels == c)) for c in classes], n_test)
    test_idx = []
    for c, quota in zip(classes, quotas):
        members = np.flatnonzero(labels == c)
        test_idx.extend(rng.permutation(members)[:quota].tolist())
    test_idx = np.sort(np.asarray(test_idx, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return dataset.subset(train_idx), dataset.subset(test_idx)


@dataclass(frozen=True)
class FoldSplit:
    folds: Tuple[np.ndarray, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def sizes(self) -> List[int]:
        return [len(f) for f in self.folds]

    def train_test(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= i < self.k:
            raise ConfigError(f"fold index {i} out of range for k={self.k}")
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, self.folds[i]


def kfold_split(dataset: Dataset, k: int = 6, seed: int = 0) -> FoldSplit:
    """
    分层 k 折：每类样本打乱后轮流发到各折，折指针跨类别接着走。
    """
    n = len(dataset)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    buckets: List[List[int]] = [[] for _ in range(k)]
    pointer = 0
    for c in (NORMAL, ANOMALOUS):
        for idx in rng.permutation(np.flatnonzero(labels == c)):
            buckets[pointer % k].append(int(idx))
            pointer += 1
    return FoldSplit(tuple(np.sort(np.asarray(b, dtype=np.int64)) for b in buckets), seed)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = cv2.GaussianBlur(rng.normal(0.0, 1.0, (size, size)), (0, 0), sigmaX=max(size / 16.0, 1.0))
    return 0.5 + 0.05 * noise / (noise.std() + 1e-12)


def _blob(rng: np.random.Generator, size: int) -> np.ndarray:
    jitter = size / 10.0
    cy, cx = size / 2.0 + rng.uniform(-jitter, jitter, size=2)
    sigma = size / 6.0
    yy, xx = np.mgrid[0:size, 0:size]
    return 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def _scratch(rng: np.random.Generator, size: int) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=np.float32)
    angle = rng.uniform(0.0, math.pi)
    half = size / 3.0
    c = size / 2.0 + rng.uniform(-size / 10.0, size / 10.0, size=2)
    p0 = (int(round(c[0] - half * math.cos(angle))), int(round(c[1] - half * math.sin(angle))))
    p1 = (int(round(c[0] + half * math.cos(angle))), int(round(c[1] + half * math.sin(angle))))
    cv2.line(canvas, p0, p1, color=0.8, thickness=max(1, size // 16))
    return cv2.GaussianBlur(canvas, (0, 0), sigmaX=0.8).astype(np.float64)


SYNTH_DEFECTS = {"blob": _blob, "scratch": _scratch}


def synth_dataset(n_per_class: int = 100, image_size: int = 32, seed: int = 0,
                  defect: str = "blob") -> Dataset:
    """
    正常样本是平滑的随机纹理；异常样本在同类纹理上于中心附近叠加一个高对比度图元。
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")
    if defect not in SYNTH_DEFECTS:
        raise ConfigError(f"unknown synthetic defect {defect!r}; expected one of {list(SYNTH_DEFECTS)}")
    rng = np.random.default_rng(seed)
    raw, labels = [], []
    for label in (NORMAL, ANOMALOUS):
        for _ in range(n_per_class):
            img = _texture(rng, image_size)
            if label == ANOMALOUS:
                img = img + SYNTH_DEFECTS[defect](rng, image_size)
            raw.append(img)
            labels.append(label)
    order = rng.permutation(len(labels))
    raw = np.stack(raw)[order][:, None, :, :]
    return standardize(raw, np.asarray(labels)[order])


def _record_dtype(height: int, width: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("pixels", "<f8", (height, width))])


def save_dataset(dataset: Dataset, path: str) -> str:
    count, _, height, width = dataset.images.shape
    header = np.zeros(1, dtype=QTLD_HEADER)
    header[0] = (QTLD_MAGIC, QTLD_VERSION, count, height, width, dataset.mean, dataset.std)
    records = np.zeros(count, dtype=_record_dtype(height, width))
    records["label"] = dataset.labels
    records["pixels"] = dataset.images[:, 0]
    target = atomic_write(path, header.tobytes() + records.tobytes())
    logger.info(f"{SUCCESS_ICON} wrote {count} samples to {target}")
    return target


def load_dataset(path: str) -> Dataset:
    if not os.path.isfile(path):
        raise DatasetError(f"dataset cache not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < QTLD_HEADER.itemsize:
        raise DatasetError(f"{path}: truncated header")
    header = np.frombuffer(blob, dtype=QTLD_HEADER, count=1)[0]
    if bytes(header["magic"]) != QTLD_MAGIC:
        raise DatasetError(f"{path}: not a QTLD file (magic {bytes(header['magic'])!r})")
    if int(header["version"]) != QTLD_VERSION:
        raise DatasetError(f"{path}: QTLD version {int(header['version'])}, expected {QTLD_VERSION}")
    count, height, width = int(header["count"]), int(header["height"]), int(header["width"])
    record = _record_dtype(height, width)
    expected = QTLD_HEADER.itemsize + count * record.itemsize
    if len(blob) != expected:
        logger.error(f"{ERROR_ICON} {path}: {len(blob)} bytes, expected {expected}")
        raise DatasetError(f"{path}: size {len(blob)} does not match {count} samples of {height}x{width}")
    records = np.frombuffer(blob, dtype=record, count=count, offset=QTLD_HEADER.itemsize)
    images = np.array(records["pixels"], dtype=np.float64)[:, None, :, :]
    labels = np.array(records["label"], dtype=np.int64)
    return Dataset(images, labels, float(header["mean"]), float(header["std"]))
