"""
Annotated surface images: PGM rasters with VOC-style bounding-box XML, plus
defect-free patch mining for the normal class.

Boxes are closed pixel intervals [xmin, xmax] x [ymin, ymax]. A patch
rectangle (x0, y0, x1, y1) covers the half-open [x0, x1) x [y0, y1).
"""
import glob
import os
import xml.etree.ElementTree as et
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from src.errors import ConfigError, DatasetError
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, WAIT_ICON, setup_logger

logger = setup_logger("annotations")

Box = Tuple[int, int, int, int]
Rect = Tuple[int, int, int, int]

IMAGE_DIR = "IMAGES"
ANNOTATION_DIR = "ANNOTATIONS"
MAX_PATCHES_PER_IMAGE = 4
MAX_ATTEMPTS = 200


@dataclass
class AnnotatedImage:
    name: str
    pixels: np.ndarray          # (H, W) uint8
    boxes: List[Box]
    class_label: str

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DatasetError(f"{self.name}: expected a grayscale raster, got shape {self.pixels.shape}")
        height, width = self.pixels.shape
        for box in self.boxes:
            xmin, ymin, xmax, ymax = box
            if not (xmin < xmax and ymin < ymax):
                raise DatasetError(f"{self.name}: degenerate box {box}")
            # 部分标注把右下角写成图像宽高，允许 xmax == width
            if xmin < 0 or ymin < 0 or xmax > width or ymax > height:
                raise DatasetError(f"{self.name}: box {box} outside {width}x{height} image")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class LoadReport:
    loaded: int = 0
    errors: List[Tuple[str, str]] = field(default_factory=list)

    def add_error(self, filename: str, reason: str) -> None:
        self.errors.append((filename, reason))
        logger.warning(f"{ERROR_ICON} {filename}: {reason}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.errors, columns=["file", "reason"])


def read_annotation(path: str) -> Tuple[List[Box], Optional[str]]:
    """读取一个 VOC 格式标注文件的框和第一个目标名"""
    root = et.parse(path).getroot()
    boxes, label = [], None
    for obj in root.iter("object"):
        name = obj.findtext("name")
        if label is None and name:
            label = name.strip()
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise DatasetError(f"object without bndbox in {os.path.basename(path)}")
        try:
            coords = tuple(int(float(bndbox.findtext(tag))) for tag in ("xmin", "ymin", "xmax", "ymax"))
        except (TypeError, ValueError):
            raise DatasetError(f"non-numeric bndbox in {os.path.basename(path)}") from None
        boxes.append(coords)
    return boxes, label


def read_gray(path: str) -> np.ndarray:
    """8-bit grayscale raster; colour inputs use 0.299R + 0.587G + 0.114B."""
    pixels = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DatasetError(f"unreadable raster {os.path.basename(path)}")
    if pixels.ndim == 3:
        pixels = cv2.cvtColor(pixels[:, :, :3], cv2.COLOR_BGR2GRAY)
    if pixels.dtype != np.uint8:
        raise DatasetError(f"{os.path.basename(path)}: expected 8-bit samples, got {pixels.dtype}")
    return pixels


def _label_from_name(stem: str) -> str:
    # NEU-DET 文件名形如 rolled-in_scale_12
    return stem.rsplit("_", 1)[0] if "_" in stem else stem


def load_annotated_dir(images_dir: str, annotations_dir: str) -> Tuple[List[AnnotatedImage], LoadReport]:
    """
    Load every *.pgm with its same-stem XML. Per-file failures go into the
    report; an empty or missing directory is an error.
    """
    for d in (images_dir, annotations_dir):
        if not os.path.isdir(d):
            raise DatasetError(f"directory not found: {d}")
    paths = sorted(glob.glob(os.path.join(images_dir, "*.pgm")))
    if not paths:
        raise DatasetError(f"no .pgm images in {images_dir}")

    logger.info(f"{WAIT_ICON} loading {len(paths)} images from {images_dir}")
    images, report = [], LoadReport()
    for path in paths:
        filename = os.path.basename(path)
        stem = os.path.splitext(filename)[0]
        xml_path = os.path.join(annotations_dir, stem + ".xml")
        if not os.path.exists(xml_path):
            report.add_error(filename, "missing annotation")
            continue
        try:
            boxes, label = read_annotation(xml_path)
            pixels = read_gray(path)
            images.append(AnnotatedImage(stem, pixels, boxes, label or _label_from_name(stem)))
        except et.ParseError as e:
            report.add_error(filename, f"malformed XML: {e}")
        except DatasetError as e:
            report.add_error(filename, str(e))
    report.loaded = len(images)
    logger.info(f"{SUCCESS_ICON} loaded {report.loaded} images, {len(report.errors)} rejected")
    return images, report


def load_neu_det(root: str) -> Tuple[List[AnnotatedImage], LoadReport]:
    return load_annotated_dir(os.path.join(root, IMAGE_DIR), os.path.join(root, ANNOTATION_DIR))


def convert_jpeg_dir(src_dir: str, dst_dir: Optional[str] = None) -> List[str]:
    """Convert *.jpg sources to 8-bit grayscale PGM (P5) next to them or into dst_dir."""
    dst_dir = dst_dir or src_dir
    os.makedirs(dst_dir, exist_ok=True)
    sources = sorted(glob.glob(os.path.join(src_dir, "*.jpg")) + glob.glob(os.path.join(src_dir, "*.jpeg")))
    if not sources:
        raise DatasetError(f"no JPEG files in {src_dir}")
    written = []
    for src in sources:
        pixels = read_gray(src)
        dst = os.path.join(dst_dir, os.path.splitext(os.path.basename(src))[0] + ".pgm")
        if not cv2.imwrite(dst, pixels):
            raise DatasetError(f"failed to write {dst}")
        written.append(dst)
    logger.info(f"{SUCCESS_ICON} converted {len(written)} JPEG files to PGM in {dst_dir}")
    return written


def rect_hits_box(rect: Rect, box: Box) -> bool:
    x0, y0, x1, y1 = rect
    xmin, ymin, xmax, ymax = box
    return x0 <= xmax and xmin < x1 and y0 <= ymax and ymin < y1


@dataclass
class NormalPatch:
    source: str
    rect: Rect
    pixels: np.ndarray          # (target, target) uint8


def sample_free_rects(image: AnnotatedImage, rng: np.random.Generator, min_patch: int,
                      max_patches: int = MAX_PATCHES_PER_IMAGE,
                      max_attempts: int = MAX_ATTEMPTS) -> List[Rect]:
    width, height = image.width, image.height
    if not image.boxes:
        return [(0, 0, width, height)]
    if width < min_patch or height < min_patch:
        return []
    rects: List[Rect] = []
    for _ in range(max_attempts):
        w = int(rng.integers(min_patch, width + 1))
        h = int(rng.integers(min_patch, height + 1))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        rect = (x0, y0, x0 + w, y0 + h)
        if not any(rect_hits_box(rect, box) for box in image.boxes):
            rects.append(rect)
            if len(rects) == max_patches:
                break
    return rects


def mine_normal_patches(images: Sequence[AnnotatedImage], target_size: int = 200,
                        min_patch: int = 32, seed: int = 0) -> List[NormalPatch]:
    """
    Crop defect-free rectangles and resize them bilinearly to target_size.

    An image without boxes yields its full frame; a fully covered image
    yields nothing.
    """
    if not target_size >= min_patch >= 1:
        raise ConfigError(f"need target_size >= min_patch >= 1, got {target_size}, {min_patch}")
    rng = np.random.default_rng(seed)
    patches = []
    for image in images:
        for rect in sample_free_rects(image, rng, min_patch):
            x0, y0, x1, y1 = rect
            crop = image.pixels[y0:y1, x0:x1]
            resized = cv2.resize(crop, (target_size, target_size), interpolation=cv2.INTER_LINEAR)
            patches.append(NormalPatch(image.name, rect, resized))
    logger.info(f"{SUCCESS_ICON} mined {len(patches)} defect-free patches from {len(images)} images")
    return patches
