import os

import cv2
import numpy as np
import pytest

from src.errors import ConfigError, DatasetError
from src.tools.annotations import (
    AnnotatedImage,
    convert_jpeg_dir,
    load_annotated_dir,
    load_neu_det,
    mine_normal_patches,
    read_gray,
    rect_hits_box,
    sample_free_rects,
)

XML = """<annotation>
  <filename>{stem}.jpg</filename>
  <size><width>{w}</width><height>{h}</height><depth>1</depth></size>
{objects}</annotation>
"""
OBJECT = """  <object>
    <name>{name}</name>
    <bndbox><xmin>{0}</xmin><ymin>{1}</ymin><xmax>{2}</xmax><ymax>{3}</ymax></bndbox>
  </object>
"""


def write_pair(images_dir, annotations_dir, stem, boxes, name="inclusion", size=200, seed=0):
    pixels = np.random.default_rng(seed).integers(0, 256, size=(size, size), dtype=np.uint8)
    assert cv2.imwrite(os.path.join(images_dir, stem + ".pgm"), pixels)
    objects = "".join(OBJECT.format(*box, name=name) for box in boxes)
    with open(os.path.join(annotations_dir, stem + ".xml"), "w") as f:
        f.write(XML.format(stem=stem, w=size, h=size, objects=objects))
    return pixels


@pytest.fixture
def neu_root(tmp_path):
    images, annotations = tmp_path / "IMAGES", tmp_path / "ANNOTATIONS"
    images.mkdir()
    annotations.mkdir()
    write_pair(str(images), str(annotations), "inclusion_1", [(50, 60, 120, 140)], seed=1)
    write_pair(str(images), str(annotations), "patches_2", [(0, 0, 30, 30), (100, 100, 199, 199)],
               name="patches", seed=2)
    write_pair(str(images), str(annotations), "scratches_3", [(10, 10, 200, 20)], name="scratches", seed=3)
    return tmp_path


def test_loads_valid_pairs(neu_root):
    images, report = load_neu_det(str(neu_root))
    assert report.loaded == 3 and not report.errors
    by_name = {image.name: image for image in images}
    assert by_name["inclusion_1"].boxes == [(50, 60, 120, 140)]
    assert by_name["patches_2"].class_label == "patches"
    assert by_name["inclusion_1"].pixels.shape == (200, 200)
    assert by_name["inclusion_1"].pixels.dtype == np.uint8


def test_pixels_survive_pgm(neu_root):
    images, _ = load_neu_det(str(neu_root))
    expected = np.random.default_rng(1).integers(0, 256, size=(200, 200), dtype=np.uint8)
    np.testing.assert_array_equal(images[0].pixels, expected)


def test_bad_files_go_to_report(neu_root):
    images_dir, annotations_dir = str(neu_root / "IMAGES"), str(neu_root / "ANNOTATIONS")
    write_pair(images_dir, annotations_dir, "inclusion_4", [(150, 10, 201, 50)])
    write_pair(images_dir, annotations_dir, "inclusion_5", [(10, 10, 20, 20)])
    os.remove(os.path.join(annotations_dir, "inclusion_5.xml"))
    write_pair(images_dir, annotations_dir, "inclusion_6", [(10, 10, 20, 20)])
    with open(os.path.join(annotations_dir, "inclusion_6.xml"), "w") as f:
        f.write("<annotation><object>")
    with open(os.path.join(images_dir, "inclusion_7.pgm"), "wb") as f:
        f.write(b"not a raster")
    write_pair(images_dir, annotations_dir, "inclusion_8", [(30, 10, 20, 20)])

    images, report = load_annotated_dir(images_dir, annotations_dir)
    assert report.loaded == 3 == len(images)
    rejected = dict(report.errors)
    assert set(rejected) == {"inclusion_4.pgm", "inclusion_5.pgm", "inclusion_6.pgm",
                             "inclusion_7.pgm", "inclusion_8.pgm"}
    assert "outside" in rejected["inclusion_4.pgm"]
    assert rejected["inclusion_5.pgm"] == "missing annotation"
    assert "malformed XML" in rejected["inclusion_6.pgm"]
    assert "degenerate" in rejected["inclusion_8.pgm"]
    assert list(report.to_frame().columns) == ["file", "reason"]


def test_empty_or_missing_directory(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    with pytest.raises(DatasetError, match="no .pgm"):
        load_annotated_dir(str(tmp_path / "a"), str(tmp_path / "b"))
    with pytest.raises(DatasetError, match="not found"):
        load_annotated_dir(str(tmp_path / "nope"), str(tmp_path / "b"))


def test_label_falls_back_to_file_name(tmp_path):
    write_pair(str(tmp_path), str(tmp_path), "rolled-in_scale_12", [])
    images, _ = load_annotated_dir(str(tmp_path), str(tmp_path))
    assert images[0].class_label == "rolled-in_scale"
    assert images[0].boxes == []


def test_color_raster_uses_luminance(tmp_path):
    bgr = np.zeros((4, 4, 3), dtype=np.uint8)
    bgr[...] = (10, 200, 50)
    path = str(tmp_path / "color.png")
    assert cv2.imwrite(path, bgr)
    gray = read_gray(path)
    assert gray.shape == (4, 4)
    assert np.all(np.abs(gray.astype(int) - round(0.299 * 50 + 0.587 * 200 + 0.114 * 10)) <= 1)


def test_convert_jpeg_dir(tmp_path):
    src = tmp_path / "jpg"
    src.mkdir()
    for i in range(2):
        img = np.full((20, 30, 3), 40 * (i + 1), dtype=np.uint8)
        assert cv2.imwrite(str(src / f"crazing_{i}.jpg"), img)
    written = convert_jpeg_dir(str(src), str(tmp_path / "pgm"))
    assert [os.path.basename(p) for p in written] == ["crazing_0.pgm", "crazing_1.pgm"]
    pixels = read_gray(written[0])
    assert pixels.shape == (20, 30)
    with pytest.raises(DatasetError):
        convert_jpeg_dir(str(tmp_path / "pgm"))


def test_box_validation():
    pixels = np.zeros((10, 10), dtype=np.uint8)
    AnnotatedImage("edge", pixels, [(0, 0, 10, 10)], "inclusion")
    with pytest.raises(DatasetError):
        AnnotatedImage("wide", pixels, [(0, 0, 11, 5)], "inclusion")
    with pytest.raises(DatasetError):
        AnnotatedImage("flat", pixels, [(3, 4, 3, 8)], "inclusion")


def test_rect_box_convention():
    # half-open rectangle against a closed box
    assert not rect_hits_box((0, 0, 10, 10), (10, 0, 20, 5))
    assert rect_hits_box((0, 0, 11, 10), (10, 0, 20, 5))
    assert not rect_hits_box((21, 0, 30, 5), (10, 0, 20, 5))
    assert rect_hits_box((20, 5, 30, 6), (10, 0, 20, 5))


def test_unboxed_image_yields_full_frame():
    pixels = np.arange(48 * 64, dtype=np.uint32).reshape(48, 64).astype(np.uint8)
    image = AnnotatedImage("clean", pixels, [], "inclusion")
    patches = mine_normal_patches([image], target_size=32, min_patch=8)
    assert len(patches) == 1
    assert patches[0].rect == (0, 0, 64, 48)
    expected = cv2.resize(pixels, (32, 32), interpolation=cv2.INTER_LINEAR)
    np.testing.assert_array_equal(patches[0].pixels, expected)


def test_covered_image_yields_nothing():
    image = AnnotatedImage("covered", np.zeros((40, 40), dtype=np.uint8),
                           [(0, 0, 20, 39), (20, 0, 39, 39)], "patches")
    assert mine_normal_patches([image], target_size=40, min_patch=8) == []


def test_mined_patches_never_touch_boxes():
    rng = np.random.default_rng(0)
    images = []
    for i in range(50):
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = (int(v) for v in rng.integers(0, 150, size=2))
            boxes.append((x0, y0, x0 + int(rng.integers(5, 50)), y0 + int(rng.integers(5, 50))))
        images.append(AnnotatedImage(f"img_{i}", rng.integers(0, 256, (200, 200), dtype=np.uint8),
                                     boxes, "inclusion"))
    patches = mine_normal_patches(images, target_size=200, min_patch=32, seed=4)
    assert len(patches) >= 40
    by_name = {image.name: image for image in images}
    for patch in patches:
        x0, y0, x1, y1 = patch.rect
        assert x1 - x0 >= 32 and y1 - y0 >= 32
        mask = np.zeros((200, 200), dtype=bool)
        mask[y0:y1, x0:x1] = True
        for xmin, ymin, xmax, ymax in by_name[patch.source].boxes:
            assert not mask[ymin:ymax + 1, xmin:xmax + 1].any()
        assert patch.pixels.shape == (200, 200)
    again = mine_normal_patches(images, target_size=200, min_patch=32, seed=4)
    assert [p.rect for p in again] == [p.rect for p in patches]


def test_patch_limits():
    image = AnnotatedImage("one", np.zeros((100, 100), dtype=np.uint8), [(0, 0, 5, 5)], "inclusion")
    rects = sample_free_rects(image, np.random.default_rng(1), min_patch=16)
    assert 0 < len(rects) <= 4
    with pytest.raises(ConfigError):
        mine_normal_patches([image], target_size=16, min_patch=32)
