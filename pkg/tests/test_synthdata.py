import hashlib
import json

import numpy as np
import pytest

from dpl import synthdata
from dpl.synthdata import DataError, GeneratorConfig


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def balanced(tmp_path_factory):
    root = tmp_path_factory.mktemp("balanced")
    synthdata.generate_dataset(root, GeneratorConfig(num_images=200, seed=3))
    return root


def test_same_seed_byte_identical(tmp_path):
    cfg = GeneratorConfig(num_images=6, seed=7)
    synthdata.generate_dataset(tmp_path / "a", cfg)
    synthdata.generate_dataset(tmp_path / "b", cfg)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    synthdata.generate_dataset(tmp_path / "a", GeneratorConfig(num_images=3, seed=1))
    synthdata.generate_dataset(tmp_path / "b", GeneratorConfig(num_images=3, seed=2))
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "b")


def test_clean_single_object(tmp_path):
    ds = synthdata.generate_dataset(tmp_path, GeneratorConfig(num_images=5, objects=(1, 1), clutter=0, seed=0))
    gt = synthdata.load_ground_truth(tmp_path)
    for rec in ds.images:
        assert len(gt[rec.id]) == 1
        assert sum(rec.labels) == 1


def test_labels_match_boxes_and_bounds(balanced):
    ds = synthdata.load_dataset(balanced)
    gt = synthdata.load_ground_truth(balanced)
    for rec in ds.images:
        objs = gt[rec.id]
        assert objs
        y = [0] * len(ds.classes)
        for c, (lx, ly, rx, ry) in objs:
            y[c] = 1
            assert 0 <= lx < rx <= rec.width and 0 <= ly < ry <= rec.height
        assert y == rec.labels


def test_boxes_are_tight(tmp_path):
    # a clean background lets the object pixels be recovered directly
    ds = synthdata.generate_dataset(tmp_path, GeneratorConfig(num_images=4, objects=(1, 1), clutter=0, seed=5))
    gt = synthdata.load_ground_truth(tmp_path)
    for rec in ds.images:
        img = ds.load_image(rec).astype(int)
        _, (lx, ly, rx, ry) = gt[rec.id][0]
        lx, ly, rx, ry = map(int, (lx, ly, rx, ry))
        inside = img[ly:ry, lx:rx]
        # every border row/column of the box touches the shape colour
        colour = np.median(inside.reshape(-1, 3)[np.abs(inside.reshape(-1, 3) - img[0, 0]).sum(1) > 60], axis=0)
        hit = np.abs(img - colour).sum(axis=2) < 10
        assert hit[ly, lx:rx].any() and hit[ry - 1, lx:rx].any()
        assert hit[ly:ry, lx].any() and hit[ly:ry, rx - 1].any()


def test_class_balance(balanced):
    ds = synthdata.load_dataset(balanced)
    freq = ds.labels().mean(axis=0)
    assert len(ds) >= 200
    assert np.all(freq >= 0.20), freq


def test_image_format_and_shape(balanced):
    ds = synthdata.load_dataset(balanced)
    m = json.loads((balanced / "manifest.json").read_text())
    assert m["image_format"] == "png"
    rec = ds.images[0]
    img = ds.load_image(rec)
    assert img.dtype == np.uint8 and img.shape == (rec.height, rec.width, 3)


def test_manifest_has_no_boxes(balanced):
    text = (balanced / "manifest.json").read_text()
    assert '"box' not in text


@pytest.mark.parametrize("c", [0, 6, 9])
def test_too_many_classes(tmp_path, c):
    with pytest.raises(ValueError, match="num_classes"):
        synthdata.generate_dataset(tmp_path, GeneratorConfig(num_images=1, num_classes=c))


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        synthdata.load_dataset(tmp_path)


def test_bad_labels(tmp_path):
    synthdata.generate_dataset(tmp_path, GeneratorConfig(num_images=2, seed=0))
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["images"][0]["labels"] = [2, 0, 0]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="label"):
        synthdata.load_dataset(tmp_path)
