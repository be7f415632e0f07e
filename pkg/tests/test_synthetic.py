import numpy as np
import pytest

from splatseg.camera import load_cameras
from splatseg.imageio import read_pfm, read_pgm, read_ppm
from splatseg.raster import UNANNOTATED, render, render_semantic_gt
from splatseg.scene import load_ply
from splatseg.synthetic import (GT_COVERAGE, generate_synthetic_scene, make_room_scene, normalized_depth,
                                write_dataset)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic_scene(n_classes=4, count=1500, seed=3, n_views=4, width=32, height=32)


def test_deterministic_under_seed(data):
    again = generate_synthetic_scene(n_classes=4, count=1500, seed=3, n_views=4, width=32, height=32)
    assert np.array_equal(again.scene.means, data.scene.means)
    assert all(np.array_equal(a, b) for a, b in zip(again.images, data.images))
    other = make_room_scene(4, 1500, seed=4)
    assert not np.array_equal(other.means, data.scene.means)


def test_labels_and_counts(data):
    assert len(data.scene) == 1500
    assert set(np.unique(data.scene.labels).tolist()) == {0, 1, 2, 3}
    assert len(data.cameras) == len(data.images) == len(data.masks) == len(data.depths) == 4


def test_masks_equal_semantic_renderer(data):
    for cam, mask in zip(data.cameras, data.masks):
        assert np.array_equal(render_semantic_gt(data.scene, cam, 4), mask)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask).tolist()) <= {0, 1, 2, 3, UNANNOTATED}


def test_images_are_renders(data):
    # the dataset render carries one-hot class features; the matmul order differs slightly
    np.testing.assert_allclose(render(data.scene, data.cameras[2]).image, data.images[2], atol=1e-12)


def test_depth_normalised_by_coverage(data):
    out = render(data.scene, data.cameras[0])
    dep = normalized_depth(out)
    acc = 1 - out.transmittance
    ok = acc > GT_COVERAGE
    np.testing.assert_allclose(dep[ok], out.depth[ok] / acc[ok])
    assert np.all(dep[~ok] == 0)
    np.testing.assert_allclose(dep, data.depths[0], atol=1e-12)


@pytest.mark.parametrize("kw", [dict(n_classes=1), dict(n_classes=5, count=3), dict(layout="maze"),
                                dict(count=0)])
def test_bad_parameters_rejected(kw):
    with pytest.raises(ValueError):
        generate_synthetic_scene(**{"n_views": 1, "width": 16, "height": 16, **kw})


def test_written_dataset_reads_back(data, tmp_path):
    root = write_dataset(data, tmp_path / "s")
    scene = load_ply(root / "scene.ply")
    assert np.array_equal(scene.means, data.scene.means) and np.array_equal(scene.labels, data.scene.labels)
    cams = load_cameras(root / "cameras.json")
    assert len(cams) == 4
    assert np.array_equal(read_pgm(root / "masks" / "001.pgm"), data.masks[1])
    assert np.array_equal(read_pfm(root / "depth" / "002.pfm"), data.depths[2].astype(np.float32))
    img = read_ppm(root / "images" / "000.ppm")
    assert img.shape == (32, 32, 3) and np.abs(img - data.images[0]).max() <= 0.5 / 255 + 1e-12
