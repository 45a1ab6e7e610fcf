import json

import numpy as np
import pytest

from tests.conftest import object_set
from vesicle.evaluation import PRCurve, operating_point
from vesicle.exceptions import ParameterError, PlottingException
from vesicle.fusion import FusionParams
from vesicle.vesicles import VesicleSet
from vesicle.viz import OVERLAY_COLORS, render_overlay
from vesicle.volume import VoxelGrid

DIMS = (8, 6, 2)


def gray_em(value=100):
    nx, ny, nz = DIMS
    return VoxelGrid(np.full((nz, ny, nx), value, dtype=np.uint8))


def test_render_overlay_colours(tmp_path):
    truth = object_set([((0, 0, 0), (3, 1, 0))], DIMS)
    detections = object_set([((2, 0, 0), (5, 1, 0))], DIMS)
    vesicles = VesicleSet([(7, 5, 0), (7, 5, 1)])
    path = str(tmp_path / "slice.png")

    image = render_overlay(gray_em(), 0, truth, detections, vesicles, path=path)
    assert image.shape == (6, 8, 3)
    assert tuple(image[0, 0]) == OVERLAY_COLORS["truth"]
    assert tuple(image[0, 2]) == OVERLAY_COLORS["overlap"]
    assert tuple(image[1, 5]) == OVERLAY_COLORS["detection"]
    assert tuple(image[5, 7]) == OVERLAY_COLORS["vesicle"]
    assert tuple(image[4, 0]) == (100, 100, 100)

    from PIL import Image

    with Image.open(path) as img:
        assert img.size == (8, 6)
        assert np.array_equal(np.asarray(img.convert("RGB")), image)


def test_render_overlay_alpha():
    truth = object_set([((0, 0, 1), (0, 0, 1))], DIMS)
    image = render_overlay(gray_em(100), 1, truth=truth, alpha=0.5)
    assert tuple(image[0, 0]) == (50, 178, 50)
    # other slices are left untouched
    assert (render_overlay(gray_em(100), 0, truth=truth) == 100).all()


def test_render_overlay_validation():
    em = gray_em()
    with pytest.raises(ParameterError):
        render_overlay(em, 2)
    with pytest.raises(ParameterError):
        render_overlay(em, 0, alpha=1.5)
    with pytest.raises(ParameterError):
        render_overlay(em, 0, truth=object_set([], (4, 4, 4)))


def test_plot_pr_curve(tmp_path):
    pytest.importorskip("altair")

    from vesicle.viz import plot_pr_curve

    forest = PRCurve(
        [operating_point(8, 2, 1, FusionParams(0.5)), operating_point(6, 0, 3, FusionParams(0.8))]
    )
    baseline = PRCurve([operating_point(5, 5, 4, FusionParams(0.5, min3d=1000))])

    chart = plot_pr_curve(forest, title="my title", width=300)
    assert chart.title == "my title"
    assert chart.width == 300
    assert chart.mark.type == "circle"
    assert chart.data["recall"].tolist() == [8 / 9.0, 6 / 9.0]
    assert set(chart.data["method"]) == {"detections"}

    path = str(tmp_path / "pr.json")
    both = plot_pr_curve({"forest": forest, "baseline": baseline}, path=path)
    assert len(both.data) == 3
    assert set(both.data["method"]) == {"forest", "baseline"}
    with open(path) as fp:
        assert "mark" in json.load(fp)

    with pytest.raises(PlottingException):
        plot_pr_curve({})
