from click.testing import CliRunner
import numpy as np
import os
import pytest

from vesicle.features import feature_order_tag
from vesicle.forest import DecisionTree, ForestParams, RandomForestModel
from vesicle.fusion import DetectionObject, ObjectSet
from vesicle.lib.enums import FeatureVariant
from vesicle.synth import PhantomSpec, generate_phantom
from vesicle.volume import VoxelGrid, save_volume


slow = pytest.mark.skipif(
    not os.environ.get("VESICLE_SLOW_TESTS"), reason="set VESICLE_SLOW_TESTS=1 to run"
)

RESOLUTION = (6.0, 6.0, 30.0)
BACKGROUND = 200
BLOB = 40

# (x0, y0, z0) corners of 6x6x3 dark blobs; several straddle the 32x32x8 block faces
BLOB_DIMS = (80, 72, 20)
BLOB_CORNERS = [(5, 6, 2), (29, 28, 6), (60, 10, 14), (44, 60, 9), (10, 50, 15)]

# vesicle rings spaced 14 px apart in a few slices
RING_DIMS = (64, 64, 6)
RING_CENTRES = [(12, 12, 1), (26, 12, 1), (40, 12, 1), (12, 26, 1), (30, 40, 3), (44, 40, 3),
                (30, 54, 4), (44, 54, 4)]


def blob_volume(dims=BLOB_DIMS, corners=BLOB_CORNERS, side=6, depth=3):
    nx, ny, nz = dims
    data = np.full((nz, ny, nx), BACKGROUND, dtype=np.uint8)
    labels = np.zeros((nz, ny, nx), dtype=np.uint32)
    for i, (x, y, z) in enumerate(corners, 1):
        data[z : z + depth, y : y + side, x : x + side] = BLOB
        labels[z : z + depth, y : y + side, x : x + side] = i
    return VoxelGrid(data, RESOLUTION), VoxelGrid(labels, RESOLUTION)


def ring_volume(dims=RING_DIMS, centres=RING_CENTRES, radius=3.0, thickness=2.0):
    nx, ny, nz = dims
    data = np.full((nz, ny, nx), BACKGROUND, dtype=np.uint8)
    yy, xx = np.mgrid[0:ny, 0:nx]
    for x, y, z in centres:
        ring = np.abs(np.hypot(xx - x, yy - y) - radius) <= thickness / 2.0
        data[z][ring] = 70
    return VoxelGrid(data, RESOLUTION)


def threshold_model(threshold=100.0, channel=0, variant=FeatureVariant.NoVesicles):
    """One stump scoring voxels whose channel value is at most `threshold` as synapse."""
    tree = DecisionTree(
        feature=[channel, -1, -1],
        threshold=[threshold, 0.0, 0.0],
        left=[1, -1, -1],
        right=[2, -1, -1],
        value=[0.5, 1.0, 0.0],
    )
    return RandomForestModel([tree], ForestParams(n_trees=1), feature_order_tag(variant))


def box_object(id, lo, hi):
    """A DetectionObject filling the inclusive (x, y, z) box lo..hi."""
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij")
    return DetectionObject(id, np.column_stack([g.ravel() for g in grids]))


def object_set(boxes, dims):
    return ObjectSet.from_objects(
        [box_object(i, lo, hi) for i, (lo, hi) in enumerate(boxes, 1)], dims
    )


@pytest.fixture(scope="function")
def runner():
    return CliRunner()


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="function")
def blobs():
    return blob_volume()


@pytest.fixture(scope="function")
def blob_files(tmp_path, blobs):
    em, labels = blobs
    save_volume(em, str(tmp_path / "em.vsv"))
    save_volume(labels, str(tmp_path / "labels.vsv"))
    return tmp_path


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(
        PhantomSpec(dims=(128, 128, 24), resolution=(12.0, 12.0, 30.0), synapse_density=2.0,
                    seed=3)
    )
