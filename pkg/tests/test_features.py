import numpy as np
import pytest

from vesicle.exceptions import FormatError, ParameterError
from vesicle.features import (
    FEATURE_HALO,
    N_CHANNELS,
    THETA0,
    THETA1,
    THETA3,
    FeatureStack,
    IntegralVolume,
    KernelSpec,
    assemble_features,
    box_filter,
    feature_order_tag,
    gradient_magnitude,
    lbp_transform,
    structure_tensor_eigenvalues,
    structure_tensor_scalar,
    vesicle_distance,
    vesicle_indicator,
)
from vesicle.lib.enums import Channel, FeatureVariant
from vesicle.vesicles import VesicleSet
from vesicle.volume import BoundingBox, VoxelGrid


def test_feature_order_tag():
    assert feature_order_tag() == feature_order_tag(FeatureVariant.Full)
    assert feature_order_tag(FeatureVariant.Full) != feature_order_tag(FeatureVariant.NoVesicles)
    assert len(Channel) == N_CHANNELS == 10


def test_kernel_spec():
    assert THETA3.radius == (50, 50, 2)
    assert FEATURE_HALO[0] > THETA3.radius[0]
    with pytest.raises(ParameterError):
        KernelSpec("even", (4, 5, 1))


def test_box_filter_matches_brute_force(rng):
    data = (rng.random((5, 9, 11)) * 255).astype(np.uint8)
    grid = VoxelGrid(data)
    out = box_filter(grid, (3, 5, 3)).data

    nz, ny, nx = data.shape
    for z, y, x in [(0, 0, 0), (2, 4, 5), (4, 8, 10), (1, 0, 9)]:
        window = data[
            max(0, z - 1) : z + 2, max(0, y - 2) : y + 3, max(0, x - 1) : x + 2
        ].astype(np.float64)
        assert out[z, y, x] == pytest.approx(window.mean(), rel=1e-6)


def brute_force_box_mean(data, dims):
    kx, ky, kz = (d // 2 for d in dims)
    nz, ny, nx = data.shape
    out = np.zeros(data.shape)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                out[z, y, x] = data[
                    max(0, z - kz) : z + kz + 1,
                    max(0, y - ky) : y + ky + 1,
                    max(0, x - kx) : x + kx + 1,
                ].astype(np.float64).mean()
    return out


@pytest.mark.parametrize("dims", [THETA0.dims, (5, 5, 3), (7, 7, 1)])
def test_box_filter_oracle_on_random_grids(dims):
    rng = np.random.default_rng(17)
    for _ in range(20):
        data = rng.random((5, 9, 9)).astype(np.float32)
        out = box_filter(VoxelGrid(data), dims).data
        assert np.allclose(out, brute_force_box_mean(data, dims), rtol=0, atol=1e-5)


def test_box_filter_large_and_non_finite_values():
    constant = np.full((3, 4, 5), 1e13, dtype=np.float32)
    integral = IntegralVolume(constant)
    assert not integral.exact
    out = box_filter(VoxelGrid(constant), THETA0).data
    assert np.allclose(out, constant, rtol=1e-6)

    assert IntegralVolume(np.full((3, 4, 5), 255, dtype=np.uint8)).exact

    bad = np.zeros((2, 3, 3), dtype=np.float32)
    bad[1, 1, 1] = np.nan
    with pytest.raises(ParameterError):
        box_filter(VoxelGrid(bad), THETA0)
    bad[1, 1, 1] = np.inf
    with pytest.raises(ParameterError):
        IntegralVolume(bad)


def test_window_mean_is_position_independent(rng):
    data = (rng.random((6, 20, 24)) * 50).astype(np.float32)
    full = IntegralVolume(data).window_mean(THETA1)
    sub = IntegralVolume(data[1:6, 3:20, 4:24]).window_mean(THETA1)
    # voxels whose window lies inside the sub-volume agree bit for bit
    assert np.array_equal(full[2:4, 10:13, 11:17], sub[1:3, 7:10, 7:13])


def test_window_mean_workers_agree(rng):
    data = (rng.random((7, 12, 13)) * 255).astype(np.uint8)
    integral = IntegralVolume(data)
    assert np.array_equal(integral.window_mean(THETA1, workers=1),
                          integral.window_mean(THETA1, workers=3))


def test_lbp_transform():
    plane = np.full((3, 3), 50, dtype=np.uint8)
    plane[1, 2] = 60  # east
    plane[0, 1] = 40  # north
    codes = lbp_transform(VoxelGrid(plane[None])).data[0]
    # every neighbour of the centre but north (bit 6) is at least as bright
    assert codes[1, 1] == 255 - (1 << 6)
    # out-of-bounds neighbours count as equal: a uniform corner sees all bits set
    uniform = lbp_transform(VoxelGrid(np.full((1, 3, 3), 9, dtype=np.uint8))).data[0]
    assert (uniform == 255).all()

    with pytest.raises(ParameterError):
        lbp_transform(VoxelGrid(np.zeros((1, 3, 3), dtype=np.float32)))


def test_lbp_transform_is_translation_equivariant(rng):
    big = rng.integers(0, 256, size=(2, 24, 24), dtype=np.uint8)
    codes = lbp_transform(VoxelGrid(big)).data
    shifted = lbp_transform(VoxelGrid(big[:, 2:, 3:])).data
    # away from the borders a shifted input gives shifted codes
    assert np.array_equal(shifted[:, 1:-1, 1:-1], codes[:, 3:-1, 4:-1])


def test_gradient_magnitude():
    plane = np.zeros((1, 8, 8), dtype=np.uint8)
    plane[:, :, 4:] = 100
    grad = gradient_magnitude(VoxelGrid(plane)).data[0]
    assert grad[4, 0] == 0
    assert grad[4, 3] == pytest.approx(400.0)
    assert grad[4, 4] == pytest.approx(400.0)


def test_structure_tensor():
    yy, xx = np.mgrid[0:32, 0:32]
    stripes = (np.sin(xx / 2.0) * 100 + 120).astype(np.uint8)
    l1, l2 = structure_tensor_eigenvalues(stripes)
    assert (l1 >= l2).all()

    coherence = structure_tensor_scalar(VoxelGrid(stripes[None])).data[0]
    assert coherence.min() >= 0.0 and coherence.max() <= 1.0
    # vertical stripes are strongly oriented away from the borders
    assert coherence[16, 16] > 0.9

    flat = structure_tensor_scalar(VoxelGrid(np.full((1, 8, 8), 7, dtype=np.uint8))).data
    assert (flat == 0).all()


def test_vesicle_indicator():
    vesicles = VesicleSet([(1, 2, 0), (3, 0, 1)])
    grid = vesicle_indicator((4, 3, 2), vesicles)
    assert grid.data.sum() == 2
    assert grid.data[0, 2, 1] == 1 and grid.data[1, 0, 3] == 1

    shifted = vesicle_indicator((2, 3, 2), VesicleSet([(3, 0, 1)]), origin=(2, 0, 0))
    assert shifted.data.sum() == 1 and shifted.data[1, 0, 1] == 1

    with pytest.raises(ParameterError):
        vesicle_indicator((2, 2, 2), vesicles)


def test_vesicle_distance():
    vesicles = VesicleSet([(0, 0, 0)])
    res = (6.0, 6.0, 30.0)
    dist = vesicle_distance((4, 4, 3), res, vesicles, cap_nm=40.0).data
    assert dist[0, 0, 0] == 0
    assert dist[0, 0, 3] == pytest.approx(18.0)
    assert dist[1, 0, 0] == pytest.approx(30.0)
    assert dist[2, 0, 0] == pytest.approx(40.0)  # capped

    empty = vesicle_distance((4, 4, 3), res, VesicleSet.empty(), cap_nm=100.0).data
    assert (empty == 100.0).all()

    # a vesicle outside the sub-volume still counts
    outside = vesicle_distance((2, 2, 1), res, VesicleSet([(5, 0, 0)]), origin=(2, 0, 0)).data
    assert outside[0, 0, 0] == pytest.approx(18.0)

    with pytest.raises(ParameterError):
        vesicle_distance((2, 2, 1), res, vesicles, cap_nm=0)


def test_vesicle_distance_oracle():
    rng = np.random.default_rng(5)
    dims = (16, 16, 8)
    res = np.array([6.0, 6.0, 30.0])
    nx, ny, nz = dims
    grid = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1
    ).reshape(-1, 3)

    for _ in range(10):
        n = int(rng.integers(1, 21))
        picked = grid[rng.choice(len(grid), size=n, replace=False)]
        out = vesicle_distance(dims, tuple(res), VesicleSet(picked), workers=2).data

        diffs = (grid[:, None, :] - picked[None, :, :]) * res
        expected = np.sqrt((diffs ** 2).sum(axis=2)).min(axis=1)
        x, y, z = grid.T
        assert np.allclose(out[z, y, x], np.minimum(expected, 2000.0), rtol=0, atol=1e-3)


def test_assemble_features(blobs):
    em, _ = blobs
    vesicles = VesicleSet([(40, 40, 10), (42, 40, 10)])
    stack = assemble_features(em, vesicles)

    assert stack.dims == em.dims
    assert stack.channels.shape == (10,) + em.data.shape
    assert stack.variant == FeatureVariant.Full
    assert stack.feature_order_tag == feature_order_tag(FeatureVariant.Full)

    intensity = stack.channel(Channel.IntensityTheta0).data
    assert intensity[10, 70, 70] == pytest.approx(200.0)
    assert stack.channel(Channel.VesicleDistance).data[10, 40, 40] == 0
    assert stack.channel(Channel.VesiclesTheta2).data[10, 40, 41] > 0

    ablated = assemble_features(em, vesicles, use_vesicles=False)
    assert ablated.variant == FeatureVariant.NoVesicles
    assert (ablated.channel(Channel.VesiclesTheta3).data == 0).all()
    assert (ablated.channel(Channel.VesicleDistance).data == 2000.0).all()
    assert np.array_equal(ablated.channels[0], stack.channels[0])


def test_assemble_features_on_a_sub_volume(blobs):
    em, _ = blobs
    vesicles = VesicleSet([(40, 40, 10), (5, 5, 2)])
    full = assemble_features(em, vesicles)

    read_box = BoundingBox((0, 0, 0), (79, 71, 13))
    sub = assemble_features(em.crop(read_box), vesicles, origin=read_box.min)
    # slices far enough from the cut agree exactly
    assert np.array_equal(full.channels[:, :9], sub.channels[:, :9])


def test_assemble_features_for_a_region(blobs):
    em, _ = blobs
    vesicles = VesicleSet([(40, 40, 10), (5, 5, 2)])
    full = assemble_features(em, vesicles)

    region = BoundingBox((12, 20, 3), (50, 44, 16))
    part = assemble_features(em, vesicles, region=region)
    assert part.dims == region.shape
    assert np.array_equal(part.channels, full.channels[(slice(None),) + region.slices])

    with pytest.raises(ParameterError):
        assemble_features(em, vesicles, region=BoundingBox((0, 0, 0), (80, 0, 0)))


def test_rows(blobs):
    em, _ = blobs
    stack = assemble_features(em, VesicleSet.empty(), use_vesicles=False)
    assert stack.rows().shape == (em.size, 10)
    rows = stack.rows([0, 5])
    assert rows.shape == (2, 10)
    assert np.array_equal(rows[1], stack.channels[:, 0, 0, 5])

    mask = np.zeros(em.data.shape, dtype=bool)
    mask[3, 4, 5] = True
    assert np.array_equal(stack.rows(mask)[0], stack.channels[:, 3, 4, 5])


def test_feature_stack_save_load(tmp_path, rng):
    channels = rng.random((10, 2, 3, 4)).astype(np.float32)
    stack = FeatureStack(channels, (6.0, 6.0, 30.0), FeatureVariant.NoVesicles)
    stack.save(str(tmp_path))
    assert (tmp_path / "00_intensity_theta0.vsv").exists()
    assert (tmp_path / "manifest.json").exists()

    loaded = FeatureStack.load(str(tmp_path))
    assert np.array_equal(loaded.channels, channels)
    assert loaded.variant == FeatureVariant.NoVesicles


def test_feature_stack_load_rejects_reordered_channels(tmp_path, rng):
    import json

    FeatureStack(rng.random((10, 1, 2, 2)), (1.0, 1.0, 1.0)).save(str(tmp_path))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["channels"] = manifest["channels"][::-1]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        FeatureStack.load(str(tmp_path))


def test_feature_stack_validation():
    with pytest.raises(ParameterError):
        FeatureStack(np.zeros((9, 1, 1, 1)), (1.0, 1.0, 1.0))
    bad = np.zeros((10, 1, 1, 1))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ParameterError):
        FeatureStack(bad, (1.0, 1.0, 1.0))


def test_theta0_is_single_slice():
    assert THETA0.dims[2] == 1
