import numpy as np
import pytest

from vesicle.exceptions import (
    ChecksumError,
    CorruptionError,
    FormatError,
    ParameterError,
    VersionError,
)
from vesicle.lib.enums import MaskProvenance, VoxelType
from vesicle.lib.files import fnv1a_64
from vesicle.volume import (
    HEADER,
    BandpassCutoffs,
    BoundingBox,
    MembraneMask,
    VoxelGrid,
    downsample_xy,
    intensity_bandpass_mask,
    label_intensities,
    load_volume,
    membrane_mask_from_probability,
    quantize_u8,
    read_header,
    save_volume,
    verify_volume,
)


def test_fnv1a_known_values():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8
    # running checksums over several buffers agree with one pass
    assert fnv1a_64(b"bar", fnv1a_64(b"foo")) == fnv1a_64(b"foobar")


def test_fnv1a_matches_the_bytewise_definition(rng):
    data = rng.integers(0, 256, size=100000, dtype=np.uint8).tobytes()
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    assert fnv1a_64(data) == h
    assert fnv1a_64(bytearray(data)) == h
    assert fnv1a_64(data[40000:], fnv1a_64(data[:40000])) == h


@pytest.mark.parametrize(
    "dtype,voxel_type",
    [(np.uint8, VoxelType.U8), (np.float32, VoxelType.F32), (np.uint32, VoxelType.U32)],
)
def test_save_load_volume(tmp_path, rng, dtype, voxel_type):
    data = (rng.random((3, 5, 7)) * 200).astype(dtype)
    grid = VoxelGrid(data, (4.0, 4.0, 40.0))
    path = str(tmp_path / "v.vsv")
    save_volume(grid, path)

    loaded = load_volume(path)
    assert loaded == grid
    assert loaded.voxel_type == voxel_type
    assert loaded.dims == (7, 5, 3)
    assert loaded.resolution == (4.0, 4.0, 40.0)


def test_file_layout(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path = str(tmp_path / "v.vsv")
    save_volume(VoxelGrid(data, (1.0, 2.0, 3.0)), path)

    with open(path, "rb") as fp:
        blob = fp.read()
    assert HEADER.size == 57
    assert len(blob) == 57 + 24 + 8
    magic, code, nx, ny, nz, rx, ry, rz = HEADER.unpack(blob[:57])
    assert (magic, code, nx, ny, nz) == (b"VSV1", 0, 4, 3, 2)
    assert (rx, ry, rz) == (1.0, 2.0, 3.0)
    # x varies fastest in the payload
    assert blob[57:61] == bytes([0, 1, 2, 3])
    assert int.from_bytes(blob[-8:], "little") == fnv1a_64(blob[57:-8])


def test_load_errors(tmp_path):
    path = str(tmp_path / "v.vsv")
    save_volume(VoxelGrid(np.ones((2, 2, 2), dtype=np.float32)), path)
    with open(path, "rb") as fp:
        blob = bytearray(fp.read())

    bad_magic = str(tmp_path / "magic.vsv")
    with open(bad_magic, "wb") as fp:
        fp.write(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        load_volume(bad_magic)

    bad_code = str(tmp_path / "code.vsv")
    with open(bad_code, "wb") as fp:
        fp.write(bytes(blob[:4]) + bytes([9]) + bytes(blob[5:]))
    with pytest.raises(VersionError):
        load_volume(bad_code)

    truncated = str(tmp_path / "short.vsv")
    with open(truncated, "wb") as fp:
        fp.write(bytes(blob[:-12]))
    with pytest.raises(CorruptionError):
        load_volume(truncated)

    flipped = str(tmp_path / "flip.vsv")
    blob[HEADER.size] ^= 0xFF
    with open(flipped, "wb") as fp:
        fp.write(bytes(blob))
    with pytest.raises(ChecksumError):
        load_volume(flipped)
    with pytest.raises(ChecksumError):
        verify_volume(flipped, chunk_size=3)
    # skipping verification still reads the (corrupt) payload
    assert load_volume(flipped, verify=False).dims == (2, 2, 2)


def test_verify_volume_streams(tmp_path, rng):
    path = str(tmp_path / "v.vsv")
    grid = VoxelGrid((rng.random((4, 6, 5)) * 255).astype(np.uint8), (6.0, 6.0, 30.0))
    save_volume(grid, path)
    assert verify_volume(path, chunk_size=7) == (VoxelType.U8, (5, 6, 4), (6.0, 6.0, 30.0))
    with open(path, "rb") as fp:
        assert read_header(fp, path)[1] == (5, 6, 4)


def test_missing_file_is_data_error(tmp_path):
    from vesicle.exceptions import DataError

    with pytest.raises(DataError):
        load_volume(str(tmp_path / "nope.vsv"))


def test_voxel_grid_validation():
    with pytest.raises(ParameterError):
        VoxelGrid(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ParameterError):
        VoxelGrid(np.zeros((2, 2, 2), dtype=np.int16))
    with pytest.raises(ParameterError):
        VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8), (1.0, 0.0, 1.0))

    grid = VoxelGrid(np.zeros((2, 3, 4), dtype=np.uint8))
    assert not grid.data.flags.writeable
    with pytest.raises(ParameterError):
        grid.check_aligned(VoxelGrid(np.zeros((2, 3, 5), dtype=np.uint8)))
    with pytest.raises(ParameterError):
        grid.check_aligned(VoxelGrid(np.zeros((2, 3, 4), dtype=np.uint8), (2.0, 1.0, 1.0)))


def test_bounding_box():
    box = BoundingBox((2, 3, 1), (5, 4, 1))
    assert box.shape == (4, 2, 1)
    assert box.volume == 8
    assert box.contains((5, 3, 1))
    assert not box.contains((6, 3, 1))
    assert box.expand((3, 3, 3), (7, 6, 2)) == BoundingBox((0, 0, 0), (6, 5, 1))
    assert box.relative_to(BoundingBox((1, 1, 1), (9, 9, 9))) == BoundingBox((1, 2, 0), (4, 3, 0))
    assert BoundingBox.from_dict(box.to_dict()) == box

    data = np.arange(2 * 6 * 7).reshape(2, 6, 7)
    assert data[box.slices].shape == (1, 2, 4)
    with pytest.raises(ParameterError):
        BoundingBox((3, 0, 0), (2, 0, 0))


def test_crop():
    data = np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5)
    grid = VoxelGrid(data)
    crop = grid.crop(BoundingBox((1, 1, 1), (3, 2, 2)))
    assert crop.dims == (3, 2, 2)
    assert crop.data[0, 0, 0] == data[1, 1, 1]
    with pytest.raises(ParameterError):
        grid.crop(BoundingBox((0, 0, 0), (5, 0, 0)))


def test_membrane_mask_from_probability():
    prob = VoxelGrid(np.array([[[0.2, 0.5, 0.9]]], dtype=np.float32))
    mask = membrane_mask_from_probability(prob, 0.5)
    assert mask.array.tolist() == [[[False, True, True]]]
    assert mask.provenance == MaskProvenance.ExternalProbability

    scaled = VoxelGrid(np.array([[[10, 128, 255]]], dtype=np.uint8))
    assert membrane_mask_from_probability(scaled, 0.5).array.tolist() == [[[False, True, True]]]

    with pytest.raises(ParameterError):
        membrane_mask_from_probability(prob, 1.5)


def test_membrane_mask_rejects_non_binary():
    with pytest.raises(ParameterError):
        MembraneMask(VoxelGrid(np.full((1, 2, 2), 3, dtype=np.uint8)), "synthetic")
    full = MembraneMask.full(VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8)))
    assert full.array.all()


def test_intensity_bandpass():
    data = np.arange(100, dtype=np.uint8).reshape(1, 10, 10)
    em = VoxelGrid(data)
    mask = intensity_bandpass_mask(em, 0.1, 0.5)
    lo, hi = np.quantile(np.arange(100.0), [0.1, 0.5])
    assert mask.provenance == MaskProvenance.IntensityBandpass
    assert np.array_equal(mask.array, (data >= lo) & (data <= hi))

    labels = VoxelGrid(np.where(data >= 50, 1, 0).astype(np.uint32))
    reference = label_intensities(em, labels)
    assert reference.min() == 50
    banded = intensity_bandpass_mask(em, 0.0, 1.0, reference)
    assert banded.array.sum() == 50

    with pytest.raises(ParameterError):
        BandpassCutoffs.from_quantiles(data, 0.6, 0.4)
    with pytest.raises(ParameterError):
        BandpassCutoffs.from_quantiles(np.zeros(0), 0.1, 0.4)


def test_downsample_xy():
    data = np.arange(2 * 4 * 5, dtype=np.float32).reshape(2, 4, 5)
    grid = VoxelGrid(data, (6.0, 6.0, 30.0))
    small = downsample_xy(grid, 2)
    assert small.dims == (3, 2, 2)
    assert small.resolution == (12.0, 12.0, 30.0)
    assert small.data[0, 0, 0] == pytest.approx(np.mean(data[0, 0:2, 0:2]))
    # the partial last column averages only its in-bounds voxels
    assert small.data[0, 0, 2] == pytest.approx(np.mean(data[0, 0:2, 4]))

    u8 = downsample_xy(VoxelGrid(np.array([[[1, 2], [2, 2]]], dtype=np.uint8)), 2)
    assert u8.voxel_type == VoxelType.F32
    assert u8.data[0, 0, 0] == 1.75
    assert quantize_u8(u8).data[0, 0, 0] == 2
    assert quantize_u8(u8).voxel_type == VoxelType.U8

    assert downsample_xy(grid, 1) is grid
    with pytest.raises(ParameterError):
        downsample_xy(grid, 0)
    with pytest.raises(ParameterError):
        downsample_xy(VoxelGrid(np.zeros((1, 2, 2), dtype=np.uint32)), 2)


@pytest.mark.parametrize("shape", [(2, 4, 4), (2, 5, 5), (3, 7, 4)])
def test_downsample_xy_block_means(rng, shape):
    data = rng.integers(0, 256, size=shape, dtype=np.uint8)
    small = downsample_xy(VoxelGrid(data), 2)

    nz, ny, nx = shape
    expected = np.zeros(small.data.shape)
    for z in range(nz):
        for j in range((ny + 1) // 2):
            for i in range((nx + 1) // 2):
                expected[z, j, i] = data[z, 2 * j : 2 * j + 2, 2 * i : 2 * i + 2].mean()
    assert np.allclose(small.data, expected, atol=1e-4)

    if ny % 2 == 0 and nx % 2 == 0:
        assert abs(small.data.astype(np.float64).mean() - data.mean()) < 1e-6
