"""Volume data model, the VSV1 file format, masks and resolution changes.

Arrays are stored as numpy arrays indexed ``[z, y, x]`` so that C order is x-fastest, the
on-disk payload order. Everything user-facing reports sizes as ``(nx, ny, nz)`` and
coordinates as ``(x, y, z)``.
"""
from collections import namedtuple
import logging
import math
import struct

import numpy as np

from vesicle.exceptions import (
    ChecksumError,
    CorruptionError,
    FormatError,
    ParameterError,
    VersionError,
    raise_io_error,
)
from vesicle.lib.enums import MaskProvenance, VoxelType
from vesicle.lib.files import FNV_OFFSET, atomic_write, fnv1a_64

log = logging.getLogger("vesicle")

MAGIC = b"VSV1"
HEADER = struct.Struct("<4sB3Q4x3d")
CHECKSUM = struct.Struct("<Q")

NUMPY_TYPES = {
    VoxelType.U8: np.dtype("<u1"),
    VoxelType.F32: np.dtype("<f4"),
    VoxelType.U32: np.dtype("<u4"),
}


def voxel_type_of(dtype):
    dtype = np.dtype(dtype)
    for voxel_type, np_type in NUMPY_TYPES.items():
        if dtype.kind == np_type.kind and dtype.itemsize == np_type.itemsize:
            return voxel_type
    raise ParameterError(
        "Unsupported voxel dtype {}; must be one of: {}".format(
            dtype, ", ".join(VoxelType.values())
        )
    )


class BoundingBox(namedtuple("BoundingBox", ["min", "max"])):
    """Axis-aligned box with inclusive (x, y, z) corners."""

    __slots__ = ()

    def __new__(cls, min, max):
        min = tuple(int(v) for v in min)
        max = tuple(int(v) for v in max)
        if any(lo > hi for lo, hi in zip(min, max)):
            raise ParameterError("BoundingBox min {} exceeds max {}".format(min, max))
        return super(BoundingBox, cls).__new__(cls, min, max)

    @property
    def shape(self):
        """(nx, ny, nz) of the box."""
        return tuple(hi - lo + 1 for lo, hi in zip(self.min, self.max))

    @property
    def volume(self):
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def slices(self):
        """numpy index for a [z, y, x] array."""
        return tuple(slice(self.min[axis], self.max[axis] + 1) for axis in (2, 1, 0))

    def contains(self, point):
        return all(lo <= p <= hi for p, lo, hi in zip(point, self.min, self.max))

    def within(self, dims):
        return all(lo >= 0 and hi < d for lo, hi, d in zip(self.min, self.max, dims))

    def expand(self, pad, dims):
        """Grow by `pad` voxels on every side, clipped to a volume of `dims`."""
        return BoundingBox(
            tuple(max(0, lo - p) for lo, p in zip(self.min, pad)),
            tuple(min(d - 1, hi + p) for hi, p, d in zip(self.max, pad, dims)),
        )

    def relative_to(self, other):
        """Express this box in the coordinate frame whose origin is `other.min`."""
        return BoundingBox(
            tuple(a - o for a, o in zip(self.min, other.min)),
            tuple(a - o for a, o in zip(self.max, other.min)),
        )

    def to_dict(self):
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min"], d["max"])


class VoxelGrid(object):
    """An immutable 3D scalar lattice with anisotropic resolution.

    Parameters
    ----------
    data : `numpy.ndarray`
        Array indexed [z, y, x] of dtype uint8 (intensity), float32 (probability or
        feature) or uint32 (labels, 0 = background).
    resolution : `tuple`
        (rx, ry, rz) in nm per voxel.
    """

    def __init__(self, data, resolution=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.ndim != 3:
            raise ParameterError("Volume data must be 3D, got {} dimensions".format(data.ndim))
        if min(data.shape) < 1:
            raise ParameterError("Volume dims must all be >= 1, got {}".format(data.shape[::-1]))

        self.voxel_type = voxel_type_of(data.dtype)
        resolution = tuple(float(r) for r in resolution)
        if len(resolution) != 3 or not all(math.isfinite(r) and r > 0 for r in resolution):
            raise ParameterError(
                "Resolution must be three finite values > 0, got {}".format(resolution)
            )

        target = NUMPY_TYPES[self.voxel_type]
        if data.flags.writeable or data.dtype != target or not data.flags.c_contiguous:
            data = np.array(data, dtype=target, order="C")
        data.setflags(write=False)
        self.data = data
        self.resolution = resolution

    @classmethod
    def zeros(cls, dims, resolution=(1.0, 1.0, 1.0), voxel_type=VoxelType.F32):
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx), dtype=NUMPY_TYPES[VoxelType(voxel_type)]), resolution)

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def size(self):
        return self.data.size

    def crop(self, bbox):
        if not bbox.within(self.dims):
            raise ParameterError("Box {} lies outside volume dims {}".format(bbox, self.dims))
        return VoxelGrid(self.data[bbox.slices], self.resolution)

    def check_aligned(self, other, what="volumes"):
        """Raise `ParameterError` unless `other` has the same dims and resolution."""
        if tuple(other.dims) != tuple(self.dims):
            raise ParameterError(
                "Dims of {} disagree: {} vs {}".format(what, self.dims, other.dims)
            )
        if not np.allclose(other.resolution, self.resolution, rtol=1e-9, atol=0):
            raise ParameterError(
                "Resolution of {} disagrees: {} vs {}".format(what, self.resolution, other.resolution)
            )

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.voxel_type == other.voxel_type
            and self.resolution == other.resolution
            and np.array_equal(self.data, other.data)
        )

    def __ne__(self, other):
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    __hash__ = None

    def __repr__(self):
        return "<VoxelGrid {} dims={} resolution={}>".format(
            self.voxel_type.value, self.dims, self.resolution
        )


class MembraneMask(object):
    """A binary membrane mask aligned with an EM volume."""

    def __init__(self, grid, provenance):
        if grid.voxel_type != VoxelType.U8:
            raise ParameterError("Membrane masks must be u8, got {}".format(grid.voxel_type.value))
        if grid.data.max() > 1:
            raise ParameterError("Membrane masks may only contain 0 and 1")
        self.grid = grid
        self.provenance = MaskProvenance(provenance)

    @classmethod
    def from_array(cls, array, resolution, provenance):
        return cls(VoxelGrid(np.asarray(array).astype(np.uint8), resolution), provenance)

    @classmethod
    def full(cls, grid):
        """A mask covering every voxel of `grid` (no membrane restriction)."""
        return cls.from_array(np.ones(grid.data.shape, dtype=np.uint8), grid.resolution,
                              MaskProvenance.Synthetic)

    @property
    def array(self):
        """Boolean view of the mask, indexed [z, y, x]."""
        return self.grid.data.astype(bool)

    @property
    def dims(self):
        return self.grid.dims

    def crop(self, bbox):
        return MembraneMask(self.grid.crop(bbox), self.provenance)

    def check_aligned(self, grid):
        grid.check_aligned(self.grid, what="EM volume and membrane mask")

    def __repr__(self):
        return "<MembraneMask {} dims={} coverage={:.3f}>".format(
            self.provenance.value, self.dims, float(self.grid.data.mean())
        )


def membrane_mask_from_probability(prob, threshold=0.5):
    """Binarize a membrane-probability volume: voxels at or above `threshold` are membrane."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError("Membrane threshold must be in [0, 1], got {}".format(threshold))
    if prob.voxel_type == VoxelType.F32:
        array = prob.data >= threshold
    else:
        # u8 inputs are either masks already (0/1) or probabilities scaled to 0..255
        scale = 1.0 if prob.data.max() <= 1 else 255.0
        array = prob.data.astype(np.float64) / scale >= threshold
    return MembraneMask.from_array(array, prob.resolution, MaskProvenance.ExternalProbability)


def save_volume(grid, path):
    """Write `grid` in VSV1 form: header, raw little-endian payload, FNV-1a-64 checksum."""
    if not isinstance(grid, VoxelGrid):
        raise ParameterError("save_volume expects a VoxelGrid, got {}".format(type(grid).__name__))
    if min(grid.dims) < 1:
        raise ParameterError("Refusing to write a volume with an empty dimension")

    payload = grid.data.tobytes(order="C")
    header = HEADER.pack(MAGIC, grid.voxel_type.code, *(list(grid.dims) + list(grid.resolution)))

    with atomic_write(path, mode="wb") as fp:
        fp.write(header)
        fp.write(payload)
        fp.write(CHECKSUM.pack(fnv1a_64(payload)))


def read_header(fp, path):
    """Parse a VSV1 header, returning (voxel_type, dims, resolution)."""
    raw = fp.read(HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("{}: not a VSV1 volume (bad magic)".format(path))
    if len(raw) < HEADER.size:
        raise CorruptionError("{}: header is truncated".format(path))

    magic, code, nx, ny, nz, rx, ry, rz = HEADER.unpack(raw)
    try:
        voxel_type = VoxelType.from_code(code)
    except IndexError:
        raise VersionError("{}: unknown dtype code {}".format(path, code))

    if min(nx, ny, nz) < 1:
        raise FormatError("{}: header declares empty dims {}".format(path, (nx, ny, nz)))

    return voxel_type, (nx, ny, nz), (rx, ry, rz)


def load_volume(path, verify=True):
    """Read a VSV1 file written by `save_volume`.

    Raises
    ------
    FormatError
        The file does not start with the VSV1 magic.
    VersionError
        The dtype code is unknown.
    CorruptionError
        The payload or checksum is shorter than the header promises.
    ChecksumError
        The payload does not match its checksum (only when `verify`).
    """
    try:
        with open(path, "rb") as fp:
            voxel_type, dims, resolution = read_header(fp, path)
            np_type = NUMPY_TYPES[voxel_type]
            nx, ny, nz = dims
            n_bytes = nx * ny * nz * np_type.itemsize

            payload = fp.read(n_bytes)
            if len(payload) < n_bytes:
                raise CorruptionError(
                    "{}: payload holds {} of {} bytes".format(path, len(payload), n_bytes)
                )
            trailer = fp.read(CHECKSUM.size)
    except OSError as e:
        raise_io_error(path, e)

    if len(trailer) < CHECKSUM.size:
        raise CorruptionError("{}: checksum is missing".format(path))

    if verify and CHECKSUM.unpack(trailer)[0] != fnv1a_64(payload):
        raise ChecksumError("{}: payload checksum mismatch".format(path))

    data = np.frombuffer(payload, dtype=np_type).reshape((nz, ny, nx))
    return VoxelGrid(data, resolution)


def verify_volume(path, chunk_size=1 << 24):
    """Check a VSV1 file's payload against its checksum without holding it in memory.

    Returns (voxel_type, dims, resolution) of the verified volume.
    """
    try:
        with open(path, "rb") as fp:
            voxel_type, dims, resolution = read_header(fp, path)
            nx, ny, nz = dims
            remaining = nx * ny * nz * NUMPY_TYPES[voxel_type].itemsize
            h = FNV_OFFSET
            while remaining:
                chunk = fp.read(min(chunk_size, remaining))
                if not chunk:
                    raise CorruptionError("{}: payload is truncated".format(path))
                h = fnv1a_64(chunk, h)
                remaining -= len(chunk)
            trailer = fp.read(CHECKSUM.size)
    except OSError as e:
        raise_io_error(path, e)

    if len(trailer) < CHECKSUM.size:
        raise CorruptionError("{}: checksum is missing".format(path))
    if CHECKSUM.unpack(trailer)[0] != h:
        raise ChecksumError("{}: payload checksum mismatch".format(path))
    return voxel_type, dims, resolution


def downsample_xy(grid, factor):
    """Shrink x and y by `factor`, each output voxel the mean of its in-bounds f x f block.

    The result is always f32 holding the exact block means; use `quantize_u8` to turn a
    downsampled EM volume back into u8. Label grids cannot be averaged and are rejected.
    """
    if int(factor) != factor or factor < 1:
        raise ParameterError("Downsampling factor must be a positive integer, got {}".format(factor))
    factor = int(factor)
    if grid.voxel_type == VoxelType.U32:
        raise ParameterError("Label volumes cannot be block-averaged")
    if factor == 1:
        return grid

    nz, ny, nx = grid.data.shape
    out_y, out_x = -(-ny // factor), -(-nx // factor)
    pad_y, pad_x = out_y * factor - ny, out_x * factor - nx

    data = grid.data.astype(np.float64)
    sums = np.pad(data, ((0, 0), (0, pad_y), (0, pad_x))).reshape(
        nz, out_y, factor, out_x, factor
    ).sum(axis=(2, 4))
    counts = np.pad(np.ones((ny, nx)), ((0, pad_y), (0, pad_x))).reshape(
        out_y, factor, out_x, factor
    ).sum(axis=(1, 3))
    means = (sums / counts).astype(np.float32)

    rx, ry, rz = grid.resolution
    return VoxelGrid(means, (rx * factor, ry * factor, rz))


def quantize_u8(grid):
    """Round (half to even) and clip an intensity grid to u8."""
    if grid.voxel_type == VoxelType.U8:
        return grid
    if grid.voxel_type == VoxelType.U32:
        raise ParameterError("Label volumes cannot be converted to intensities")
    return VoxelGrid(np.clip(np.rint(grid.data), 0, 255).astype(np.uint8), grid.resolution)


class BandpassCutoffs(namedtuple("BandpassCutoffs", ["lo_value", "hi_value"])):
    """Intensity bounds resolved from quantiles; reusable on any sub-volume."""

    __slots__ = ()

    @classmethod
    def from_quantiles(cls, reference, lo, hi):
        cls._check_band(lo, hi)
        reference = np.asarray(reference).ravel()
        if reference.size == 0:
            raise ParameterError("Bandpass reference distribution is empty")

        lo_value, hi_value = np.quantile(reference.astype(np.float64), [lo, hi])
        return cls(float(lo_value), float(hi_value))

    @classmethod
    def from_histogram(cls, counts, lo, hi):
        """The cutoffs `from_quantiles` gives for the values tallied in `counts`.

        `counts[v]` is how often intensity `v` occurs, so a u8 volume can be summarized slab by
        slab instead of being held in memory.
        """
        cls._check_band(lo, hi)
        cumulative = np.cumsum(np.asarray(counts, dtype=np.int64))
        total = int(cumulative[-1]) if len(cumulative) else 0
        if total == 0:
            raise ParameterError("Bandpass reference distribution is empty")

        def order_statistic(k):
            return float(np.searchsorted(cumulative, k, side="right"))

        values = []
        for q in (lo, hi):
            position = q * (total - 1)
            k = int(np.floor(position))
            a = order_statistic(k)
            b = order_statistic(min(k + 1, total - 1))
            values.append(a + (position - k) * (b - a))
        return cls(*values)

    @staticmethod
    def _check_band(lo, hi):
        if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0):
            raise ParameterError("Band quantiles must lie in [0, 1], got {}, {}".format(lo, hi))
        if lo >= hi:
            raise ParameterError("Band requires lo < hi, got {} >= {}".format(lo, hi))

    def apply(self, data):
        values = np.asarray(data)
        return (values >= self.lo_value) & (values <= self.hi_value)


def intensity_bandpass_mask(grid, lo, hi, reference=None):
    """Estimate membranes as voxels whose intensity falls inside a quantile band.

    Parameters
    ----------
    grid : `VoxelGrid`
        u8 EM volume to mask.
    lo, hi : `float`
        Quantile positions in [0, 1], lo < hi.
    reference : array-like, optional
        Intensity distribution the quantiles are taken over, e.g. the EM intensities under
        synapse training labels. Defaults to the grid itself.

    Returns
    -------
    `MembraneMask` with provenance intensity-bandpass.
    """
    if grid.voxel_type != VoxelType.U8:
        raise ParameterError("Bandpass masks are computed on u8 EM volumes")
    cutoffs = BandpassCutoffs.from_quantiles(grid.data if reference is None else reference, lo, hi)
    log.debug("Bandpass cutoffs [%.2f, %.2f] from quantiles [%s, %s]", cutoffs.lo_value,
              cutoffs.hi_value, lo, hi)
    return MembraneMask.from_array(
        cutoffs.apply(grid.data), grid.resolution, MaskProvenance.IntensityBandpass
    )


def label_intensities(em, labels):
    """EM intensities under the foreground of a label volume (bandpass reference)."""
    em.check_aligned(labels, what="EM and label volumes")
    return em.data[labels.data > 0]
