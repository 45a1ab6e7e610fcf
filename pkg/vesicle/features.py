"""The ten-channel synapse feature stack.

Features are computed in two passes. Pass one applies data transforms to each z-slice on its
own (intensity, local binary pattern, gradient magnitude, structure-tensor coherence) plus the
vesicle indicator. Pass two summarizes each transform with 3D box kernels of several
bandwidths, evaluated through an integral volume so the cost does not depend on kernel size.
"""
from collections import namedtuple
import logging
import os

import numpy as np

from vesicle.exceptions import FormatError, ParameterError
from vesicle.lib.enums import Channel, FeatureVariant, VoxelType
from vesicle.lib.files import fnv1a_64, read_json, write_json
from vesicle.lib.schemas import FEATURE_MANIFEST_SCHEMA
from vesicle.utils import chunk_ranges, map_slices, run_via_threadpool
from vesicle.volume import BoundingBox, VoxelGrid, load_volume, save_volume

log = logging.getLogger("vesicle")

N_CHANNELS = len(Channel)
FIXED_POINT_BITS = 20
# partial sums of the scaled values must stay inside int64
FIXED_POINT_LIMIT = float(2 ** 62)
DEFAULT_CAP_NM = 2000.0
DEFAULT_WINDOW_SIGMA = 2.0
COHERENCE_EPS = 1e-8

# (dy, dx) of the eight neighbours, clockwise from east with y pointing down
LBP_OFFSETS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


class KernelSpec(namedtuple("KernelSpec", ["name", "dims"])):
    """A box kernel with odd (kx, ky, kz) voxel extents."""

    __slots__ = ()

    def __new__(cls, name, dims):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 1 or d % 2 == 0 for d in dims):
            raise ParameterError(
                "Kernel extents must be three odd positive integers, got {}".format(dims)
            )
        return super(KernelSpec, cls).__new__(cls, name, dims)

    @property
    def radius(self):
        return tuple(d // 2 for d in self.dims)


THETA0 = KernelSpec("theta0", (5, 5, 1))
THETA1 = KernelSpec("theta1", (15, 15, 3))
THETA2 = KernelSpec("theta2", (25, 25, 5))
THETA3 = KernelSpec("theta3", (101, 101, 5))
KERNELS = {k.name: k for k in (THETA0, THETA1, THETA2, THETA3)}

# transform support in-plane: structure tensor Gaussian (truncate 4 sigma) plus Sobel
TRANSFORM_HALO = int(4.0 * DEFAULT_WINDOW_SIGMA + 0.5) + 1
FEATURE_HALO = (
    THETA3.radius[0] + TRANSFORM_HALO + 1,
    THETA3.radius[1] + TRANSFORM_HALO + 1,
    max(k.radius[2] for k in KERNELS.values()),
)


def feature_order_tag(variant=FeatureVariant.Full):
    """64-bit tag of the channel-order contract a trained forest depends on."""
    kernels = ["{}={}x{}x{}".format(k.name, *k.dims) for k in KERNELS.values()]
    contract = "|".join(Channel.values() + kernels + [FeatureVariant(variant).value])
    return fnv1a_64(contract.encode("utf-8"))


class IntegralVolume(object):
    """Summed-volume table of a [z, y, x] array, kept in 64-bit fixed point.

    Values are scaled by 2**20 and rounded before summation, so every window sum is exact
    and does not depend on where the array starts. Window means therefore agree bit for bit
    between a whole volume and any sub-volume that contains the window.

    Arrays whose absolute sum would not fit the fixed-point range fall back to float64
    summation (`exact` is then False). Non-finite values are rejected.
    """

    def __init__(self, values):
        values = np.asarray(values)
        scale = float(1 << FIXED_POINT_BITS)
        if values.dtype.kind in "ub":
            magnitude = float(values.max(initial=0)) * values.size
        else:
            values64 = values.astype(np.float64)
            if not np.isfinite(values64).all():
                raise ParameterError("Box filtering needs finite values; the input has NaN or inf")
            magnitude = float(np.abs(values64).sum())

        self.exact = magnitude * scale < FIXED_POINT_LIMIT
        if not self.exact:
            log.debug("Integral volume exceeds the fixed-point range; summing in float64")
            fixed = values.astype(np.float64)
            self.scale = 1.0
        elif values.dtype.kind in "ub":
            fixed = values.astype(np.int64) << FIXED_POINT_BITS
            self.scale = scale
        else:
            fixed = np.rint(values64 * scale).astype(np.int64)
            self.scale = scale

        nz, ny, nx = values.shape
        table = np.zeros((nz + 1, ny + 1, nx + 1), dtype=fixed.dtype)
        table[1:, 1:, 1:] = fixed.cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
        self.table = table
        self.shape = values.shape

    def window_mean(self, kernel, workers=1, region=None):
        """Mean over each truncated kernel window, normalized by its in-bounds voxel count.

        With `region` (a `BoundingBox` in this array's coordinates) only the means of the
        voxels inside it are computed.
        """
        nz, ny, nx = self.shape
        rx, ry, rz = kernel.radius
        if region is None:
            lo, hi = (0, 0, 0), (nx - 1, ny - 1, nz - 1)
        elif not region.within((nx, ny, nz)):
            raise ParameterError("Region {} lies outside {}".format(region, (nx, ny, nz)))
        else:
            lo, hi = region.min, region.max

        def _bounds(n, r, a, b):
            index = np.arange(a, b + 1)
            return np.clip(index - r, 0, n), np.clip(index + r + 1, 0, n)

        x0, x1 = _bounds(nx, rx, lo[0], hi[0])
        y0, y1 = _bounds(ny, ry, lo[1], hi[1])
        z0, z1 = _bounds(nz, rz, lo[2], hi[2])
        t = self.table

        def _chunk(bounds):
            a, b = bounds
            za, zb = z0[a:b], z1[a:b]
            total = (
                t[np.ix_(zb, y1, x1)]
                - t[np.ix_(za, y1, x1)]
                - t[np.ix_(zb, y0, x1)]
                - t[np.ix_(zb, y1, x0)]
                + t[np.ix_(za, y0, x1)]
                + t[np.ix_(za, y1, x0)]
                + t[np.ix_(zb, y0, x0)]
                - t[np.ix_(za, y0, x0)]
            )
            count = (
                (zb - za)[:, None, None] * (y1 - y0)[None, :, None] * (x1 - x0)[None, None, :]
            )
            return (total / (count * self.scale)).astype(np.float32)

        chunks = run_via_threadpool(_chunk, chunk_ranges(len(z0), workers), max_threads=workers)
        return np.concatenate(chunks, axis=0)


def box_filter(grid, kernel, workers=1):
    """Truncated-window box mean of `grid` under `kernel` (see `IntegralVolume`)."""
    if not isinstance(kernel, KernelSpec):
        kernel = KernelSpec("custom", kernel)
    return VoxelGrid(IntegralVolume(grid.data).window_mean(kernel, workers), grid.resolution)


def _lbp_slice(plane):
    center = plane.astype(np.int16)
    ny, nx = center.shape
    # -1 marks out-of-bounds neighbours, which count as equal to the center
    padded = np.pad(center, 1, mode="constant", constant_values=-1)
    code = np.zeros((ny, nx), dtype=np.int32)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        neighbour = padded[1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx]
        code |= ((neighbour >= center) | (neighbour < 0)).astype(np.int32) << bit
    return code.astype(np.float32)


def lbp_transform(grid, workers=1):
    """Per-slice 8-neighbour local binary pattern codes in [0, 255].

    Bit i is set when neighbour i (clockwise from east) is at least as bright as the center;
    neighbours outside the slice count as equal.
    """
    _require_u8(grid, "lbp_transform")
    return VoxelGrid(map_slices(_lbp_slice, grid.data, workers, np.float32), grid.resolution)


def _sobel(plane):
    from scipy import ndimage

    plane = plane.astype(np.float64)
    gx = ndimage.sobel(plane, axis=1, mode="nearest")
    gy = ndimage.sobel(plane, axis=0, mode="nearest")
    return gx, gy


def _gradient_slice(plane):
    gx, gy = _sobel(plane)
    return np.hypot(gx, gy).astype(np.float32)


def gradient_magnitude(grid, workers=1):
    """Per-slice Sobel gradient magnitude with replicated borders."""
    _require_u8(grid, "gradient_magnitude")
    return VoxelGrid(map_slices(_gradient_slice, grid.data, workers, np.float32), grid.resolution)


def structure_tensor_eigenvalues(plane, window_sigma=DEFAULT_WINDOW_SIGMA):
    """Eigenvalues (l1 >= l2) of the Gaussian-smoothed 2D structure tensor of one slice."""
    from scipy import ndimage

    if not window_sigma > 0:
        raise ParameterError("Structure tensor sigma must be > 0, got {}".format(window_sigma))

    gx, gy = _sobel(plane)
    jxx = ndimage.gaussian_filter(gx * gx, window_sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, window_sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, window_sigma, mode="nearest")

    half_trace = (jxx + jyy) / 2.0
    root = np.sqrt(((jxx - jyy) / 2.0) ** 2 + jxy ** 2)
    return half_trace + root, half_trace - root


def structure_tensor_scalar(grid, window_sigma=DEFAULT_WINDOW_SIGMA, workers=1):
    """Per-slice structure-tensor coherence (l1 - l2) / (l1 + l2 + eps), in [0, 1]."""
    _require_u8(grid, "structure_tensor_scalar")
    if not window_sigma > 0:
        raise ParameterError("Structure tensor sigma must be > 0, got {}".format(window_sigma))

    def _coherence(plane):
        l1, l2 = structure_tensor_eigenvalues(plane, window_sigma)
        return np.clip((l1 - l2) / (l1 + l2 + COHERENCE_EPS), 0.0, 1.0).astype(np.float32)

    return VoxelGrid(map_slices(_coherence, grid.data, workers, np.float32), grid.resolution)


def vesicle_indicator(dims, vesicles, resolution=(1.0, 1.0, 1.0), origin=(0, 0, 0)):
    """Binary grid with a 1 at every vesicle centroid.

    `origin` is the global coordinate of the grid's first voxel; centroids are global.
    """
    nx, ny, nz = dims
    out = np.zeros((nz, ny, nx), dtype=np.float32)
    if len(vesicles):
        local = vesicles.centroids - np.asarray(origin, dtype=np.int64)
        inside = np.all((local >= 0) & (local < np.asarray(dims)), axis=1)
        if not inside.all():
            raise ParameterError(
                "Vesicle centroid {} lies outside the volume".format(
                    tuple(vesicles.centroids[~inside][0])
                )
            )
        out[local[:, 2], local[:, 1], local[:, 0]] = 1.0
    return VoxelGrid(out, resolution)


def vesicle_distance(
    dims, resolution, vesicles, cap_nm=DEFAULT_CAP_NM, origin=(0, 0, 0), workers=1
):
    """Anisotropic Euclidean distance in nm to the nearest vesicle, clamped to `cap_nm`.

    Vesicles may lie outside the grid (global coordinates, `origin` being the global
    coordinate of the grid's first voxel); a sub-volume sees the distances of the whole.
    """
    if not cap_nm > 0:
        raise ParameterError("Vesicle distance cap must be > 0, got {}".format(cap_nm))

    nx, ny, nz = dims
    if not len(vesicles):
        return VoxelGrid(np.full((nz, ny, nx), cap_nm, dtype=np.float32), resolution)

    from scipy.spatial import cKDTree

    res = np.asarray(resolution, dtype=np.float64)
    tree = cKDTree(vesicles.centroids.astype(np.float64) * res)
    ox, oy, oz = origin
    yy, xx = np.meshgrid(
        (np.arange(ny) + oy) * res[1], (np.arange(nx) + ox) * res[0], indexing="ij"
    )

    def _slab(bounds):
        start, stop = bounds
        out = np.empty((stop - start, ny, nx), dtype=np.float32)
        for i, z in enumerate(range(start, stop)):
            coords = np.column_stack(
                [xx.ravel(), yy.ravel(), np.full(xx.size, (z + oz) * res[2])]
            )
            dist, _ = tree.query(coords, k=1, distance_upper_bound=cap_nm)
            out[i] = np.minimum(dist, cap_nm).reshape(ny, nx)
        return out

    slabs = run_via_threadpool(_slab, chunk_ranges(nz, workers), max_threads=workers)
    return VoxelGrid(np.concatenate(slabs, axis=0), resolution)


class FeatureStack(object):
    """Ten aligned float32 feature channels, in `Channel` order.

    Parameters
    ----------
    channels : `numpy.ndarray`
        Array shaped (10, nz, ny, nx).
    resolution : `tuple`
        (rx, ry, rz) nm per voxel.
    variant : `FeatureVariant`
        `full`, or `no-vesicles` for the ablation without vesicle context.
    """

    def __init__(self, channels, resolution, variant=FeatureVariant.Full):
        channels = np.asarray(channels, dtype=np.float32)
        if channels.ndim != 4 or channels.shape[0] != N_CHANNELS:
            raise ParameterError(
                "A feature stack holds exactly {} channels, got shape {}".format(
                    N_CHANNELS, channels.shape
                )
            )
        if not np.isfinite(channels).all():
            raise ParameterError("Feature stack contains non-finite values")
        self.channels = channels
        self.resolution = tuple(float(r) for r in resolution)
        self.variant = FeatureVariant(variant)

    @property
    def dims(self):
        _, nz, ny, nx = self.channels.shape
        return (nx, ny, nz)

    @property
    def feature_order_tag(self):
        return feature_order_tag(self.variant)

    def channel(self, which):
        index = list(Channel).index(Channel(which)) if not isinstance(which, int) else which
        return VoxelGrid(self.channels[index], self.resolution)

    def rows(self, index=None):
        """Design matrix (n, 10) for flat voxel indices, or for a boolean [z, y, x] mask."""
        flat = self.channels.reshape(N_CHANNELS, -1)
        if index is None:
            return np.ascontiguousarray(flat.T)
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index.ravel())
        return np.ascontiguousarray(flat[:, index].T)

    def crop(self, bbox):
        return FeatureStack(self.channels[(slice(None),) + bbox.slices], self.resolution,
                            self.variant)

    def save(self, directory):
        """Write one f32 VSV1 volume per channel plus `manifest.json` listing their order."""
        files = []
        for i, channel in enumerate(Channel):
            name = "{:02d}_{}.vsv".format(i, channel.value)
            save_volume(VoxelGrid(self.channels[i], self.resolution), os.path.join(directory, name))
            files.append(name)

        write_json(
            os.path.join(directory, "manifest.json"),
            {
                "channels": Channel.values(),
                "files": files,
                "dims": list(self.dims),
                "resolution": list(self.resolution),
                "feature_order_tag": "{:016x}".format(self.feature_order_tag),
                "variant": self.variant.value,
            },
        )

    @classmethod
    def load(cls, directory):
        manifest = read_json(os.path.join(directory, "manifest.json"), FEATURE_MANIFEST_SCHEMA)
        if manifest["channels"] != Channel.values():
            raise FormatError("{}: channel order differs from this version's".format(directory))

        variant = FeatureVariant(manifest["variant"])
        if manifest["feature_order_tag"] != "{:016x}".format(feature_order_tag(variant)):
            raise FormatError("{}: feature order tag does not match its channels".format(directory))

        grids = [load_volume(os.path.join(directory, name)) for name in manifest["files"]]
        for grid in grids:
            if grid.voxel_type != VoxelType.F32 or list(grid.dims) != manifest["dims"]:
                raise FormatError("{}: channel volumes disagree with the manifest".format(
                    directory
                ))
        return cls(np.stack([g.data for g in grids]), grids[0].resolution, variant)


def assemble_features(
    em,
    vesicles,
    cap_nm=DEFAULT_CAP_NM,
    window_sigma=DEFAULT_WINDOW_SIGMA,
    use_vesicles=True,
    origin=(0, 0, 0),
    workers=1,
    region=None,
):
    """Compute the ten-channel `FeatureStack` of an EM volume.

    Parameters
    ----------
    em : `VoxelGrid`
        u8 EM volume.
    vesicles : `VesicleSet`
        Vesicle centroids in global coordinates; those outside `em` still count towards the
        distance channel.
    use_vesicles : `bool`
        False computes the ablation variant with no vesicle context.
    origin : `tuple`
        Global (x, y, z) of `em`'s first voxel, when `em` is a sub-volume.
    region : `BoundingBox`, optional
        Sub-box of `em` (in its own coordinates) to return features for; the rest of `em`
        only serves as context. Transforms are computed one at a time, so apart from `em`
        at most one full-size transform and its summed-volume table are held at once.

    Returns
    -------
    `FeatureStack` covering `region`, or all of `em`
    """
    from vesicle.vesicles import VesicleSet

    _require_u8(em, "assemble_features")
    variant = FeatureVariant.Full if use_vesicles else FeatureVariant.NoVesicles
    if not use_vesicles:
        vesicles = VesicleSet.empty()

    nx, ny, nz = em.dims
    if region is None:
        region = BoundingBox((0, 0, 0), (nx - 1, ny - 1, nz - 1))
    elif not region.within(em.dims):
        raise ParameterError("Feature region {} lies outside {}".format(region, em.dims))
    box = (tuple(origin), tuple(o + d - 1 for o, d in zip(origin, em.dims)))

    # pass 1 transforms, each followed by its pass 2 box summaries
    passes = [
        (lambda: em.data, (THETA0, THETA1), (0, 1)),
        (lambda: lbp_transform(em, workers).data, (THETA0,), (2,)),
        (lambda: gradient_magnitude(em, workers).data, (THETA1, THETA2), (3, 4)),
        (
            lambda: vesicle_indicator(em.dims, vesicles.within(*box), em.resolution, origin).data,
            (THETA2, THETA3),
            (5, 6),
        ),
        (lambda: structure_tensor_scalar(em, window_sigma, workers).data, (THETA1, THETA2), (8, 9)),
    ]
    rx, ry, rz = region.shape
    channels = np.empty((N_CHANNELS, rz, ry, rx), dtype=np.float32)
    for transform, kernels, indices in passes:
        integral = IntegralVolume(transform())
        for kernel, index in zip(kernels, indices):
            channels[index] = integral.window_mean(kernel, workers, region)
        del integral

    region_origin = tuple(o + m for o, m in zip(origin, region.min))
    channels[7] = vesicle_distance(
        region.shape, em.resolution, vesicles, cap_nm, region_origin, workers
    ).data

    log.debug("Assembled %s features for %s at origin %s", variant.value, region.shape,
              region_origin)
    return FeatureStack(channels, em.resolution, variant)


def _require_u8(grid, what):
    if grid.voxel_type != VoxelType.U8:
        raise ParameterError("{} expects a u8 EM volume, got {}".format(
            what, grid.voxel_type.value
        ))
