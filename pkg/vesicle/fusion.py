"""Turn a synapse probability grid into discrete 3D objects."""
from collections import namedtuple
import logging
import os

import numpy as np

from vesicle.exceptions import FormatError, ParameterError
from vesicle.lib.enums import VoxelType
from vesicle.lib.files import read_json, write_json
from vesicle.lib.schemas import FUSION_PARAMS_SCHEMA, OBJECT_MANIFEST_SCHEMA
from vesicle.utils import map_slices
from vesicle.volume import BoundingBox, VoxelGrid, load_volume, save_volume

log = logging.getLogger("vesicle")

BECKER_MIN_VOXELS = 1000
UNBOUNDED_2D = 2 ** 31 - 1

CONNECTIVITY_2D = {4: 1, 8: 2}
CONNECTIVITY_3D = {6: 1, 18: 2, 26: 3}


class FusionParams(
    namedtuple(
        "FusionParams",
        ["threshold", "min2d", "max2d", "min3d", "persistence", "connectivity2d", "connectivity3d"],
    )
):
    __slots__ = ()

    def __new__(
        cls,
        threshold=0.5,
        min2d=0,
        max2d=10000,
        min3d=100,
        persistence=1,
        connectivity2d=8,
        connectivity3d=26,
    ):
        params = super(FusionParams, cls).__new__(
            cls,
            float(threshold),
            int(min2d),
            int(max2d),
            int(min3d),
            int(persistence),
            int(connectivity2d),
            int(connectivity3d),
        )
        if not 0.0 <= params.threshold <= 1.0:
            raise ParameterError("Threshold must lie in [0, 1], got {}".format(threshold))
        if params.min2d < 0 or params.min3d < 0:
            raise ParameterError("Size filters must be >= 0")
        if params.min2d > params.max2d:
            raise ParameterError(
                "min2d ({}) exceeds max2d ({})".format(params.min2d, params.max2d)
            )
        if params.persistence < 1:
            raise ParameterError("Persistence must be >= 1 slice, got {}".format(persistence))
        if params.connectivity2d not in CONNECTIVITY_2D:
            raise ParameterError("2D connectivity must be 4 or 8, got {}".format(connectivity2d))
        if params.connectivity3d not in CONNECTIVITY_3D:
            raise ParameterError(
                "3D connectivity must be 6, 18 or 26, got {}".format(connectivity3d)
            )
        return params

    def to_dict(self):
        return dict(self._asdict())

    @classmethod
    def from_dict(cls, d):
        import jsonschema

        try:
            jsonschema.validate(d, FUSION_PARAMS_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ParameterError("Invalid fusion parameters: {}".format(e.message))
        return cls(**{k: v for k, v in d.items() if k in cls._fields})


class DetectionObject(object):
    """One synapse: a 3D-connected voxel set.

    Parameters
    ----------
    id : `int`
        Label, >= 1.
    voxels : `numpy.ndarray`
        (n, 3) int64 (x, y, z) coordinates; stored sorted by (z, y, x).
    """

    def __init__(self, id, voxels):
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if id < 1:
            raise ParameterError("Object ids start at 1, got {}".format(id))
        if not len(voxels):
            raise ParameterError("Object {} has no voxels".format(id))
        order = np.lexsort((voxels[:, 0], voxels[:, 1], voxels[:, 2]))
        self.id = int(id)
        self.voxels = voxels[order]
        self.voxels.flags.writeable = False

    @property
    def voxel_count(self):
        return len(self.voxels)

    @property
    def centroid(self):
        return tuple(float(c) for c in self.voxels.mean(axis=0))

    @property
    def ownership_point(self):
        """The voxel whose block owns this object: floor(centroid + 0.5) per axis."""
        return tuple(int(np.floor(c + 0.5)) for c in self.centroid)

    @property
    def bbox(self):
        return BoundingBox(self.voxels.min(axis=0), self.voxels.max(axis=0))

    @property
    def z_extent(self):
        z = self.voxels[:, 2]
        return int(z[-1] - z[0] + 1)

    def sort_key(self):
        """Descending size, then bbox min as (z, y, x), then the first voxel."""
        bmin = self.bbox.min
        first = self.voxels[0]
        return (-self.voxel_count, bmin[2], bmin[1], bmin[0], first[2], first[1], first[0])

    def with_id(self, id):
        return DetectionObject(id, self.voxels)

    def translate(self, offset):
        return DetectionObject(self.id, self.voxels + np.asarray(offset, dtype=np.int64))

    def voxel_tuples(self):
        return tuple(map(tuple, self.voxels.tolist()))

    def to_dict(self):
        return {
            "id": self.id,
            "centroid": list(self.centroid),
            "bbox": self.bbox.to_dict(),
            "voxel_count": self.voxel_count,
            "z_extent": self.z_extent,
        }

    def __repr__(self):
        return "<DetectionObject {} voxels={} centroid={}>".format(
            self.id, self.voxel_count, tuple(round(c, 2) for c in self.centroid)
        )


def relabel(objects):
    """Order objects by `DetectionObject.sort_key` and number them 1..k."""
    ordered = sorted(objects, key=lambda o: o.sort_key())
    return [o.with_id(i) for i, o in enumerate(ordered, 1)]


class ObjectSet(object):
    """Disjoint detection objects of a volume, with the fusion parameters that made them."""

    def __init__(self, objects, source_dims, params=None, resolution=(1.0, 1.0, 1.0)):
        self.objects = list(objects)
        self.source_dims = tuple(int(d) for d in source_dims)
        self.params = params
        self.resolution = tuple(float(r) for r in resolution)

        ids = [o.id for o in self.objects]
        if ids != list(range(1, len(ids) + 1)):
            raise ParameterError("Object ids must be dense and ordered from 1")

    @classmethod
    def from_objects(cls, objects, source_dims, params=None, resolution=(1.0, 1.0, 1.0)):
        return cls(relabel(objects), source_dims, params, resolution)

    @classmethod
    def from_labels(cls, labels, params=None):
        """Objects from a label grid; ids become dense in ascending label order."""
        data = labels.data
        flat = data.ravel()
        index = np.flatnonzero(flat)
        objects = []
        if len(index):
            values = flat[index]
            order = np.argsort(values, kind="stable")
            index, values = index[order], values[order]
            starts = np.flatnonzero(np.r_[True, values[1:] != values[:-1]])
            nz, ny, nx = data.shape
            z, y, x = np.unravel_index(index, (nz, ny, nx))
            coords = np.column_stack([x, y, z])
            for i, group in enumerate(np.split(coords, starts[1:]), 1):
                objects.append(DetectionObject(i, group))
        return cls(objects, labels.dims, params, labels.resolution)

    def __len__(self):
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)

    def __getitem__(self, i):
        return self.objects[i]

    def __repr__(self):
        return "<ObjectSet {} objects dims={}>".format(len(self), self.source_dims)

    def canonical(self):
        """Sorted tuple of voxel-coordinate tuples, for comparing object geometry."""
        return tuple(sorted(o.voxel_tuples() for o in self.objects))

    def label_grid(self):
        nx, ny, nz = self.source_dims
        data = np.zeros((nz, ny, nx), dtype=np.uint32)
        for o in self.objects:
            data[o.voxels[:, 2], o.voxels[:, 1], o.voxels[:, 0]] = o.id
        return VoxelGrid(data, self.resolution)

    def manifest(self, label_volume):
        return {
            "label_volume": label_volume,
            "source_dims": list(self.source_dims),
            "resolution": list(self.resolution),
            "params": self.params.to_dict() if self.params is not None else None,
            "objects": [o.to_dict() for o in self.objects],
        }

    def save(self, stem):
        """Write `<stem>.vsv` (u32 labels) and `<stem>.json`; returns the manifest path."""
        save_volume(self.label_grid(), stem + ".vsv")
        write_json(stem + ".json", self.manifest(os.path.basename(stem) + ".vsv"))
        return stem + ".json"

    @classmethod
    def load(cls, path):
        """Read an object manifest and its label volume (or a bare u32 label volume)."""
        if path.endswith(".vsv"):
            labels = load_volume(path)
            if labels.voxel_type != VoxelType.U32:
                raise FormatError("{}: label volumes must be u32".format(path))
            return cls.from_labels(labels)

        manifest = read_json(path, OBJECT_MANIFEST_SCHEMA)
        labels = load_volume(os.path.join(os.path.dirname(path), manifest["label_volume"]))
        if labels.voxel_type != VoxelType.U32 or list(labels.dims) != manifest["source_dims"]:
            raise FormatError("{}: label volume does not match the manifest".format(path))

        params = manifest.get("params")
        loaded = cls.from_labels(labels, FusionParams.from_dict(params) if params else None)
        expected = [(o["id"], o["voxel_count"]) for o in manifest["objects"]]
        if [(o.id, o.voxel_count) for o in loaded] != expected:
            raise FormatError("{}: objects disagree with the label volume".format(path))
        return loaded


def _structure(ndim, connectivity):
    from scipy import ndimage

    rank = (CONNECTIVITY_2D if ndim == 2 else CONNECTIVITY_3D)[connectivity]
    return ndimage.generate_binary_structure(ndim, rank)


def filter_2d(binary, min2d, max2d, connectivity2d=8, workers=1):
    """Keep the per-slice components whose voxel count lies in [min2d, max2d]."""
    from scipy import ndimage

    structure = _structure(2, connectivity2d)

    def _slice(plane):
        labels, n = ndimage.label(plane, structure=structure)
        if not n:
            return plane
        sizes = np.bincount(labels.ravel())
        keep = (sizes >= min2d) & (sizes <= max2d)
        keep[0] = False
        return keep[labels]

    _, ny, nx = binary.shape
    if min2d <= 1 and max2d >= nx * ny:
        return binary
    return map_slices(_slice, binary, workers, bool)


def label_components(prob, threshold, min2d=0, max2d=UNBOUNDED_2D, connectivity2d=8,
                     connectivity3d=26, workers=1):
    """Threshold, filter per slice, then label 3D components.

    Returns
    -------
    `tuple` of (int32 label array [z, y, x], component count)
    """
    from scipy import ndimage

    binary = prob.data >= threshold
    binary = filter_2d(binary, min2d, max2d, connectivity2d, workers)
    labels, n = ndimage.label(binary, structure=_structure(3, connectivity3d))
    return labels, n


def component_stats(labels, n):
    """Voxel counts and z extents of components 1..n (index 0 unused)."""
    from scipy import ndimage

    counts = np.bincount(labels.ravel(), minlength=n + 1)
    z_extent = np.zeros(n + 1, dtype=np.int64)
    for i, box in enumerate(ndimage.find_objects(labels, max_label=n), 1):
        if box is not None:
            z_extent[i] = box[0].stop - box[0].start
    return counts, z_extent


def objects_from_components(labels, keep):
    """`DetectionObject`s (unnumbered order) for the component ids in `keep`."""
    from scipy import ndimage

    objects = []
    if not len(keep):
        return objects
    boxes = ndimage.find_objects(labels)
    for i in keep:
        box = boxes[i - 1]
        z, y, x = np.nonzero(labels[box] == i)
        coords = np.column_stack([x + box[2].start, y + box[1].start, z + box[0].start])
        objects.append(DetectionObject(int(i), coords))
    return objects


def fuse(prob, params, workers=1):
    """Objects from a probability grid.

    The stages run in a fixed order: threshold, per-slice components filtered by
    [min2d, max2d], 3D components, persistence, then min3d. Objects are numbered by
    descending size.
    """
    labels, n = label_components(
        prob,
        params.threshold,
        params.min2d,
        params.max2d,
        params.connectivity2d,
        params.connectivity3d,
        workers,
    )
    counts, z_extent = component_stats(labels, n)
    ids = np.arange(n + 1)
    keep = ids[(ids > 0) & (z_extent >= params.persistence) & (counts >= params.min3d)]

    objects = relabel(objects_from_components(labels, keep))
    log.debug("Fused %i of %i components at threshold %.3f", len(objects), n, params.threshold)
    return ObjectSet(objects, prob.dims, params, prob.resolution)


def becker_params(threshold, min_voxels=BECKER_MIN_VOXELS, connectivity3d=26):
    """The fusion parameters equivalent to the threshold-and-size baseline."""
    return FusionParams(
        threshold,
        min2d=0,
        max2d=UNBOUNDED_2D,
        min3d=min_voxels,
        persistence=1,
        connectivity3d=connectivity3d,
    )


def becker_fuse(prob, threshold, min_voxels=BECKER_MIN_VOXELS, connectivity3d=26, workers=1):
    """Baseline fusion: 3D components of prob >= threshold with at least `min_voxels` voxels."""
    return fuse(prob, becker_params(threshold, min_voxels, connectivity3d), workers)


def discard_border(objects, pad):
    """Drop objects whose centroid lies within `pad` voxels of any face; ids are re-densified."""
    pad = tuple(int(p) for p in pad)
    if any(p < 0 for p in pad):
        raise ParameterError("Pad must be >= 0, got {}".format(pad))
    if any(2 * p >= d for p, d in zip(pad, objects.source_dims) if p):
        raise ParameterError(
            "Pad {} must be under half the volume dims {}".format(pad, objects.source_dims)
        )

    survivors = [
        o
        for o in objects
        if all(p <= c <= d - 1 - p for c, p, d in zip(o.centroid, pad, objects.source_dims))
    ]
    return ObjectSet(
        [o.with_id(i) for i, o in enumerate(survivors, 1)],
        objects.source_dims,
        objects.params,
        objects.resolution,
    )
