"""Blockwise detection over volumes too large to process at once.

The volume is tiled into disjoint cores; each core is processed inside a padded box and keeps
only the objects whose ownership point (rounded centroid) it contains. Vesicles are detected
first for the whole volume, block by block, so every block sees the same vesicle context.
"""
from collections import namedtuple
import logging
import os

import numpy as np

from vesicle.exceptions import BlockError, DataError, ParameterError, VesicleException
from vesicle.features import FEATURE_HALO, assemble_features, feature_order_tag
from vesicle.forest import predict
from vesicle.fusion import ObjectSet, fuse
from vesicle.lib.enums import FeatureVariant, MaskProvenance, VoxelType
from vesicle.lib.files import read_json, write_json
from vesicle.lib.schemas import BLOCK_MANIFEST_SCHEMA
from vesicle.utils import run_via_threadpool
from vesicle.vesicles import (
    VesicleParams,
    VesicleSet,
    find_candidates,
    matched_response,
    save_vesicles,
    suppress_candidates,
)
from vesicle.volume import (
    HEADER,
    NUMPY_TYPES,
    BoundingBox,
    MembraneMask,
    VoxelGrid,
    load_volume,
    membrane_mask_from_probability,
    read_header,
    save_volume,
    verify_volume,
)

log = logging.getLogger("vesicle")

# EM + ten feature channels + probability
RESIDENT_CHANNELS = 12


class BlockSpec(namedtuple("BlockSpec", ["index", "core", "padded"])):
    __slots__ = ()

    def read_box(self, dims):
        """The padded box grown by the feature halo: what a block reads to compute features."""
        return self.padded.expand(FEATURE_HALO, dims)


class BlockDecomposition(namedtuple("BlockDecomposition", ["blocks", "block_size", "pad", "dims"])):
    __slots__ = ()

    def __len__(self):
        return len(self.blocks)


def decompose(dims, block_size, pad):
    """Tile `dims` into cores of `block_size` (partial at the far faces), padded by `pad`."""
    dims = tuple(int(d) for d in dims)
    block_size = tuple(int(b) for b in block_size)
    pad = tuple(int(p) for p in pad)
    if any(b < 1 for b in block_size):
        raise ParameterError("Block size must be >= 1 on every axis, got {}".format(block_size))
    if any(p < 0 for p in pad):
        raise ParameterError("Pad must be >= 0 on every axis, got {}".format(pad))
    if any(d < 1 for d in dims):
        raise ParameterError("Volume dims must be >= 1, got {}".format(dims))

    nx, ny, nz = dims
    bx, by, bz = block_size
    blocks = []
    for z0 in range(0, nz, bz):
        for y0 in range(0, ny, by):
            for x0 in range(0, nx, bx):
                core = BoundingBox(
                    (x0, y0, z0), (min(x0 + bx, nx) - 1, min(y0 + by, ny) - 1, min(z0 + bz, nz) - 1)
                )
                blocks.append(BlockSpec(len(blocks), core, core.expand(pad, dims)))
    return BlockDecomposition(blocks, block_size, pad, dims)


class ArrayProvider(object):
    """Serve sub-boxes of an in-memory `VoxelGrid`."""

    def __init__(self, grid):
        self.grid = grid

    @property
    def dims(self):
        return self.grid.dims

    @property
    def resolution(self):
        return self.grid.resolution

    @property
    def voxel_type(self):
        return self.grid.voxel_type

    def read(self, bbox):
        return self.grid.crop(bbox)


class VolumeFileProvider(object):
    """Serve sub-boxes of a VSV1 file through a read-only memory map.

    The checksum is verified once on open unless `verify` is False.
    """

    def __init__(self, path, verify=True):
        if verify:
            self.voxel_type, self.dims, self.resolution = verify_volume(path)
        else:
            try:
                with open(path, "rb") as fp:
                    self.voxel_type, self.dims, self.resolution = read_header(fp, path)
            except OSError as e:
                raise DataError("{}: {}".format(path, e))

        nx, ny, nz = self.dims
        self.path = path
        self.array = np.memmap(
            path,
            dtype=NUMPY_TYPES[self.voxel_type],
            mode="r",
            offset=HEADER.size,
            shape=(nz, ny, nx),
        )

    def read(self, bbox):
        if not bbox.within(self.dims):
            raise ParameterError("Box {} lies outside volume dims {}".format(bbox, self.dims))
        return VoxelGrid(np.array(self.array[bbox.slices]), self.resolution)


def intensity_histogram(provider, labels=None, slab_depth=4):
    """Counts of each u8 intensity, read `slab_depth` slices at a time.

    With a `labels` provider only voxels whose label is nonzero are counted.
    """
    if provider.voxel_type != VoxelType.U8:
        raise ParameterError("Intensity histograms need a u8 EM volume")
    if labels is not None:
        if labels.voxel_type != VoxelType.U32:
            raise ParameterError("Band reference labels must be u32")
        if tuple(labels.dims) != tuple(provider.dims):
            raise ParameterError(
                "Labels {} and EM {} differ in dims".format(labels.dims, provider.dims)
            )

    nx, ny, nz = provider.dims
    counts = np.zeros(256, dtype=np.int64)
    for z0 in range(0, nz, slab_depth):
        box = BoundingBox((0, 0, z0), (nx - 1, ny - 1, min(z0 + slab_depth, nz) - 1))
        values = provider.read(box).data
        if labels is not None:
            values = values[labels.read(box).data > 0]
        counts += np.bincount(values.ravel(), minlength=256)
    return counts


class FullMaskPolicy(object):
    """Score every voxel."""

    def mask(self, em, bbox):
        return MembraneMask.full(em)

    def describe(self):
        return {"kind": "full"}


class BandpassMaskPolicy(object):
    """Membrane estimate from intensity cutoffs resolved once for the whole volume."""

    def __init__(self, cutoffs):
        self.cutoffs = cutoffs

    def mask(self, em, bbox):
        return MembraneMask.from_array(
            self.cutoffs.apply(em.data), em.resolution, MaskProvenance.IntensityBandpass
        )

    def describe(self):
        return {"kind": "bandpass", "lo_value": self.cutoffs.lo_value,
                "hi_value": self.cutoffs.hi_value}


class ProviderMaskPolicy(object):
    """Membrane mask (u8) or membrane probability (f32) read from an aligned provider."""

    def __init__(self, provider, threshold=0.5):
        self.provider = provider
        self.threshold = threshold

    def mask(self, em, bbox):
        grid = self.provider.read(bbox)
        if grid.voxel_type == VoxelType.F32:
            return membrane_mask_from_probability(grid, self.threshold)
        return MembraneMask(grid, MaskProvenance.ExternalProbability)

    def describe(self):
        return {"kind": "provider", "threshold": self.threshold}


def template_margin(template):
    """In-plane read margin so that every core pixel and its 3x3 neighbours see full windows."""
    return (template.half + 1, template.half + 1, 0)


def detect_vesicles_blockwise(provider, decomp, template, params=None, workers=1):
    """Vesicle candidates gathered per core, suppressed once over the whole volume.

    Blocks only contribute matched-filter peaks. Non-maximum suppression and the cluster
    filter then run a single time on the merged candidates instead of inside each padded
    block, so the result equals `detect_vesicles` on the whole volume for any block size.
    """
    params = params or VesicleParams()

    def _block(block):
        region = block.core.expand(template_margin(template), decomp.dims)
        try:
            em = provider.read(region)
            response = matched_response(em, template)
        except VesicleException as e:
            raise BlockError(block.index, str(e))
        except OSError as e:
            raise BlockError(block.index, "read failed ({})".format(e))
        return find_candidates(
            response, params.threshold, origin=region.min, core=block.core.relative_to(region)
        )

    found = run_via_threadpool(_block, decomp.blocks, max_threads=workers)
    centroids = np.concatenate([c for c, _ in found]) if found else np.zeros((0, 3), np.int64)
    scores = np.concatenate([s for _, s in found]) if found else np.zeros(0)
    return suppress_candidates(
        centroids,
        scores,
        provider.resolution,
        params.nms_radius_px,
        params.cluster_radius_nm,
        params.cluster_min,
    )


class BlockResult(namedtuple("BlockResult", ["index", "objects", "resident_voxels", "reused"])):
    __slots__ = ()


def process_block(block, provider, model, mask_policy, params, vesicles, dims, cap_nm=2000.0):
    """Features, prediction and fusion for one block; returns the objects its core owns.

    The block reads its padded box plus the feature halo, but features, mask and probability
    are only kept for the padded box.
    """
    read_box = block.read_box(dims)
    try:
        em = provider.read(read_box)
    except OSError as e:
        raise BlockError(block.index, "read failed ({})".format(e))
    except VesicleException as e:
        raise BlockError(block.index, str(e))

    use_vesicles = model.feature_order_tag != feature_order_tag(FeatureVariant.NoVesicles)
    inner = block.padded.relative_to(read_box)
    stack = assemble_features(em, vesicles, cap_nm=cap_nm, use_vesicles=use_vesicles,
                              origin=read_box.min, region=inner)
    padded_em = VoxelGrid(np.array(em.data[inner.slices]), em.resolution)
    del em
    mask = mask_policy.mask(padded_em, block.padded)

    prob = predict(model, stack, mask)
    resident = padded_em.size + stack.channels.size + prob.size
    limit = RESIDENT_CHANNELS * block.padded.volume
    if resident > limit:
        raise BlockError(block.index, "resident voxels {} exceed {}".format(resident, limit))

    local = fuse(prob, params)
    owned = []
    for o in local:
        moved = o.translate(block.padded.min)
        if block.core.contains(moved.ownership_point):
            owned.append(moved)

    log.debug("Block %i: %i objects fused, %i owned", block.index, len(local), len(owned))
    return BlockResult(block.index, owned, resident, False)


def _block_stem(run_dir, index):
    return os.path.join(run_dir, "block_{}".format(index))


def _save_block(run_dir, block, result, resolution):
    stem = _block_stem(run_dir, block.index)
    local = ObjectSet.from_objects(
        [o.translate(tuple(-m for m in block.padded.min)) for o in result.objects],
        block.padded.shape,
        resolution=resolution,
    )
    save_volume(local.label_grid(), stem + ".vsv")
    write_json(
        stem + ".json",
        {
            "index": block.index,
            "core": block.core.to_dict(),
            "padded": block.padded.to_dict(),
            "label_volume": os.path.basename(stem) + ".vsv",
            "objects": [o.to_dict() for o in local],
            "resident_voxels": result.resident_voxels,
        },
    )


def _load_block(run_dir, block):
    """The saved result of `block`, or None when it is missing, stale or fails its checksum."""
    stem = _block_stem(run_dir, block.index)
    if not os.path.exists(stem + ".json"):
        return None
    try:
        manifest = read_json(stem + ".json", BLOCK_MANIFEST_SCHEMA)
        if (
            BoundingBox.from_dict(manifest["core"]) != block.core
            or BoundingBox.from_dict(manifest["padded"]) != block.padded
        ):
            return None
        labels = load_volume(os.path.join(run_dir, manifest["label_volume"]))
    except DataError as e:
        log.warning("Recomputing block %i: %s", block.index, e)
        return None

    if labels.voxel_type != VoxelType.U32 or tuple(labels.dims) != block.padded.shape:
        return None
    local = ObjectSet.from_labels(labels)
    if len(local) != len(manifest["objects"]):
        return None
    objects = [o.translate(block.padded.min) for o in local]
    return BlockResult(block.index, objects, manifest.get("resident_voxels", 0), True)


def run_blockwise(
    provider,
    model,
    mask_policy,
    params,
    decomp,
    template=None,
    vesicle_params=None,
    vesicles=None,
    cap_nm=2000.0,
    run_dir=None,
    resume=False,
    workers=1,
):
    """Detect synapses block by block and merge the per-core results.

    Parameters
    ----------
    provider : `ArrayProvider` or `VolumeFileProvider`
        The u8 EM volume.
    model : `RandomForestModel`
    mask_policy : `FullMaskPolicy`, `BandpassMaskPolicy` or `ProviderMaskPolicy`
    params : `FusionParams`
    decomp : `BlockDecomposition`
    template : `VesicleTemplate`, optional
        Used to detect vesicles when `vesicles` is not given.
    vesicles : `VesicleSet`, optional
        Precomputed vesicle centroids in global coordinates.
    run_dir : `str`, optional
        Directory for per-block outputs, the vesicles and the merged objects.
    resume : `bool`
        Reuse block outputs in `run_dir` that pass their checksum.

    Returns
    -------
    `ObjectSet` equal to the monolithic result whenever the pad exceeds every object's extent.
    """
    if provider.voxel_type != VoxelType.U8:
        raise ParameterError("Blockwise detection expects a u8 EM volume")
    if tuple(decomp.dims) != tuple(provider.dims):
        raise ParameterError(
            "Decomposition covers {} but the volume is {}".format(decomp.dims, provider.dims)
        )

    use_vesicles = model.feature_order_tag != feature_order_tag(FeatureVariant.NoVesicles)
    if not use_vesicles:
        vesicles = VesicleSet.empty()
    elif vesicles is None:
        if template is None:
            raise ParameterError("A vesicle template or a vesicle set is required")
        vesicles = detect_vesicles_blockwise(provider, decomp, template, vesicle_params, workers)
    log.info("Using %i vesicles across %i blocks", len(vesicles), len(decomp))

    if run_dir is not None:
        save_vesicles(
            vesicles,
            os.path.join(run_dir, "vesicles.txt"),
            (vesicle_params or VesicleParams()).to_dict(),
        )

    def _run(block):
        if resume and run_dir is not None:
            saved = _load_block(run_dir, block)
            if saved is not None:
                return saved
        result = process_block(
            block, provider, model, mask_policy, params, vesicles, decomp.dims, cap_nm
        )
        if run_dir is not None:
            _save_block(run_dir, block, result, provider.resolution)
        return result

    results = run_via_threadpool(_run, decomp.blocks, max_threads=workers)
    reused = sum(r.reused for r in results)
    if reused:
        log.info("Reused %i of %i blocks", reused, len(results))

    objects = [o for r in sorted(results, key=lambda r: r.index) for o in r.objects]
    merged = ObjectSet.from_objects(objects, provider.dims, params, provider.resolution)
    if run_dir is not None:
        merged.save(os.path.join(run_dir, "objects"))
    log.info("Merged %i objects from %i blocks", len(merged), len(results))
    return merged


def detect_monolithic(em, model, mask, params, template=None, vesicle_params=None,
                      vesicles=None, cap_nm=2000.0, workers=1):
    """The whole pipeline on an in-memory volume: vesicles, features, prediction, fusion."""
    from vesicle.vesicles import detect_vesicles

    use_vesicles = model.feature_order_tag != feature_order_tag(FeatureVariant.NoVesicles)
    if not use_vesicles:
        vesicles = VesicleSet.empty()
    elif vesicles is None:
        if template is None:
            raise ParameterError("A vesicle template or a vesicle set is required")
        vp = vesicle_params or VesicleParams()
        vesicles = detect_vesicles(
            matched_response(em, template, workers),
            vp.threshold,
            vp.nms_radius_px,
            vp.cluster_radius_nm,
            vp.cluster_min,
        )
    stack = assemble_features(em, vesicles, cap_nm=cap_nm, use_vesicles=use_vesicles,
                              workers=workers)
    prob = predict(model, stack, mask, workers)
    return fuse(prob, params, workers), prob, vesicles
