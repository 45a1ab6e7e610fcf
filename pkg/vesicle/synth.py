"""Synthetic EM phantoms with known synapses, membranes and vesicles.

Bright cytoplasm is divided into cells by dark, gently curved membrane sheets running through
every slice. Synapses are dark ellipsoids embedded in a sheet, spanning a few slices, each
with a cluster of ring-shaped vesicles on one side.
"""
from collections import namedtuple
import logging
import math
import os

import numpy as np

from vesicle.exceptions import ParameterError
from vesicle.lib.enums import MaskProvenance
from vesicle.lib.files import read_json, write_json
from vesicle.fusion import DetectionObject, ObjectSet
from vesicle.vesicles import VesicleSet, load_vesicles, save_vesicles
from vesicle.volume import MembraneMask, VoxelGrid, load_volume, save_volume

log = logging.getLogger("vesicle")

BACKGROUND = 200.0
MEMBRANE = 90.0
SYNAPSE_CORE = 60.0
SYNAPSE_SURFACE = 90.0
VESICLE_RING = 70.0
HALO_REACH = 1.5

ALONG_RADIUS = (10, 20)
ACROSS_RADIUS = (6, 8)
Z_SPAN = (2, 5)
MEMBRANE_THICKNESS = (2.0, 4.0)
MIN_CLUSTER = 5
VESICLE_SPACING_PX = 10.0
CLUSTER_REACH_NM = 450.0
PLACEMENT_ATTEMPTS = 200

MIN_DIMS = (64, 64, 16)
DENSITY_RANGE = (0.1, 2.0)


class PhantomSpec(
    namedtuple(
        "PhantomSpec",
        [
            "dims",
            "resolution",
            "synapse_density",
            "vesicle_cluster_rate",
            "noise_sigma",
            "seed",
            "vesicle_radius_px",
            "membrane_spacing_px",
        ],
    )
):
    """Phantom parameters.

    `synapse_density` is in objects per cubic micron; `vesicle_cluster_rate` is the mean
    number of vesicles per cluster.
    """

    __slots__ = ()

    def __new__(
        cls,
        dims=(128, 128, 40),
        resolution=(6.0, 6.0, 30.0),
        synapse_density=0.5,
        vesicle_cluster_rate=7.0,
        noise_sigma=8.0,
        seed=0,
        vesicle_radius_px=4,
        membrane_spacing_px=72,
    ):
        spec = super(PhantomSpec, cls).__new__(
            cls,
            tuple(int(d) for d in dims),
            tuple(float(r) for r in resolution),
            float(synapse_density),
            float(vesicle_cluster_rate),
            float(noise_sigma),
            int(seed),
            int(vesicle_radius_px),
            int(membrane_spacing_px),
        )
        if len(spec.dims) != 3 or any(d < m for d, m in zip(spec.dims, MIN_DIMS)):
            raise ParameterError("Phantom dims must be at least {}, got {}".format(MIN_DIMS, dims))
        if len(spec.resolution) != 3 or not all(r > 0 for r in spec.resolution):
            raise ParameterError("Phantom resolution must be three positive values")
        lo, hi = DENSITY_RANGE
        if not lo <= spec.synapse_density <= hi:
            raise ParameterError(
                "Synapse density must lie in [{}, {}] per cubic micron, got {}".format(
                    lo, hi, synapse_density
                )
            )
        if not spec.vesicle_cluster_rate >= 1:
            raise ParameterError("Vesicle cluster rate must be >= 1")
        if spec.noise_sigma < 0:
            raise ParameterError("Noise sigma must be >= 0")
        if not 3 <= spec.vesicle_radius_px <= 5:
            raise ParameterError("Vesicle radius must lie in [3, 5] px")
        if spec.membrane_spacing_px < 2 * (ALONG_RADIUS[1] + 2):
            raise ParameterError("Membrane spacing is too small to hold a synapse")
        return spec

    @property
    def volume_um3(self):
        return float(np.prod(np.asarray(self.dims) * np.asarray(self.resolution))) / 1e9

    @property
    def synapse_count(self):
        return int(round(self.synapse_density * self.volume_um3))

    def to_dict(self):
        d = dict(self._asdict())
        d["dims"] = list(self.dims)
        d["resolution"] = list(self.resolution)
        return d


class Phantom(namedtuple("Phantom", ["em", "membrane", "truth", "vesicle_truth", "spec"])):
    __slots__ = ()

    def save(self, directory):
        save_volume(self.em, os.path.join(directory, "em.vsv"))
        save_volume(self.membrane.grid, os.path.join(directory, "membrane.vsv"))
        self.truth.save(os.path.join(directory, "truth"))
        save_vesicles(
            self.vesicle_truth, os.path.join(directory, "vesicles.txt"), self.spec.to_dict()
        )
        write_json(os.path.join(directory, "phantom.json"), self.spec.to_dict())

    @classmethod
    def load(cls, directory):
        spec = PhantomSpec(**read_json(os.path.join(directory, "phantom.json")))
        membrane = load_volume(os.path.join(directory, "membrane.vsv"))
        return cls(
            load_volume(os.path.join(directory, "em.vsv")),
            MembraneMask(membrane, MaskProvenance.Synthetic),
            ObjectSet.load(os.path.join(directory, "truth.json")),
            load_vesicles(os.path.join(directory, "vesicles.txt")),
            spec,
        )


class _Sheet(object):
    """A membrane sheet: normal = centre(along, z) along one in-plane axis."""

    def __init__(self, axis, offset, amplitude, period, phase, tilt, thickness, nz):
        self.axis = axis
        self.offset = offset
        self.amplitude = amplitude
        self.period = period
        self.phase = phase
        self.tilt = tilt
        self.thickness = thickness
        self.z_mid = (nz - 1) / 2.0

    def centre(self, along, z):
        return (
            self.offset
            + self.amplitude * np.sin(2 * np.pi * along / self.period + self.phase)
            + self.tilt * (z - self.z_mid)
        )

    def frame(self, yy, xx, z):
        """(along, normal offset from the centre line) for every pixel of a slice."""
        along, normal = (yy, xx) if self.axis == "x" else (xx, yy)
        return along, normal - self.centre(along, z)

    def to_xy(self, along, normal_offset, z):
        normal = self.centre(along, z) + normal_offset
        return (normal, along) if self.axis == "x" else (along, normal)


def _sheets(spec, rng):
    nx, ny, nz = spec.dims
    sheets = []
    for axis, extent in (("x", nx), ("y", ny)):
        position = rng.uniform(0.3, 0.7) * spec.membrane_spacing_px
        while position < extent - 4:
            sheets.append(
                _Sheet(
                    axis,
                    position,
                    amplitude=rng.uniform(3.0, 8.0),
                    period=rng.uniform(80.0, 160.0),
                    phase=rng.uniform(0.0, 2 * np.pi),
                    tilt=rng.uniform(-0.3, 0.3),
                    thickness=rng.uniform(*MEMBRANE_THICKNESS),
                    nz=nz,
                )
            )
            position += spec.membrane_spacing_px * rng.uniform(0.9, 1.1)
    return sheets


class _Synapse(object):
    def __init__(self, sheet, along, z0, span, along_radius, across_radius):
        self.sheet = sheet
        self.along = along
        self.z0 = z0
        self.span = span
        self.along_radius = along_radius
        self.across_radius = across_radius

    @property
    def slices(self):
        return range(self.z0, self.z0 + self.span)

    def rho(self, yy, xx, z):
        """Normalized ellipsoidal radius of every pixel of slice z (1 on the surface)."""
        z_mid = self.z0 + (self.span - 1) / 2.0
        scale = math.sqrt(1.0 - ((z - z_mid) / ((self.span + 1) / 2.0)) ** 2)
        along, normal = self.sheet.frame(yy, xx, z)
        return np.hypot(
            (along - self.along) / (self.along_radius * scale),
            normal / (self.across_radius * scale),
        )


def _disk(yy, xx, x, y, radius):
    return (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius


def generate_phantom(spec):
    """Generate the phantom described by `spec`; equal specs give identical phantoms."""
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    res = np.asarray(spec.resolution)
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)

    sheets = _sheets(spec, rng)
    membrane = np.zeros((nz, ny, nx), dtype=bool)
    for z in range(nz):
        for sheet in sheets:
            _, normal = sheet.frame(yy, xx, z)
            membrane[z] |= np.abs(normal) <= sheet.thickness / 2.0

    reserved = np.zeros((nz, ny, nx), dtype=bool)
    synapses, clusters, object_voxels = [], [], []
    vesicles = []
    r = spec.vesicle_radius_px
    target = spec.synapse_count

    attempts = 0
    while len(synapses) < target:
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS * max(1, target):
            raise ParameterError(
                "Could not place {} synapses in a {} phantom".format(target, spec.dims)
            )

        sheet = sheets[rng.integers(len(sheets))]
        along_radius = rng.uniform(*ALONG_RADIUS)
        across_radius = rng.uniform(*ACROSS_RADIUS)
        span = int(rng.integers(Z_SPAN[0], Z_SPAN[1] + 1))
        n_along = ny if sheet.axis == "x" else nx
        n_normal = nx if sheet.axis == "x" else ny
        along = rng.uniform(along_radius + 2, n_along - along_radius - 3)
        z0 = int(rng.integers(0, nz - span + 1))
        candidate = _Synapse(sheet, along, z0, span, along_radius, across_radius)

        centres = [sheet.centre(along, z) for z in candidate.slices]
        if min(centres) < across_radius + 2 or max(centres) > n_normal - across_radius - 3:
            continue

        body = np.zeros((span, ny, nx), dtype=bool)
        guard = np.zeros((span, ny, nx), dtype=bool)
        for i, z in enumerate(candidate.slices):
            rho = candidate.rho(yy, xx, z)
            body[i] = rho <= 1.0
            guard[i] = rho <= HALO_REACH
        window = slice(z0, z0 + span)
        if not body.any() or (guard & reserved[window]).any():
            continue

        z, y, x = np.nonzero(body)
        coords = np.column_stack([x, y, z + z0])
        blocked = membrane.copy()
        blocked[window] |= body
        centroid_nm = coords.mean(axis=0) * res

        placed = _place_cluster(
            spec, rng, candidate, centroid_nm, blocked, reserved, vesicles, yy, xx
        )
        if placed is None:
            continue

        reserved[window] |= guard
        for vx, vy, vz in placed:
            reserved[vz] |= _disk(yy, xx, vx, vy, r + 2)
        vesicles.extend(placed)
        synapses.append(candidate)
        clusters.append(placed)
        object_voxels.append(coords)

    em = np.full((nz, ny, nx), BACKGROUND)
    em[membrane] = MEMBRANE
    for synapse in synapses:
        for z in synapse.slices:
            rho = synapse.rho(yy, xx, z)
            halo = (rho > 1.0) & (rho <= HALO_REACH)
            em[z][halo] = np.minimum(
                em[z][halo],
                SYNAPSE_SURFACE + (rho[halo] - 1.0) / (HALO_REACH - 1.0) * (BACKGROUND - SYNAPSE_SURFACE),
            )
            core = rho <= 1.0
            em[z][core] = SYNAPSE_CORE + (SYNAPSE_SURFACE - SYNAPSE_CORE) * rho[core]
    for vx, vy, vz in vesicles:
        d = np.hypot(xx - vx, yy - vy)
        ring = (d >= r - 2) & (d <= r)
        em[vz][ring] = np.minimum(em[vz][ring], VESICLE_RING)

    for coords in object_voxels:
        membrane[coords[:, 2], coords[:, 1], coords[:, 0]] = True

    if spec.noise_sigma > 0:
        em = em + rng.normal(0.0, spec.noise_sigma, size=em.shape)
    em = np.clip(np.rint(em), 0, 255).astype(np.uint8)

    truth = ObjectSet.from_objects(
        [DetectionObject(i, coords) for i, coords in enumerate(object_voxels, 1)],
        spec.dims,
        resolution=spec.resolution,
    )
    log.info(
        "Generated a %s phantom with %i synapses and %i vesicles",
        spec.dims,
        len(truth),
        len(vesicles),
    )
    return Phantom(
        VoxelGrid(em, spec.resolution),
        MembraneMask.from_array(membrane, spec.resolution, MaskProvenance.Synthetic),
        truth,
        VesicleSet(np.asarray(vesicles, dtype=np.int64).reshape(-1, 3)),
        spec,
    )


def _place_cluster(spec, rng, synapse, centroid_nm, blocked, reserved, placed_before, yy, xx):
    """Vesicles on one side of `synapse`, or None when fewer than MIN_CLUSTER fit."""
    nx, ny, nz = spec.dims
    res = np.asarray(spec.resolution)
    r = spec.vesicle_radius_px
    wanted = max(MIN_CLUSTER, int(rng.poisson(spec.vesicle_cluster_rate)))
    side = 1.0 if rng.random() < 0.5 else -1.0

    placed = []
    for _ in range(40 * wanted):
        if len(placed) == wanted:
            break
        z = int(rng.integers(max(0, synapse.z0 - 1), min(nz, synapse.z0 + synapse.span + 1)))
        along = synapse.along + rng.uniform(-synapse.along_radius, synapse.along_radius)
        offset = side * (synapse.across_radius + r + 4 + rng.uniform(0.0, 30.0))
        fx, fy = synapse.sheet.to_xy(along, offset, z)
        x, y = int(round(float(fx))), int(round(float(fy)))

        if not (r + 2 <= x < nx - r - 2 and r + 2 <= y < ny - r - 2):
            continue
        if np.linalg.norm(np.array([x, y, z]) * res - centroid_nm) > CLUSTER_REACH_NM:
            continue
        near = [
            (px, py) for px, py, pz in placed_before + placed if pz == z
        ]
        if any(math.hypot(x - px, y - py) < VESICLE_SPACING_PX for px, py in near):
            continue
        clearance = _disk(yy, xx, x, y, r + 2)
        if (blocked[z] & clearance).any() or (reserved[z] & clearance).any():
            continue
        placed.append((x, y, z))

    if len(placed) < MIN_CLUSTER:
        return None
    return placed
