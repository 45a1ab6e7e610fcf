"""Vesicle centroid detection by matched filtering.

Each z-slice is correlated with a ring-shaped template (normalized cross-correlation), local
maxima above a threshold become candidates, and candidates survive non-maximum suppression
and a cluster rule: isolated responses are rarely vesicles, which come in groups.
"""
from collections import namedtuple
import logging
import os

import numpy as np

from vesicle.exceptions import FormatError, ParameterError, raise_io_error
from vesicle.lib.enums import VoxelType
from vesicle.lib.files import atomic_write, read_json, write_json
from vesicle.utils import map_slices
from vesicle.volume import VoxelGrid

log = logging.getLogger("vesicle")

DEFAULT_THRESHOLD = 0.6
DEFAULT_NMS_RADIUS_PX = 5.0
DEFAULT_CLUSTER_RADIUS_NM = 500.0
DEFAULT_CLUSTER_MIN = 4
# ring centre of a 4 px vesicle drawn 2 px thick
DEFAULT_TEMPLATE_RADIUS = 3.0
DEFAULT_TEMPLATE_THICKNESS = 2.0
DEFAULT_TEMPLATE_SIDE = 11


class VesicleParams(
    namedtuple("VesicleParams", ["threshold", "nms_radius_px", "cluster_radius_nm", "cluster_min"])
):
    __slots__ = ()

    def __new__(
        cls,
        threshold=DEFAULT_THRESHOLD,
        nms_radius_px=DEFAULT_NMS_RADIUS_PX,
        cluster_radius_nm=DEFAULT_CLUSTER_RADIUS_NM,
        cluster_min=DEFAULT_CLUSTER_MIN,
    ):
        params = super(VesicleParams, cls).__new__(
            cls, float(threshold), float(nms_radius_px), float(cluster_radius_nm), int(cluster_min)
        )
        if not -1.0 < params.threshold < 1.0:
            raise ParameterError("Vesicle threshold must lie in (-1, 1), got {}".format(threshold))
        if params.nms_radius_px < 0 or params.cluster_radius_nm < 0:
            raise ParameterError("Vesicle radii must be >= 0")
        if params.cluster_min < 1:
            raise ParameterError("Cluster minimum must be >= 1, got {}".format(cluster_min))
        return params

    def to_dict(self):
        return dict(self._asdict())


class VesicleTemplate(object):
    """A zero-mean, unit-norm square patch with an odd side length."""

    def __init__(self, patch):
        patch = np.asarray(patch, dtype=np.float64)
        if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
            raise ParameterError("Vesicle template must be square, got {}".format(patch.shape))
        if patch.shape[0] % 2 == 0:
            raise ParameterError(
                "Vesicle template side must be odd, got {}".format(patch.shape[0])
            )

        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm == 0:
            raise ParameterError("Vesicle template is flat and cannot be normalized")
        self.patch = (patch / norm).astype(np.float32)

    @property
    def side(self):
        return self.patch.shape[0]

    @property
    def half(self):
        return self.side // 2

    @classmethod
    def synthetic(
        cls,
        radius=DEFAULT_TEMPLATE_RADIUS,
        thickness=DEFAULT_TEMPLATE_THICKNESS,
        side=DEFAULT_TEMPLATE_SIDE,
    ):
        """A dark annulus (-1 on the ring, +1 elsewhere) before normalization."""
        if side < 1 or side % 2 == 0:
            raise ParameterError("Vesicle template side must be odd, got {}".format(side))
        if not radius > 0 or not thickness > 0:
            raise ParameterError("Template radius and thickness must be > 0")
        if radius + thickness / 2.0 > side // 2:
            raise ParameterError(
                "A ring of radius {} and thickness {} does not fit a {}px template".format(
                    radius, thickness, side
                )
            )

        half = side // 2
        yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
        d = np.hypot(xx, yy)
        return cls(np.where(np.abs(d - radius) <= thickness / 2.0, -1.0, 1.0))

    @classmethod
    def from_exemplars(cls, patches):
        """The pixelwise mean of real vesicle patches, normalized."""
        patches = [np.asarray(p, dtype=np.float64) for p in patches]
        if not patches:
            raise ParameterError("At least one exemplar patch is required")
        shapes = {p.shape for p in patches}
        if len(shapes) > 1:
            raise ParameterError(
                "Exemplar patches differ in size: {}".format(", ".join(map(str, sorted(shapes))))
            )
        return cls(np.mean(patches, axis=0))

    def __repr__(self):
        return "<VesicleTemplate side={}>".format(self.side)


def build_template(
    exemplars=None,
    radius=DEFAULT_TEMPLATE_RADIUS,
    thickness=DEFAULT_TEMPLATE_THICKNESS,
    side=DEFAULT_TEMPLATE_SIDE,
):
    """Template from exemplar patches when given, else the synthetic ring."""
    if exemplars is not None:
        return VesicleTemplate.from_exemplars(exemplars)
    return VesicleTemplate.synthetic(radius, thickness, side)


def extract_exemplars(em, vesicles, side=DEFAULT_TEMPLATE_SIDE):
    """Cut `side`-square patches centred on each vesicle; vesicles too close to an edge are
    skipped."""
    if side < 1 or side % 2 == 0:
        raise ParameterError("Exemplar side must be odd, got {}".format(side))

    half = side // 2
    nx, ny, nz = em.dims
    patches = []
    for x, y, z in vesicles.centroids:
        if half <= x < nx - half and half <= y < ny - half and 0 <= z < nz:
            patches.append(em.data[z, y - half : y + half + 1, x - half : x + half + 1])

    if not patches:
        raise ParameterError("No vesicle lies far enough from the edge to cut an exemplar")
    log.debug("Extracted %i of %i exemplar patches", len(patches), len(vesicles))
    return patches


def _window_sums(plane, side):
    """Exact sum and sum of squares of every fully inside `side`-square window."""
    values = plane.astype(np.int64)
    ny, nx = values.shape
    out = []
    for v in (values, values * values):
        table = np.zeros((ny + 1, nx + 1), dtype=np.int64)
        table[1:, 1:] = v.cumsum(axis=0).cumsum(axis=1)
        out.append(
            table[side:, side:] - table[:-side, side:] - table[side:, :-side] + table[:-side, :-side]
        )
    return out


def _ncc_slice(plane, template):
    from scipy import ndimage

    side = template.shape[0]
    half = side // 2
    ny, nx = plane.shape
    out = np.full((ny, nx), -1.0, dtype=np.float64)

    numerator = ndimage.correlate(plane.astype(np.float64), template, mode="constant")
    numerator = numerator[half : ny - half, half : nx - half]

    total, squares = _window_sums(plane, side)
    n = side * side
    energy = n * squares - total * total

    inside = out[half : ny - half, half : nx - half]
    flat = energy == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = numerator / np.sqrt(energy / float(n))
    inside[...] = np.where(flat, 0.0, np.clip(ncc, -1.0, 1.0))
    return out.astype(np.float32)


def matched_response(em, template, workers=1):
    """Per-slice normalized cross-correlation of `em` with `template`, in [-1, 1].

    Pixels whose window leaves the slice get -1; windows with no variance get 0.
    """
    if em.voxel_type != VoxelType.U8:
        raise ParameterError("matched_response expects a u8 EM volume")
    nx, ny, _ = em.dims
    if template.side > min(nx, ny):
        raise ParameterError(
            "Template side {} exceeds the slice size {}x{}".format(template.side, nx, ny)
        )

    t = template.patch.astype(np.float64)
    t = t - t.mean()
    t = t / np.linalg.norm(t)
    return VoxelGrid(
        map_slices(lambda plane: _ncc_slice(plane, t), em.data, workers, np.float32),
        em.resolution,
    )


class VesicleSet(object):
    """Vesicle centroids as (x, y, z) voxel coordinates with matched-filter scores.

    Entries are kept sorted by (z, y, x); centroids are unique.
    """

    def __init__(self, centroids, scores=None):
        centroids = np.asarray(centroids, dtype=np.int64).reshape(-1, 3)
        if scores is None:
            scores = np.ones(len(centroids))
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if len(scores) != len(centroids):
            raise ParameterError("Every vesicle centroid needs exactly one score")

        order = np.lexsort((centroids[:, 0], centroids[:, 1], centroids[:, 2]))
        centroids, scores = centroids[order], scores[order]
        if len(centroids) > 1 and (np.diff(centroids, axis=0) == 0).all(axis=1).any():
            raise ParameterError("Vesicle centroids must be unique")

        self.centroids = centroids
        self.scores = scores

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3), dtype=np.int64), np.zeros(0))

    def __len__(self):
        return len(self.centroids)

    def __iter__(self):
        for (x, y, z), score in zip(self.centroids, self.scores):
            yield (int(x), int(y), int(z)), float(score)

    def __eq__(self, other):
        return (
            isinstance(other, VesicleSet)
            and np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.scores, other.scores)
        )

    def __ne__(self, other):
        return not self.__eq__(other)

    def __repr__(self):
        return "<VesicleSet {} vesicles>".format(len(self))

    def within(self, lo, hi):
        """The vesicles inside the inclusive (x, y, z) box `lo`..`hi`."""
        inside = np.all(
            (self.centroids >= np.asarray(lo)) & (self.centroids <= np.asarray(hi)), axis=1
        )
        return VesicleSet(self.centroids[inside], self.scores[inside])

    def in_slice_distances_ok(self, radius):
        """True when no two vesicles in one slice are closer than `radius` pixels."""
        for z in np.unique(self.centroids[:, 2]):
            xy = self.centroids[self.centroids[:, 2] == z, :2].astype(np.float64)
            if len(xy) > 1:
                d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
                np.fill_diagonal(d, np.inf)
                if d.min() < radius:
                    return False
        return True


def find_candidates(response, threshold=DEFAULT_THRESHOLD, origin=(0, 0, 0), core=None):
    """Per-slice 3x3 local maxima of `response` at or above `threshold`.

    Parameters
    ----------
    response : `VoxelGrid`
        Matched-filter response.
    origin : `tuple`
        Global (x, y, z) of the response's first voxel.
    core : `BoundingBox`, optional
        Only candidates inside this box (in the response's own coordinates) are returned.

    Returns
    -------
    `tuple` of (centroids (n, 3) int64 global (x, y, z), scores (n,) float64)
    """
    from scipy import ndimage

    if not -1.0 < threshold < 1.0:
        raise ParameterError("Vesicle threshold must lie in (-1, 1), got {}".format(threshold))

    data = response.data
    peaks = np.zeros(data.shape, dtype=bool)
    for z in range(data.shape[0]):
        plane = data[z]
        peaks[z] = (plane == ndimage.maximum_filter(plane, size=3, mode="nearest")) & (
            plane >= threshold
        )

    if core is not None:
        keep = np.zeros_like(peaks)
        keep[core.slices] = True
        peaks &= keep

    z, y, x = np.nonzero(peaks)
    scores = data[z, y, x].astype(np.float64)
    centroids = np.column_stack([x, y, z]).astype(np.int64) + np.asarray(origin, dtype=np.int64)
    return centroids, scores


def non_maximum_suppression(centroids, scores, nms_radius_px=DEFAULT_NMS_RADIUS_PX):
    """Greedy in-plane suppression by descending score, ties by (z, y, x).

    Returns the indices of the surviving candidates in visiting order.
    """
    from scipy.spatial import cKDTree

    if nms_radius_px < 0:
        raise ParameterError("NMS radius must be >= 0, got {}".format(nms_radius_px))

    centroids = np.asarray(centroids, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((centroids[:, 0], centroids[:, 1], centroids[:, 2], -np.asarray(scores)))
    if nms_radius_px == 0 or len(centroids) < 2:
        return order

    limit = nms_radius_px * nms_radius_px
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    suppressed = np.zeros(len(centroids), dtype=bool)

    neighbours = {}
    for z in np.unique(centroids[:, 2]):
        members = np.flatnonzero(centroids[:, 2] == z)
        tree = cKDTree(centroids[members, :2].astype(np.float64))
        for i, near in zip(members, tree.query_ball_point(
            centroids[members, :2].astype(np.float64), nms_radius_px
        )):
            neighbours[i] = members[near]

    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        near = neighbours[i]
        near = near[rank[near] > rank[i]]
        d2 = ((centroids[near, :2] - centroids[i, :2]) ** 2).sum(axis=1)
        suppressed[near[d2 < limit]] = True
    return np.asarray(kept, dtype=np.int64)


def cluster_filter(centroids, resolution, cluster_radius_nm=DEFAULT_CLUSTER_RADIUS_NM,
                   cluster_min=DEFAULT_CLUSTER_MIN):
    """Boolean keep-mask: a vesicle stays when at least `cluster_min` vesicles (itself
    included) lie within `cluster_radius_nm` of it."""
    from scipy.spatial import cKDTree

    if cluster_min < 1:
        raise ParameterError("Cluster minimum must be >= 1, got {}".format(cluster_min))
    if cluster_radius_nm < 0:
        raise ParameterError("Cluster radius must be >= 0, got {}".format(cluster_radius_nm))

    centroids = np.asarray(centroids, dtype=np.int64).reshape(-1, 3)
    if cluster_min == 1 or not len(centroids):
        return np.ones(len(centroids), dtype=bool)

    points = centroids.astype(np.float64) * np.asarray(resolution, dtype=np.float64)
    counts = cKDTree(points).query_ball_point(points, cluster_radius_nm, return_length=True)
    return np.asarray(counts) >= cluster_min


def suppress_candidates(
    centroids,
    scores,
    resolution,
    nms_radius_px=DEFAULT_NMS_RADIUS_PX,
    cluster_radius_nm=DEFAULT_CLUSTER_RADIUS_NM,
    cluster_min=DEFAULT_CLUSTER_MIN,
):
    """Non-maximum suppression followed by the cluster rule, as a `VesicleSet`."""
    centroids = np.asarray(centroids, dtype=np.int64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64)

    kept = non_maximum_suppression(centroids, scores, nms_radius_px)
    centroids, scores = centroids[kept], scores[kept]
    clustered = cluster_filter(centroids, resolution, cluster_radius_nm, cluster_min)

    log.debug(
        "%i vesicle candidates, %i after NMS, %i in clusters",
        len(np.asarray(kept)),
        len(centroids),
        int(clustered.sum()),
    )
    return VesicleSet(centroids[clustered], scores[clustered])


def detect_vesicles(
    response,
    threshold=DEFAULT_THRESHOLD,
    nms_radius_px=DEFAULT_NMS_RADIUS_PX,
    cluster_radius_nm=DEFAULT_CLUSTER_RADIUS_NM,
    cluster_min=DEFAULT_CLUSTER_MIN,
):
    """Vesicle centroids from a matched-filter response grid."""
    if cluster_min < 1:
        raise ParameterError("Cluster minimum must be >= 1, got {}".format(cluster_min))
    centroids, scores = find_candidates(response, threshold)
    return suppress_candidates(
        centroids, scores, response.resolution, nms_radius_px, cluster_radius_nm, cluster_min
    )


class VesicleMatch(
    namedtuple("VesicleMatch", ["tp", "fp", "fn", "precision", "recall"])
):
    __slots__ = ()


def match_vesicles(detected, truth, radius_px=3.0):
    """Greedy one-to-one matching of detected to true vesicles in the same slice.

    Pairs within `radius_px` in-plane are taken closest first, ties by truth then detection
    order.
    """
    pairs = []
    for t, (tx, ty, tz) in enumerate(truth.centroids):
        same = np.flatnonzero(detected.centroids[:, 2] == tz)
        if not len(same):
            continue
        d = np.hypot(detected.centroids[same, 0] - tx, detected.centroids[same, 1] - ty)
        for j in np.flatnonzero(d <= radius_px):
            pairs.append((float(d[j]), t, int(same[j])))

    used_t, used_d = set(), set()
    for _, t, d in sorted(pairs):
        if t not in used_t and d not in used_d:
            used_t.add(t)
            used_d.add(d)

    tp = len(used_t)
    fp = len(detected) - tp
    fn = len(truth) - tp
    precision = tp / float(tp + fp) if tp + fp else 1.0
    recall = tp / float(tp + fn) if tp + fn else 1.0
    return VesicleMatch(tp, fp, fn, precision, recall)


def save_vesicles(vesicles, path, params=None):
    """Write `x y z score` lines plus a `<path>.json` sidecar with the parameters used."""
    with atomic_write(path, mode="w", encoding="utf-8") as fp:
        for (x, y, z), score in vesicles:
            fp.write("{} {} {} {:.6f}\n".format(x, y, z, score))
    write_json(path + ".json", {"count": len(vesicles), "params": params or {}})


def load_vesicles(path):
    centroids, scores = [], []
    try:
        with open(path, "r", encoding="utf-8") as fp:
            for lineno, line in enumerate(fp, 1):
                fields = line.split()
                if not fields or fields[0].startswith("#"):
                    continue
                if len(fields) not in (3, 4):
                    raise FormatError("{}:{}: expected `x y z score`".format(path, lineno))
                try:
                    centroids.append([int(v) for v in fields[:3]])
                    scores.append(float(fields[3]) if len(fields) == 4 else 1.0)
                except ValueError:
                    raise FormatError("{}:{}: malformed vesicle record".format(path, lineno))
    except OSError as e:
        raise_io_error(path, e)

    if not centroids:
        return VesicleSet.empty()
    return VesicleSet(centroids, scores)


def load_vesicle_params(path):
    """The parameters recorded next to a vesicle file, or {} when there is no sidecar."""
    if not os.path.exists(path + ".json"):
        return {}
    return read_json(path + ".json").get("params", {})
