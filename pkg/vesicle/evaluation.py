"""Object-level precision and recall, and operating-point sweeps."""
from collections import namedtuple
import itertools
import logging

import numpy as np

from vesicle.exceptions import ParameterError
from vesicle.fusion import (
    BECKER_MIN_VOXELS,
    UNBOUNDED_2D,
    FusionParams,
    component_stats,
    label_components,
)
from vesicle.lib.files import atomic_write
from vesicle.utils import run_via_threadpool

log = logging.getLogger("vesicle")

CSV_COLUMNS = [
    "threshold",
    "min2d",
    "max2d",
    "min3d",
    "persistence",
    "tp",
    "fp",
    "fn",
    "precision",
    "recall",
]

DEFAULT_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(11)]
DEFAULT_MIN2D = [0, 50, 100, 200]
DEFAULT_MAX2D = [2500, 5000, 10000]
DEFAULT_MIN3D = [100, 500, 1000, 2000]
DEFAULT_PERSISTENCE = [1, 2, 3, 4, 5]
BECKER_THRESHOLDS = [round(0.05 * i, 2) for i in range(21)]


class MatchResult(
    namedtuple("MatchResult", ["pairs", "unmatched_detections", "unmatched_truths"])
):
    """One-to-one detection/truth pairs as (detection_id, truth_id, overlap_voxels)."""

    __slots__ = ()

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.unmatched_detections)

    @property
    def fn(self):
        return len(self.unmatched_truths)


class OperatingPoint(
    namedtuple("OperatingPoint", ["params", "tp", "fp", "fn", "precision", "recall", "f1"])
):
    __slots__ = ()

    def row(self):
        p = self.params
        return {
            "threshold": p.threshold if p is not None else None,
            "min2d": p.min2d if p is not None else None,
            "max2d": p.max2d if p is not None else None,
            "min3d": p.min3d if p is not None else None,
            "persistence": p.persistence if p is not None else None,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
        }


def operating_point(tp, fp, fn, params=None):
    precision = tp / float(tp + fp) if tp + fp else 1.0
    recall = tp / float(tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return OperatingPoint(params, int(tp), int(fp), int(fn), precision, recall, f1)


def precision_recall(m, params=None):
    """Precision tp/(tp+fp) and recall tp/(tp+fn); both are 1.0 when their denominator is 0."""
    return operating_point(m.tp, m.fp, m.fn, params)


class PRCurve(object):
    """Operating points sorted by (recall, precision), plus the full grid in sweep order."""

    def __init__(self, grid_points):
        if not grid_points:
            raise ParameterError("A precision-recall curve needs at least one point")
        self.grid_points = list(grid_points)
        self.points = sorted(self.grid_points, key=lambda p: (p.recall, p.precision))

    def __len__(self):
        return len(self.points)

    def best(self):
        """The grid point with the highest F1 (the first in grid order on ties)."""
        return max(self.grid_points, key=lambda p: p.f1)

    def to_dataframe(self):
        import pandas as pd

        return pd.DataFrame([p.row() for p in self.grid_points], columns=CSV_COLUMNS)


def write_points_csv(points, path):
    """Write operating points as CSV rows in the given order."""
    import pandas as pd

    df = pd.DataFrame([p.row() for p in points], columns=CSV_COLUMNS)
    with atomic_write(path, mode="w", encoding="utf-8") as fp:
        df.to_csv(fp, index=False)


class ParameterGrid(object):
    """Cartesian product of fusion parameter axes; the threshold varies slowest."""

    def __init__(
        self,
        thresholds=DEFAULT_THRESHOLDS,
        min2d=DEFAULT_MIN2D,
        max2d=DEFAULT_MAX2D,
        min3d=DEFAULT_MIN3D,
        persistence=DEFAULT_PERSISTENCE,
        connectivity2d=8,
        connectivity3d=26,
    ):
        self.axes = [list(thresholds), list(min2d), list(max2d), list(min3d), list(persistence)]
        if any(not axis for axis in self.axes):
            raise ParameterError("Every sweep axis needs at least one value")
        self.connectivity2d = connectivity2d
        self.connectivity3d = connectivity3d

    def __len__(self):
        n = 1
        for axis in self.axes:
            n *= len(axis)
        return n

    def __iter__(self):
        for cell in itertools.product(*self.axes):
            yield FusionParams(*cell, connectivity2d=self.connectivity2d,
                               connectivity3d=self.connectivity3d)

    def labelling_keys(self):
        """Distinct (threshold, min2d, max2d) triples, each needing one 3D labelling."""
        return list(itertools.product(*self.axes[:3]))


def overlap_table(detected_labels, truth_labels):
    """Voxel overlaps between two aligned label arrays.

    Returns
    -------
    `tuple` of (detection ids, truth ids, overlap counts), int64 arrays
    """
    det = np.asarray(detected_labels).ravel()
    tru = np.asarray(truth_labels).ravel()
    both = np.flatnonzero((det > 0) & (tru > 0))
    if not len(both):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty

    width = np.int64(tru.max()) + 1
    keys, counts = np.unique(det[both].astype(np.int64) * width + tru[both], return_counts=True)
    return keys // width, keys % width, counts.astype(np.int64)


def greedy_pairs(det_ids, truth_ids, overlaps, det_order=None):
    """Accept pairs by descending overlap, ties by truth id then detection order.

    `det_order` maps detection ids to their tie-break rank (the id itself by default).
    """
    rank = det_ids if det_order is None else det_order[det_ids]
    order = np.lexsort((rank, truth_ids, -overlaps))
    used_d, used_t, pairs = set(), set(), []
    for i in order:
        d, t = int(det_ids[i]), int(truth_ids[i])
        if d in used_d or t in used_t:
            continue
        used_d.add(d)
        used_t.add(t)
        pairs.append((d, t, int(overlaps[i])))
    return pairs


def _overlap_floor(truth_ids, overlaps, truth_counts, min_overlap_fraction):
    if not min_overlap_fraction:
        return overlaps >= 1
    return (overlaps >= 1) & (overlaps >= min_overlap_fraction * truth_counts[truth_ids])


def match_objects(detected, truth, min_overlap_fraction=0.0):
    """One-to-one matching of detections to truth objects by voxel overlap.

    A detection that covers several truths counts for one of them only.
    """
    if tuple(detected.source_dims) != tuple(truth.source_dims):
        raise ParameterError(
            "Detections {} and truth {} cover different volumes".format(
                detected.source_dims, truth.source_dims
            )
        )
    if not 0.0 <= min_overlap_fraction <= 1.0:
        raise ParameterError("Minimum overlap fraction must lie in [0, 1]")

    det_ids, truth_ids, overlaps = overlap_table(
        detected.label_grid().data, truth.label_grid().data
    )
    truth_counts = np.zeros(len(truth) + 1, dtype=np.int64)
    for o in truth:
        truth_counts[o.id] = o.voxel_count
    keep = _overlap_floor(truth_ids, overlaps, truth_counts, min_overlap_fraction)
    pairs = greedy_pairs(det_ids[keep], truth_ids[keep], overlaps[keep])

    matched_d = {d for d, _, _ in pairs}
    matched_t = {t for _, t, _ in pairs}
    return MatchResult(
        pairs,
        [o.id for o in detected if o.id not in matched_d],
        [o.id for o in truth if o.id not in matched_t],
    )


def _relabel_rank(labels, n, counts):
    """Rank of every component in the fuse numbering (descending size, bbox min, first voxel)."""
    from scipy import ndimage

    values, first = np.unique(labels.ravel(), return_index=True)
    if values[0] != 0:
        first = np.r_[0, first]
    nz, ny, nx = labels.shape
    fz, fy, fx = np.unravel_index(first, (nz, ny, nx))

    bmin = np.zeros((n + 1, 3), dtype=np.int64)
    for i, box in enumerate(ndimage.find_objects(labels, max_label=n), 1):
        if box is not None:
            bmin[i] = (box[0].start, box[1].start, box[2].start)

    ids = np.arange(1, n + 1)
    order = np.lexsort(
        (fx[ids], fy[ids], fz[ids], bmin[ids, 2], bmin[ids, 1], bmin[ids, 0], -counts[ids])
    )
    rank = np.zeros(n + 1, dtype=np.int64)
    rank[ids[order]] = np.arange(1, n + 1)
    return rank


def _sweep_labelling(key, prob, truth_labels, truth_counts, cells, min_overlap_fraction, grid):
    threshold, min2d, max2d = key
    labels, n = label_components(
        prob, threshold, min2d, max2d, grid.connectivity2d, grid.connectivity3d
    )
    counts, z_extent = component_stats(labels, n)
    rank = _relabel_rank(labels, n, counts)

    det_ids, truth_ids, overlaps = overlap_table(labels, truth_labels)
    floor = _overlap_floor(truth_ids, overlaps, truth_counts, min_overlap_fraction)
    det_ids, truth_ids, overlaps = det_ids[floor], truth_ids[floor], overlaps[floor]
    n_truth = len(truth_counts) - 1

    points = []
    for params in cells:
        kept = (z_extent >= params.persistence) & (counts >= params.min3d)
        kept[0] = False
        usable = kept[det_ids]
        pairs = greedy_pairs(det_ids[usable], truth_ids[usable], overlaps[usable], rank)
        tp = len(pairs)
        points.append(operating_point(tp, int(kept.sum()) - tp, n_truth - tp, params))
    return points


def sweep(prob, truth, grid=None, min_overlap_fraction=0.0, workers=1):
    """Fuse and match at every cell of `grid`.

    Each (threshold, min2d, max2d) is labelled once; persistence and min3d only filter those
    components, so every point equals `fuse` followed by `match_objects`.
    """
    grid = grid or ParameterGrid()
    if not len(grid):
        raise ParameterError("The sweep grid is empty")
    if tuple(prob.dims) != tuple(truth.source_dims):
        raise ParameterError(
            "Probability grid {} and truth {} cover different volumes".format(
                prob.dims, truth.source_dims
            )
        )

    truth_labels = truth.label_grid().data
    truth_counts = np.zeros(len(truth) + 1, dtype=np.int64)
    for o in truth:
        truth_counts[o.id] = o.voxel_count

    by_key = {}
    for params in grid:
        by_key.setdefault((params.threshold, params.min2d, params.max2d), []).append(params)

    keys = list(by_key)
    results = run_via_threadpool(
        lambda key: _sweep_labelling(
            key, prob, truth_labels, truth_counts, by_key[key], min_overlap_fraction, grid
        ),
        keys,
        max_threads=workers,
    )
    found = {p.params: p for points in results for p in points}
    curve = PRCurve([found[params] for params in grid])

    best = curve.best()
    log.info(
        "Swept %i operating points; best F1 %.4f (precision %.4f, recall %.4f) at %s",
        len(curve),
        best.f1,
        best.precision,
        best.recall,
        best.params.to_dict(),
    )
    return curve


def sweep_becker(prob, truth, thresholds=None, min_voxels=BECKER_MIN_VOXELS,
                 min_overlap_fraction=0.0, workers=1):
    """Sweep the threshold-and-size baseline over probability thresholds."""
    grid = ParameterGrid(
        thresholds if thresholds is not None else BECKER_THRESHOLDS,
        [0],
        [UNBOUNDED_2D],
        [min_voxels],
        [1],
    )
    return sweep(prob, truth, grid, min_overlap_fraction, workers)
