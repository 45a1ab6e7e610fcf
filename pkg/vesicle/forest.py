"""A small random forest for voxel classification.

Trees are grown on bootstrap resamples with Gini splits over a random subset of features at
every node. Each tree draws from its own random stream derived from (seed, tree index), so a
model depends only on its seed, never on how many workers trained it.
"""
from collections import namedtuple
import logging
import struct

import numpy as np

from vesicle.exceptions import (
    ChecksumError,
    CorruptionError,
    FormatError,
    ModelCompatibilityError,
    ParameterError,
    ShortfallError,
    VersionError,
    raise_io_error,
)
from vesicle.features import N_CHANNELS
from vesicle.lib.files import atomic_write, fnv1a_64
from vesicle.utils import chunk_ranges, run_via_threadpool
from vesicle.volume import VoxelGrid

log = logging.getLogger("vesicle")

MAGIC = b"VRF1"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sI")
PARAMS = struct.Struct("<IIIIQ")
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")

NODE_DTYPES = [
    ("feature", np.dtype("<i4")),
    ("threshold", np.dtype("<f4")),
    ("left", np.dtype("<i4")),
    ("right", np.dtype("<i4")),
    ("value", np.dtype("<f4")),
]

PREDICT_CHUNK = 1 << 18


class ForestParams(namedtuple("ForestParams", ["n_trees", "mtry", "min_leaf", "max_depth", "seed"])):
    __slots__ = ()

    def __new__(cls, n_trees=128, mtry=3, min_leaf=5, max_depth=40, seed=0):
        params = super(ForestParams, cls).__new__(
            cls, int(n_trees), int(mtry), int(min_leaf), int(max_depth), int(seed)
        )
        if params.n_trees < 1:
            raise ParameterError("A forest needs at least one tree")
        if not 1 <= params.mtry <= N_CHANNELS:
            raise ParameterError("mtry must lie in [1, {}], got {}".format(N_CHANNELS, mtry))
        if params.min_leaf < 1:
            raise ParameterError("min_leaf must be >= 1, got {}".format(min_leaf))
        if params.max_depth < 0:
            raise ParameterError("max_depth must be >= 0, got {}".format(max_depth))
        if not 0 <= params.seed < 2 ** 64:
            raise ParameterError("seed must be a non-negative 64-bit integer")
        return params


class TrainingSet(object):
    """Balanced rows of the feature design matrix.

    Parameters
    ----------
    samples : `numpy.ndarray`
        (n, 10) float32 feature rows.
    labels : `numpy.ndarray`
        (n,) 0/1 classes (1 = synapse).
    coords : `numpy.ndarray`
        (n, 3) (x, y, z) voxel of each row.
    feature_order_tag : `int`
        Tag of the feature stack the rows came from.
    """

    def __init__(self, samples, labels, coords, feature_order_tag):
        self.samples = np.ascontiguousarray(samples, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.uint8)
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.feature_order_tag = int(feature_order_tag)
        if not (len(self.samples) == len(self.labels) == len(self.coords)):
            raise ParameterError("Training samples, labels and coordinates differ in length")

    def __len__(self):
        return len(self.labels)

    def class_counts(self):
        positives = int(self.labels.sum())
        return len(self) - positives, positives


def sample_training(features, labels, mask, n, seed=0):
    """Draw n/2 synapse voxels and n/2 membrane voxels outside synapses, without replacement."""
    if n < 2:
        raise ParameterError("At least two training samples are required, got {}".format(n))
    if tuple(labels.dims) != tuple(features.dims) or tuple(mask.dims) != tuple(features.dims):
        raise ParameterError(
            "Features {}, labels {} and mask {} are not aligned".format(
                features.dims, labels.dims, mask.dims
            )
        )

    n_pos = n // 2
    n_neg = n - n_pos
    flat_labels = labels.data.ravel()
    positives = np.flatnonzero(flat_labels > 0)
    negatives = np.flatnonzero(mask.array.ravel() & (flat_labels == 0))

    if len(positives) < n_pos:
        raise ShortfallError("synapse", n_pos, len(positives))
    if len(negatives) < n_neg:
        raise ShortfallError("non-synapse membrane", n_neg, len(negatives))

    rng = np.random.default_rng(seed)
    index = np.concatenate(
        [
            np.sort(rng.choice(positives, n_pos, replace=False)),
            np.sort(rng.choice(negatives, n_neg, replace=False)),
        ]
    )
    nx, ny, nz = features.dims
    z, y, x = np.unravel_index(index, (nz, ny, nx))

    log.debug("Sampled %i synapse and %i background voxels", n_pos, n_neg)
    return TrainingSet(
        features.rows(index),
        np.concatenate([np.ones(n_pos), np.zeros(n_neg)]),
        np.column_stack([x, y, z]),
        features.feature_order_tag,
    )


class DecisionTree(object):
    """Pre-order node arrays; a node with feature -1 is a leaf holding a positive fraction.

    Samples go left when `x[feature] <= threshold`.
    """

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float32)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.float32)

        n = len(self.feature)
        if not n or any(len(a) != n for a in (self.threshold, self.left, self.right, self.value)):
            raise FormatError("Tree node arrays are empty or differ in length")
        if (self.feature >= N_CHANNELS).any() or (self.feature < -1).any():
            raise FormatError("Tree node refers to a feature outside 0-{}".format(N_CHANNELS - 1))
        if ((self.value < 0) | (self.value > 1)).any():
            raise FormatError("Tree leaf fraction outside [0, 1]")
        internal = self.feature >= 0
        for child in (self.left[internal], self.right[internal]):
            if ((child <= 0) | (child >= n)).any():
                raise FormatError("Tree child index out of range")

    def __len__(self):
        return len(self.feature)

    @property
    def depth(self):
        depth = np.zeros(len(self), dtype=np.int64)
        for i in range(len(self)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, rows):
        """Leaf fraction reached by every row of an (n, 10) float32 matrix."""
        rows = np.asarray(rows, dtype=np.float32)
        node = np.zeros(len(rows), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            current = node[active]
            go_left = rows[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]

    def __eq__(self, other):
        return isinstance(other, DecisionTree) and all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name, _ in NODE_DTYPES
        )


def _gini(positives, total):
    p = positives / total
    return 2.0 * p * (1.0 - p)


def _best_split(x, y, min_leaf):
    """Best (gain, threshold) over midpoints of the sorted unique values of `x`, or None.

    The first maximum wins, i.e. the lowest threshold among equal gains.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(xs)
    n_left = np.arange(1, n)
    pos_left = np.cumsum(y[order], dtype=np.int64)[:-1]
    total_pos = int(y.sum())

    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None

    n_right = n - n_left
    impurity = (
        n_left * _gini(pos_left, n_left) + n_right * _gini(total_pos - pos_left, n_right)
    ) / float(n)
    gain = np.where(valid, _gini(total_pos, float(n)) - impurity, -np.inf)
    i = int(np.argmax(gain))

    lo, hi = xs[i], xs[i + 1]
    threshold = np.float32((np.float64(lo) + np.float64(hi)) / 2.0)
    if threshold >= hi:
        threshold = lo
    return float(gain[i]), np.float32(threshold)


def _grow_tree(samples, labels, rng, params):
    feature, threshold, left, right, value = [], [], [], [], []

    def _build(index, depth):
        node = len(feature)
        y = labels[index]
        positives = int(y.sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(positives / float(len(index)))

        if positives in (0, len(index)) or depth >= params.max_depth:
            return node
        if len(index) < 2 * params.min_leaf:
            return node

        best = None
        for f in np.sort(rng.choice(N_CHANNELS, params.mtry, replace=False)):
            split = _best_split(samples[index, f], y, params.min_leaf)
            if split is not None and split[0] > 0 and (best is None or split[0] > best[0]):
                best = (split[0], int(f), split[1])
        if best is None:
            return node

        _, f, t = best
        goes_left = samples[index, f] <= t
        feature[node] = f
        threshold[node] = t
        left[node] = _build(index[goes_left], depth + 1)
        right[node] = _build(index[~goes_left], depth + 1)
        return node

    _build(np.arange(len(labels)), 0)
    return DecisionTree(feature, threshold, left, right, value)


def tree_rng(seed, tree_index):
    return np.random.default_rng(np.random.SeedSequence([seed, tree_index]))


class RandomForestModel(object):
    """Trees plus the hyperparameters and feature-order tag they were trained with.

    `oob_accuracy` is only known for a freshly trained model; it is not serialized.
    """

    def __init__(self, trees, params, feature_order_tag, oob_accuracy=None):
        if len(trees) != params.n_trees:
            raise FormatError(
                "Model declares {} trees but holds {}".format(params.n_trees, len(trees))
            )
        self.trees = list(trees)
        self.params = params
        self.feature_order_tag = int(feature_order_tag)
        self.oob_accuracy = oob_accuracy

    def predict_rows(self, rows):
        """Mean leaf fraction over all trees for each row, as float32."""
        total = np.zeros(len(rows), dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(rows)
        return (total / len(self.trees)).astype(np.float32)

    def split_counts(self):
        """How often each feature channel is used to split, over all trees."""
        counts = np.zeros(N_CHANNELS, dtype=np.int64)
        for tree in self.trees:
            counts += np.bincount(tree.feature[tree.feature >= 0], minlength=N_CHANNELS)
        return counts

    def to_bytes(self):
        parts = [
            PREAMBLE.pack(MAGIC, FORMAT_VERSION),
            PARAMS.pack(*self.params),
            U64.pack(self.feature_order_tag),
            U32.pack(len(self.trees)),
        ]
        for tree in self.trees:
            parts.append(U32.pack(len(tree)))
            for name, dtype in NODE_DTYPES:
                parts.append(getattr(tree, name).astype(dtype).tobytes())
        body = b"".join(parts)
        return body + U64.pack(fnv1a_64(body))

    @classmethod
    def from_bytes(cls, blob, source="model"):
        if len(blob) < PREAMBLE.size or blob[:4] != MAGIC:
            raise FormatError("{}: not a VRF1 model file".format(source))
        _, version = PREAMBLE.unpack_from(blob)
        if version != FORMAT_VERSION:
            raise VersionError(
                "{}: model format version {} is not supported (expected {})".format(
                    source, version, FORMAT_VERSION
                )
            )
        if len(blob) < PREAMBLE.size + PARAMS.size + U64.size + U32.size + U64.size:
            raise CorruptionError("{}: model file is truncated".format(source))

        body, (stored,) = blob[: -U64.size], U64.unpack(blob[-U64.size :])
        if fnv1a_64(body) != stored:
            raise ChecksumError("{}: model checksum mismatch".format(source))

        offset = PREAMBLE.size
        params = ForestParams(*PARAMS.unpack_from(body, offset))
        offset += PARAMS.size
        (tag,) = U64.unpack_from(body, offset)
        offset += U64.size
        (n_trees,) = U32.unpack_from(body, offset)
        offset += U32.size

        trees = []
        try:
            for _ in range(n_trees):
                (n_nodes,) = U32.unpack_from(body, offset)
                offset += U32.size
                arrays = {}
                for name, dtype in NODE_DTYPES:
                    size = n_nodes * dtype.itemsize
                    if offset + size > len(body):
                        raise CorruptionError("{}: model file is truncated".format(source))
                    arrays[name] = np.frombuffer(body, dtype=dtype, count=n_nodes, offset=offset)
                    offset += size
                trees.append(DecisionTree(**arrays))
        except struct.error:
            raise CorruptionError("{}: model file is truncated".format(source))

        if offset != len(body):
            raise CorruptionError("{}: trailing bytes after the last tree".format(source))
        return cls(trees, params, tag)


def train(ts, params=None, workers=1):
    """Grow `params.n_trees` trees on bootstrap resamples of `ts`.

    Returns
    -------
    `RandomForestModel` with `oob_accuracy` set when any sample was out of bag.
    """
    params = params or ForestParams()
    negatives, positives = ts.class_counts()
    if len(ts) < 2 or not negatives or not positives:
        raise ParameterError("Training needs samples of both classes")

    n = len(ts)

    def _tree(tree_index):
        rng = tree_rng(params.seed, tree_index)
        bootstrap = rng.integers(0, n, size=n)
        tree = _grow_tree(ts.samples[bootstrap], ts.labels[bootstrap], rng, params)
        out_of_bag = np.ones(n, dtype=bool)
        out_of_bag[bootstrap] = False
        return tree, out_of_bag

    grown = run_via_threadpool(_tree, range(params.n_trees), max_threads=workers)

    votes = np.zeros(n, dtype=np.float64)
    voters = np.zeros(n, dtype=np.int64)
    for tree, out_of_bag in grown:
        oob = np.flatnonzero(out_of_bag)
        votes[oob] += tree.predict(ts.samples[oob])
        voters[oob] += 1

    scored = voters > 0
    oob_accuracy = None
    if scored.any():
        guess = (votes[scored] / voters[scored]) >= 0.5
        oob_accuracy = float(np.mean(guess == (ts.labels[scored] == 1)))

    model = RandomForestModel([t for t, _ in grown], params, ts.feature_order_tag, oob_accuracy)
    log.info(
        "Trained %i trees on %i samples (out-of-bag accuracy %s)",
        params.n_trees,
        n,
        "n/a" if oob_accuracy is None else "{:.4f}".format(oob_accuracy),
    )
    return model


def predict(model, features, mask, workers=1):
    """Synapse probability per voxel: mean leaf fraction over trees, 0 outside the mask."""
    if model.feature_order_tag != features.feature_order_tag:
        raise ModelCompatibilityError(
            "Model was trained on feature order {:016x}, features have {:016x}".format(
                model.feature_order_tag, features.feature_order_tag
            )
        )
    if tuple(mask.dims) != tuple(features.dims):
        raise ParameterError(
            "Mask dims {} differ from feature dims {}".format(mask.dims, features.dims)
        )

    nx, ny, nz = features.dims
    out = np.zeros(nx * ny * nz, dtype=np.float32)
    index = np.flatnonzero(mask.array.ravel())

    def _chunk(bounds):
        start, stop = bounds
        chunk = index[start:stop]
        out[chunk] = model.predict_rows(features.rows(chunk))

    n_chunks = max(workers, -(-len(index) // PREDICT_CHUNK))
    run_via_threadpool(_chunk, chunk_ranges(len(index), n_chunks), max_threads=workers)
    return VoxelGrid(out.reshape(nz, ny, nx), features.resolution)


def save_model(model, path):
    with atomic_write(path, mode="wb") as fp:
        fp.write(model.to_bytes())


def load_model(path):
    try:
        with open(path, "rb") as fp:
            blob = fp.read()
    except OSError as e:
        raise_io_error(path, e)
    return RandomForestModel.from_bytes(blob, source=path)
