import numpy as np
import pytest

from tests.conftest import slow, threshold_model
from vesicle.exceptions import (
    ChecksumError,
    CorruptionError,
    DataError,
    FormatError,
    ModelCompatibilityError,
    ParameterError,
    ShortfallError,
    VersionError,
)
from vesicle.features import FeatureStack, assemble_features, feature_order_tag
from vesicle.forest import (
    DecisionTree,
    ForestParams,
    RandomForestModel,
    TrainingSet,
    _best_split,
    load_model,
    predict,
    sample_training,
    save_model,
    train,
)
from vesicle.lib.enums import FeatureVariant
from vesicle.synth import PhantomSpec, generate_phantom
from vesicle.vesicles import VesicleSet
from vesicle.volume import MembraneMask, VoxelGrid


def separable_set(rng, n=200):
    """Rows whose class is decided by feature 2 alone."""
    samples = rng.random((n, 10)).astype(np.float32)
    labels = (samples[:, 2] > 0.5).astype(np.uint8)
    return TrainingSet(samples, labels, np.zeros((n, 3)), feature_order_tag())


def test_forest_params_validation():
    assert ForestParams() == (128, 3, 5, 40, 0)
    with pytest.raises(ParameterError):
        ForestParams(n_trees=0)
    with pytest.raises(ParameterError):
        ForestParams(mtry=11)
    with pytest.raises(ParameterError):
        ForestParams(min_leaf=0)


def test_best_split_picks_the_midpoint():
    x = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
    y = np.array([0, 0, 1, 1], dtype=np.uint8)
    gain, threshold = _best_split(x, y, 1)
    assert threshold == pytest.approx(2.5)
    assert gain == pytest.approx(0.5)

    # no valid split on a constant feature
    assert _best_split(np.ones(4, dtype=np.float32), y, 1) is None
    # min_leaf forbids every split
    assert _best_split(x, y, 3) is None


def test_decision_tree_predict():
    tree = threshold_model(threshold=0.5, channel=1).trees[0]
    rows = np.zeros((3, 10), dtype=np.float32)
    rows[:, 1] = [0.2, 0.5, 0.9]
    # ties go left
    assert tree.predict(rows).tolist() == [1.0, 1.0, 0.0]
    assert tree.depth == 1
    assert len(tree) == 3


def test_decision_tree_validation():
    with pytest.raises(FormatError):
        DecisionTree([10, -1, -1], [0, 0, 0], [1, -1, -1], [2, -1, -1], [0.5, 1, 0])
    with pytest.raises(FormatError):
        DecisionTree([0, -1, -1], [0, 0, 0], [1, -1, -1], [3, -1, -1], [0.5, 1, 0])
    with pytest.raises(FormatError):
        DecisionTree([-1], [0], [-1], [-1], [1.5])


def test_train_learns_a_separable_rule(rng):
    ts = separable_set(rng)
    model = train(ts, ForestParams(n_trees=8, mtry=10, min_leaf=2, seed=1))
    assert len(model.trees) == 8
    assert model.oob_accuracy is not None and model.oob_accuracy > 0.9

    rows = np.zeros((2, 10), dtype=np.float32)
    rows[:, 2] = [0.1, 0.9]
    prob = model.predict_rows(rows)
    assert prob[0] < 0.5 < prob[1]
    # every split uses the informative feature when all features are tried
    counts = model.split_counts()
    assert counts[2] == counts.sum() > 0


def test_train_is_deterministic_across_workers(rng):
    ts = separable_set(rng)
    params = ForestParams(n_trees=6, mtry=3, min_leaf=2, seed=42)
    one = train(ts, params, workers=1)
    many = train(ts, params, workers=4)
    assert all(a == b for a, b in zip(one.trees, many.trees))
    assert one.to_bytes() == many.to_bytes()

    other = train(ts, ForestParams(n_trees=6, mtry=3, min_leaf=2, seed=43))
    assert other.to_bytes() != one.to_bytes()


def test_train_needs_both_classes(rng):
    samples = rng.random((10, 10))
    ts = TrainingSet(samples, np.ones(10), np.zeros((10, 3)), feature_order_tag())
    with pytest.raises(ParameterError):
        train(ts, ForestParams(n_trees=1))


def test_depth_and_leaf_limits(rng):
    ts = separable_set(rng, n=100)
    stump = train(ts, ForestParams(n_trees=3, max_depth=1, min_leaf=1, seed=0))
    assert all(t.depth <= 1 for t in stump.trees)
    root_only = train(ts, ForestParams(n_trees=2, max_depth=0, seed=0))
    assert all(len(t) == 1 for t in root_only.trees)


def test_model_bytes_round_trip(rng, tmp_path):
    model = train(separable_set(rng), ForestParams(n_trees=3, min_leaf=2, seed=5))
    path = str(tmp_path / "model.vrf")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.params == model.params
    assert loaded.feature_order_tag == model.feature_order_tag
    assert all(a == b for a, b in zip(loaded.trees, model.trees))
    assert loaded.oob_accuracy is None


def test_model_load_errors(tmp_path):
    blob = threshold_model().to_bytes()

    with pytest.raises(FormatError):
        RandomForestModel.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        RandomForestModel.from_bytes(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CorruptionError):
        RandomForestModel.from_bytes(blob[:20])

    flipped = bytearray(blob)
    flipped[-12] ^= 0x01
    with pytest.raises(ChecksumError):
        RandomForestModel.from_bytes(bytes(flipped))

    with pytest.raises(FormatError):
        RandomForestModel.from_bytes(b"")
    with pytest.raises(DataError):
        load_model(str(tmp_path / "missing.vrf"))


def test_sample_training(blobs):
    em, labels = blobs
    stack = assemble_features(em, VesicleSet.empty(), use_vesicles=False)
    mask = MembraneMask.full(em)

    ts = sample_training(stack, labels, mask, 100, seed=3)
    assert len(ts) == 100
    assert ts.class_counts() == (50, 50)
    assert ts.feature_order_tag == feature_order_tag(FeatureVariant.NoVesicles)
    for (x, y, z), label in zip(ts.coords, ts.labels):
        assert (labels.data[z, y, x] > 0) == bool(label)

    again = sample_training(stack, labels, mask, 100, seed=3)
    assert np.array_equal(again.samples, ts.samples)


def test_sample_training_shortfall(blobs):
    em, labels = blobs
    stack = assemble_features(em, VesicleSet.empty(), use_vesicles=False)
    with pytest.raises(ShortfallError) as e:
        sample_training(stack, labels, MembraneMask.full(em), 10 ** 6)
    assert e.value.label == "synapse"

    empty_mask = MembraneMask.from_array(np.zeros(em.data.shape), em.resolution, "synthetic")
    with pytest.raises(ShortfallError) as e:
        sample_training(stack, labels, empty_mask, 100)
    assert e.value.label == "non-synapse membrane"


def test_predict(blobs):
    em, labels = blobs
    stack = assemble_features(em, VesicleSet.empty(), use_vesicles=False)
    mask = MembraneMask.full(em)
    model = threshold_model(100.0)

    prob = predict(model, stack, mask)
    assert prob.voxel_type.value == "f32"
    assert prob.data[3, 9, 8] == 1.0  # blob interior
    assert prob.data[0, 0, 0] == 0.0

    outside = np.ones(em.data.shape, dtype=bool)
    outside[3, 9, 8] = False
    masked = predict(model, stack, MembraneMask.from_array(outside, em.resolution, "synthetic"))
    assert masked.data[3, 9, 8] == 0.0

    assert predict(model, stack, mask, workers=3) == prob


def test_predict_rejects_other_feature_orders():
    stack = FeatureStack(np.zeros((10, 1, 2, 2)), (1.0, 1.0, 1.0), FeatureVariant.Full)
    mask = MembraneMask.full(VoxelGrid(np.zeros((1, 2, 2), dtype=np.uint8)))
    with pytest.raises(ModelCompatibilityError):
        predict(threshold_model(variant=FeatureVariant.NoVesicles), stack, mask)


def test_shuffled_labels_score_at_chance(rng):
    ts = separable_set(rng, n=600)
    shuffled = TrainingSet(ts.samples, rng.permutation(ts.labels), ts.coords, ts.feature_order_tag)
    model = train(shuffled, ForestParams(n_trees=24, min_leaf=5, seed=3))
    assert 0.4 <= model.oob_accuracy <= 0.6


def test_fixed_seed_gives_identical_model_files(rng, tmp_path):
    ts = separable_set(rng)
    params = ForestParams(n_trees=5, min_leaf=2, seed=9)
    paths = [str(tmp_path / "a.vrf"), str(tmp_path / "b.vrf")]
    for path in paths:
        save_model(train(ts, params), path)

    blobs = []
    for path in paths:
        with open(path, "rb") as fp:
            blobs.append(fp.read())
    assert blobs[0] == blobs[1]


def test_saved_model_predicts_identically(rng, tmp_path):
    model = train(separable_set(rng), ForestParams(n_trees=6, min_leaf=2, seed=5))
    path = str(tmp_path / "model.vrf")
    save_model(model, path)

    rows = rng.random((1000, 10)).astype(np.float32)
    assert np.array_equal(load_model(path).predict_rows(rows), model.predict_rows(rows))


@slow
def test_phantom_training_is_accurate():
    phantom = generate_phantom(
        PhantomSpec(dims=(256, 256, 40), resolution=(12.0, 12.0, 30.0), synapse_density=2.0,
                    seed=1)
    )
    stack = assemble_features(phantom.em, phantom.vesicle_truth)
    ts = sample_training(stack, phantom.truth.label_grid(), phantom.membrane, 4000, seed=0)
    model = train(ts, ForestParams(n_trees=16, seed=0), workers=4)
    assert model.oob_accuracy >= 0.9
