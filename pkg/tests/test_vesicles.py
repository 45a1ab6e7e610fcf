import numpy as np
import pytest

from tests.conftest import RING_CENTRES, ring_volume
from vesicle.exceptions import FormatError, ParameterError
from vesicle.vesicles import (
    VesicleParams,
    VesicleSet,
    VesicleTemplate,
    build_template,
    cluster_filter,
    detect_vesicles,
    extract_exemplars,
    find_candidates,
    load_vesicle_params,
    load_vesicles,
    match_vesicles,
    matched_response,
    non_maximum_suppression,
    save_vesicles,
)
from vesicle.synth import PhantomSpec, generate_phantom
from vesicle.volume import VoxelGrid


def test_synthetic_template():
    template = VesicleTemplate.synthetic()
    assert template.side == 11
    assert template.half == 5
    assert abs(float(template.patch.mean())) < 1e-6
    assert np.linalg.norm(template.patch) == pytest.approx(1.0, abs=1e-5)
    # the ring is darker than its surround
    assert template.patch[5, 8] < template.patch[5, 5]

    with pytest.raises(ParameterError):
        VesicleTemplate.synthetic(radius=5, thickness=2, side=11)
    with pytest.raises(ParameterError):
        VesicleTemplate.synthetic(side=10)
    with pytest.raises(ParameterError):
        VesicleTemplate(np.ones((5, 5)))


def test_template_from_exemplars():
    em = ring_volume()
    patches = extract_exemplars(em, VesicleSet(RING_CENTRES), side=11)
    assert len(patches) == len(RING_CENTRES)
    template = build_template(exemplars=patches)
    # identical noiseless rings average to the synthetic ring
    assert np.allclose(template.patch, VesicleTemplate.synthetic().patch, atol=1e-6)

    with pytest.raises(ParameterError):
        extract_exemplars(em, VesicleSet([(1, 1, 0)]), side=11)
    with pytest.raises(ParameterError):
        VesicleTemplate.from_exemplars([np.ones((3, 3)), np.ones((5, 5))])


def test_matched_response():
    em = ring_volume()
    response = matched_response(em, VesicleTemplate.synthetic())
    assert response.voxel_type.value == "f32"

    for x, y, z in RING_CENTRES:
        assert response.data[z, y, x] == pytest.approx(1.0, abs=1e-5)
    # windows leaving the slice score -1; flat windows score 0
    assert response.data[0, 0, 0] == -1.0
    assert response.data[0, 30, 30] == 0.0
    assert response.data.min() >= -1.0 and response.data.max() <= 1.0


def test_matched_response_workers_agree():
    em = ring_volume()
    template = VesicleTemplate.synthetic()
    assert matched_response(em, template, workers=1) == matched_response(em, template, workers=4)


def test_matched_response_validation():
    with pytest.raises(ParameterError):
        matched_response(VoxelGrid(np.zeros((1, 8, 8), dtype=np.uint8)), VesicleTemplate.synthetic())
    with pytest.raises(ParameterError):
        matched_response(VoxelGrid(np.zeros((1, 20, 20), dtype=np.float32)),
                         VesicleTemplate.synthetic())


def test_find_candidates():
    em = ring_volume()
    response = matched_response(em, VesicleTemplate.synthetic())
    centroids, scores = find_candidates(response, 0.6)
    found = {tuple(c) for c in centroids.tolist()}
    assert set(RING_CENTRES) <= found
    assert (scores >= 0.6).all()

    shifted, _ = find_candidates(response, 0.6, origin=(100, 0, 0))
    assert (shifted[:, 0] >= 100).all()

    with pytest.raises(ParameterError):
        find_candidates(response, 1.0)


def test_non_maximum_suppression():
    centroids = [(0, 0, 0), (3, 0, 0), (10, 0, 0), (3, 0, 1)]
    scores = [0.9, 0.8, 0.7, 0.95]
    kept = non_maximum_suppression(centroids, scores, 5)
    assert kept.tolist() == [3, 0, 2]

    # distance exactly the radius does not suppress
    kept = non_maximum_suppression([(0, 0, 0), (5, 0, 0)], [0.9, 0.8], 5)
    assert kept.tolist() == [0, 1]

    # equal scores: the lower (z, y, x) is visited first
    kept = non_maximum_suppression([(4, 0, 0), (2, 0, 0)], [0.7, 0.7], 5)
    assert kept.tolist() == [1]

    with pytest.raises(ParameterError):
        non_maximum_suppression(centroids, scores, -1)


def test_cluster_filter():
    centroids = [(0, 0, 0), (10, 0, 0), (0, 10, 0), (10, 10, 1), (300, 300, 0)]
    keep = cluster_filter(centroids, (6.0, 6.0, 30.0), 500.0, 4)
    assert keep.tolist() == [True, True, True, True, False]
    assert cluster_filter(centroids, (6.0, 6.0, 30.0), 500.0, 1).all()
    with pytest.raises(ParameterError):
        cluster_filter(centroids, (6.0, 6.0, 30.0), 500.0, 0)


def test_detect_vesicles_finds_every_ring():
    em = ring_volume()
    response = matched_response(em, VesicleTemplate.synthetic())
    found = detect_vesicles(response, threshold=0.6, nms_radius_px=5, cluster_min=1)

    m = match_vesicles(found, VesicleSet(RING_CENTRES), radius_px=1.0)
    assert m.tp == len(RING_CENTRES)
    assert m.recall == 1.0
    assert found.in_slice_distances_ok(5)


def test_vesicle_set_order_and_uniqueness():
    vs = VesicleSet([(5, 1, 2), (1, 1, 0), (0, 2, 0)], [0.1, 0.2, 0.3])
    assert vs.centroids.tolist() == [[1, 1, 0], [0, 2, 0], [5, 1, 2]]
    assert vs.scores.tolist() == [0.2, 0.3, 0.1]
    assert len(vs.within((0, 0, 0), (9, 9, 1))) == 2

    with pytest.raises(ParameterError):
        VesicleSet([(1, 1, 1), (1, 1, 1)])
    with pytest.raises(ParameterError):
        VesicleSet([(1, 1, 1)], [0.5, 0.5])


def test_match_vesicles():
    truth = VesicleSet([(10, 10, 0), (30, 10, 0), (50, 50, 2)])
    detected = VesicleSet([(11, 10, 0), (30, 13, 0), (50, 50, 1), (70, 70, 0)])
    m = match_vesicles(detected, truth, radius_px=3.0)
    # (50, 50) sits in another slice and does not match
    assert (m.tp, m.fp, m.fn) == (2, 2, 1)
    assert m.precision == pytest.approx(0.5)
    assert m.recall == pytest.approx(2 / 3.0)


def test_save_load_vesicles(tmp_path):
    vs = VesicleSet([(3, 4, 5), (1, 2, 0)], [0.9, 0.123456789])
    path = str(tmp_path / "vesicles.txt")
    save_vesicles(vs, path, VesicleParams().to_dict())

    lines = open(path).read().splitlines()
    assert lines == ["1 2 0 0.123457", "3 4 5 0.900000"]
    loaded = load_vesicles(path)
    assert loaded.centroids.tolist() == vs.centroids.tolist()
    assert load_vesicle_params(path)["threshold"] == 0.6
    assert load_vesicle_params(str(tmp_path / "missing.txt")) == {}


def test_load_vesicles_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2\n")
    with pytest.raises(FormatError):
        load_vesicles(str(path))

    path.write_text("1 2 x 0.5\n")
    with pytest.raises(FormatError):
        load_vesicles(str(path))

    path.write_text("# header\n\n4 5 6\n")
    assert load_vesicles(str(path)).centroids.tolist() == [[4, 5, 6]]


def test_vesicle_params_validation():
    assert VesicleParams().threshold == 0.6
    with pytest.raises(ParameterError):
        VesicleParams(threshold=1.0)
    with pytest.raises(ParameterError):
        VesicleParams(cluster_min=0)


PHANTOM = dict(dims=(128, 128, 24), resolution=(12.0, 12.0, 30.0), synapse_density=2.0, seed=3)


def test_planted_centres_outscore_the_background():
    phantom = generate_phantom(PhantomSpec(noise_sigma=0, **PHANTOM))
    response = matched_response(phantom.em, VesicleTemplate.synthetic()).data
    nz, ny, nx = response.shape
    yy, xx = np.mgrid[0:ny, 0:nx]

    far = np.ones(response.shape, dtype=bool)
    for x, y, z in phantom.vesicle_truth.centroids:
        far[z] &= np.hypot(xx - x, yy - y) > 3
    x, y, z = phantom.vesicle_truth.centroids.T
    assert response[z, y, x].min() >= response[far].max()


def test_detect_vesicles_on_noisy_phantom():
    phantom = generate_phantom(PhantomSpec(noise_sigma=10, **PHANTOM))
    response = matched_response(phantom.em, VesicleTemplate.synthetic())
    found = detect_vesicles(response)

    m = match_vesicles(found, phantom.vesicle_truth)
    assert m.recall >= 0.9
    assert m.precision >= 0.8


def test_matched_response_is_affine_invariant():
    em = ring_volume()
    template = VesicleTemplate.synthetic()
    base = matched_response(em, template).data
    # 200 -> 160 and 70 -> 95
    scaled = VoxelGrid((em.data.astype(np.int32) * 5 // 10 + 60).astype(np.uint8), em.resolution)
    assert np.allclose(matched_response(scaled, template).data, base, atol=1e-5)


def test_detect_vesicles_is_monotone_in_threshold():
    clean = ring_volume()
    rng = np.random.default_rng(8)
    noisy = clean.data.astype(np.float64) + rng.normal(0, 20, size=clean.data.shape)
    em = VoxelGrid(np.clip(np.rint(noisy), 0, 255).astype(np.uint8), clean.resolution)
    response = matched_response(em, VesicleTemplate.synthetic())

    counts = [len(find_candidates(response, t)[0]) for t in (0.2, 0.4, 0.6, 0.8)]
    assert counts == sorted(counts, reverse=True)

    found = [
        {tuple(c) for c in detect_vesicles(response, t, cluster_min=1).centroids.tolist()}
        for t in (0.3, 0.5, 0.7)
    ]
    assert found[2] <= found[1] <= found[0]
