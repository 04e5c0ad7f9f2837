import logging

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from morphgen_helpers import FixedEmbedding, grid_landmarks, random_pool

from morphmad import morphgen
from morphmad.morphgen import InsufficientPoolError, LandmarkError, LandmarkSet
from morphmad.synthetic import make_face_corpus

# --------------------------------------------------------------- frontality


def test_frontality_perfect_symmetry():
    r = morphgen.frontality_from_distances(100, 100, 95)
    assert r.asymmetry_ratio == 0.0 and r.passed


def test_frontality_asymmetry_rejected():
    r = morphgen.frontality_from_distances(100, 106, 95)
    assert r.asymmetry_ratio == pytest.approx(0.06)
    assert not r.passed


def test_frontality_eye_distance_rule():
    assert not morphgen.frontality_from_distances(100, 100, 89).passed
    assert morphgen.frontality_from_distances(100, 100, 90).passed


def test_frontality_ratio_boundary():
    assert morphgen.frontality_from_distances(100, 105, 95).passed
    # relative to the larger distance the same pair is more lenient
    lenient = morphgen.frontality_from_distances(100, 105.2, 95, denominator="max")
    strict = morphgen.frontality_from_distances(100, 105.2, 95)
    assert lenient.passed and not strict.passed


@given(st.floats(1, 500), st.floats(1, 500), st.floats(0, 300))
def test_frontality_symmetric(d1, d2, e):
    a = morphgen.frontality_from_distances(d1, d2, e)
    b = morphgen.frontality_from_distances(d2, d1, e)
    assert a.asymmetry_ratio == b.asymmetry_ratio and a.passed == b.passed


def test_frontality_degenerate():
    with pytest.raises(LandmarkError):
        morphgen.frontality_from_distances(0, 100, 95)
    lms = LandmarkSet(np.zeros((1, 2)), (10, 10), (110, 10), (10, 10))
    with pytest.raises(LandmarkError):
        morphgen.assess_frontality(lms)


def test_assess_frontality_from_landmarks():
    lms = LandmarkSet(np.zeros((1, 2)), (0, 0), (100, 0), (50, 40))
    r = morphgen.assess_frontality(lms)
    assert r.eye_distance == 100 and r.d_left == r.d_right and r.passed


def test_frontal_images_on_corpus(tmp_path):
    c = make_face_corpus(tmp_path, n_identities=4, images_per_identity=2, seed=3, non_frontal=2)
    passed, reports = morphgen.frontal_images(morphgen.read_landmark_cache(c["landmarks"]))
    assert len(reports) == 8
    assert sorted(passed) == sorted(k for k, r in reports.items() if r.passed)
    assert len(passed) == 6


def test_landmark_cache_round_trip(tmp_path):
    lms = grid_landmarks(64, 64)
    morphgen.write_landmark_cache(tmp_path / "l.jsonl", {"b": lms, "a": lms})
    back = morphgen.read_landmark_cache(tmp_path / "l.jsonl")
    assert sorted(back) == ["a", "b"]
    assert np.array_equal(back["a"].points, lms.points) and back["a"].eye_left == lms.eye_left


# ----------------------------------------------------------------- pairing


def test_pairing_three_candidates():
    emb = FixedEmbedding({"k": [0.0], "a": [0.2], "b": [0.5], "c": [0.9]})
    ids = {"k": "K", "a": "A", "b": "B", "c": "C"}
    pairs = morphgen.select_pairs(["k"], ["a", "b", "c"], emb, 2, ids, lambda i: i)
    assert pairs == [("k", "a"), ("k", "b")]


def test_pairing_zero_pairs():
    assert morphgen.select_pairs(["k"], ["a"], FixedEmbedding({}), 0, {}, lambda i: i) == []


def test_pairing_large_count():
    rng = np.random.default_rng(0)
    keys = [f"k{i:03d}" for i in range(197)]
    pool = [f"p{i:03d}" for i in range(400)]
    emb = FixedEmbedding({i: rng.normal(size=4) for i in keys + pool})
    ids = {i: i for i in keys + pool}
    pairs = morphgen.select_pairs(keys, pool, emb, 2, ids, lambda i: i)
    assert len(pairs) == 394
    non_key = [c for _, c in pairs if c not in set(keys)]
    assert len(non_key) == len(set(non_key))
    assert all(ids[k] != ids[c] for k, c in pairs)


def test_pairing_exhausted_pool():
    emb = FixedEmbedding({"k1": [0.0], "k2": [0.1], "a": [0.2]})
    ids = {"k1": "K1", "k2": "K2", "a": "A"}
    with pytest.raises(InsufficientPoolError):
        morphgen.select_pairs(["k1", "k2"], ["a"], emb, 1, ids, lambda i: i)


def test_pairing_skips_own_and_repeated_identity():
    emb = FixedEmbedding({"k": [0.0], "k_twin": [0.01], "a1": [0.1], "a2": [0.2], "b": [0.3]})
    ids = {"k": "K", "k_twin": "K", "a1": "A", "a2": "A", "b": "B"}
    pairs = morphgen.select_pairs(["k"], ["k_twin", "a1", "a2", "b"], emb, 2, ids, lambda i: i)
    assert pairs == [("k", "a1"), ("k", "b")]


def test_pairing_matches_bruteforce():
    rng = np.random.default_rng(42)
    checked = 0
    for trial in range(300):
        keys, pool, ids, emb = random_pool(rng)
        dist = {k: {c: float(np.linalg.norm(emb.vectors[k] - emb.vectors[c])) for c in pool} for k in keys}
        ppk = int(rng.integers(1, 3))
        want = oracles.select_pairs_bruteforce(keys, pool, dist, ids, ppk)
        if want is None:
            with pytest.raises(InsufficientPoolError):
                morphgen.select_pairs(keys, pool, emb, ppk, ids, lambda i: i)
        else:
            assert morphgen.select_pairs(keys, pool, emb, ppk, ids, lambda i: i) == want
            checked += 1
    assert checked > 100


def test_thumbnail_embedding_is_normalised():
    img = np.random.default_rng(0).integers(0, 256, (40, 40, 3), dtype=np.uint8)
    v = morphgen.ThumbnailEmbedding(8).embed(img)
    assert v.shape == (64,) and np.linalg.norm(v) == pytest.approx(1.0)


# ---------------------------------------------------------------- landmarks


def test_average_landmarks_examples():
    a = LandmarkSet(np.array([[0.0, 0.0]]), (0, 0), (10, 0), (5, 5))
    b = LandmarkSet(np.array([[10.0, 20.0]]), (2, 2), (12, 2), (7, 7))
    assert np.allclose(morphgen.average_landmarks(a, b, 0.5).points, [[5, 10]])
    assert np.array_equal(morphgen.average_landmarks(a, b, 0.0).points, a.points)
    for alpha in (0.0, 0.3, 1.0):
        assert np.array_equal(morphgen.average_landmarks(a, a, alpha).points, a.points)


def test_average_landmarks_mismatch():
    a = LandmarkSet(np.zeros((2, 2)), (0, 0), (1, 0), (0, 1))
    b = LandmarkSet(np.zeros((3, 2)), (0, 0), (1, 0), (0, 1))
    with pytest.raises(LandmarkError):
        morphgen.average_landmarks(a, b)


# ------------------------------------------------------------ triangulation


def test_triangulate_corners_only():
    tri = morphgen.triangulate(np.empty((0, 2)), (40, 30), midpoints=False)
    assert len(tri) == 2
    pts = morphgen.with_anchors(np.empty((0, 2)), (40, 30), midpoints=False)
    assert morphgen.triangle_areas(pts, tri).sum() == pytest.approx(1200)


@given(st.integers(0, 40), st.integers(16, 200), st.integers(16, 200), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_triangulate_area_conservation(n, w, h, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([0, 0], [w, h], size=(n, 2))
    tri = morphgen.triangulate(pts, (w, h))
    areas = morphgen.triangle_areas(morphgen.with_anchors(pts, (w, h)), tri)
    assert np.all(areas > 0)
    assert abs(areas.sum() - w * h) <= 1e-6 * w * h


def test_triangulate_deterministic():
    lms = grid_landmarks(64, 64)
    assert np.array_equal(morphgen.triangulate(lms, (64, 64)), morphgen.triangulate(lms, (64, 64)))


def test_triangulate_duplicates_warn(caplog):
    pts = np.array([[10.0, 10.0], [10.0, 10.0], [20.0, 15.0]])
    with caplog.at_level(logging.WARNING, logger="morphmad.morphgen"):
        tri = morphgen.triangulate(pts, (32, 32))
    assert "duplicate" in caplog.text
    areas = morphgen.triangle_areas(morphgen.with_anchors(pts, (32, 32)), tri)
    assert areas.sum() == pytest.approx(32 * 32)


def test_triangulate_colinear():
    pts = np.array([[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]])
    with pytest.raises(LandmarkError):
        morphgen.triangulate(pts, (10, 0), midpoints=True)


def test_triangulate_outside_image():
    with pytest.raises(LandmarkError):
        morphgen.triangulate(np.array([[70.0, 5.0]]), (64, 64))


# ------------------------------------------------------------------ warping


def test_self_morph_idempotent():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    lms = grid_landmarks(64, 64, jitter=3, rng=rng)
    for alpha in (0.0, 0.3, 0.5, 1.0):
        out = morphgen.warp_blend(img, img, lms, lms, alpha)
        assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


def test_gray_blend():
    a = np.full((48, 48, 3), 100, np.uint8)
    b = np.full((48, 48, 3), 200, np.uint8)
    lms = grid_landmarks(48, 48)
    assert np.all(morphgen.warp_blend(a, b, lms, lms, 0.5) == 150)


def test_blend_linear_on_aligned_geometry():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 256, (40, 40), dtype=np.uint8)
    b = rng.integers(0, 256, (40, 40), dtype=np.uint8)
    lms = grid_landmarks(40, 40, jitter=2, rng=rng)
    for alpha in (0.0, 0.25, 0.7):
        out = morphgen.warp_blend(a, b, lms, lms, alpha)
        want = np.rint((1 - alpha) * a + alpha * b)
        assert np.abs(out - want).max() <= 1


def test_morph_is_between_sources(tmp_path):
    c = make_face_corpus(tmp_path, n_identities=2, images_per_identity=1, size=128, seed=0)
    lms = morphgen.read_landmark_cache(c["landmarks"])
    ia = morphgen.load_image(tmp_path / "images" / "id000_0.png")
    ib = morphgen.load_image(tmp_path / "images" / "id001_0.png")
    job = morphgen.MorphJob("id000_0", "id001_0")
    out = job.run(ia, ib, lms["id000_0"], lms["id001_0"])
    assert out.shape == ia.shape and out.dtype == np.uint8
    assert job.triangulation is not None
    assert 0 < np.abs(out.astype(int) - ia).mean() and 0 < np.abs(out.astype(int) - ib).mean()


def test_warp_blend_shape_mismatch():
    lms = grid_landmarks(32, 32)
    with pytest.raises(ValueError):
        morphgen.warp_blend(np.zeros((32, 32, 3), np.uint8), np.zeros((32, 31, 3), np.uint8), lms, lms)


def test_degenerate_triangle_is_filled(caplog):
    img = np.full((32, 32), 80, np.uint8)
    lms = grid_landmarks(32, 32)
    tri = morphgen.triangulate(lms, (32, 32))
    bad = np.vstack([tri, [[0, 0, 1]]])  # zero-area triangle
    with caplog.at_level(logging.WARNING, logger="morphmad.morphgen"):
        out = morphgen.warp_blend(img, img, lms, lms, 0.5, triangles=bad)
    assert "degenerate" in caplog.text
    assert np.all(out == 80)


def test_holes_filled_from_neighbours(caplog):
    img = np.full((32, 32), 50, np.uint8)
    lms = grid_landmarks(32, 32)
    tri = morphgen.triangulate(lms, (32, 32))[1:]  # leave a hole
    with caplog.at_level(logging.WARNING, logger="morphmad.morphgen"):
        out = morphgen.warp_blend(img, img, lms, lms, 0.5, triangles=tri)
    assert np.all(out == 50)


# ---------------------------------------------------------- re-digitization


def test_redigitization_identity():
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    out = morphgen.simulate_redigitization(img, morphgen.RedigitizationProfile())
    assert np.array_equal(out, img) and out is not img


def test_redigitization_deterministic():
    img = np.random.default_rng(0).integers(0, 256, (64, 48, 3), dtype=np.uint8)
    p = morphgen.RedigitizationProfile.default(seed=5)
    a = morphgen.simulate_redigitization(img, p)
    b = morphgen.simulate_redigitization(img, p)
    assert np.array_equal(a, b) and a.shape == img.shape
    c = morphgen.simulate_redigitization(img, morphgen.RedigitizationProfile.default(seed=6))
    assert not np.array_equal(a, c)


def test_redigitization_adds_variance_to_flat_image():
    flat = np.full((64, 64, 3), 128, np.uint8)
    out = morphgen.simulate_redigitization(flat, morphgen.RedigitizationProfile.default(seed=0))
    assert out.astype(float).var() > 0


def test_redigitization_profile_round_trip():
    p = morphgen.RedigitizationProfile.default(seed=9)
    assert morphgen.RedigitizationProfile.from_json(p.to_json()) == p


def test_redigitization_unknown_step():
    img = np.zeros((8, 8, 3), np.uint8)
    with pytest.raises(ValueError):
        morphgen.simulate_redigitization(img, morphgen.RedigitizationProfile([{"name": "laser"}]))
