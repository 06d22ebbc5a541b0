"""SAM / CEM detectors on embeddings and raw spectra."""

import numpy as np
import pytest

from hutd import detect
from hutd.detect import DetectError, ScoreMap, cem, cem_scores, embed_scene, sam, sam_scores
from hutd.nets import NetworkBundle
from hutd.scene import HsiCube, Spectrum


def test_sam_hand_values():
    z_ref = np.array([1.0, 0.0])
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    scores = sam_scores(z, z_ref)
    np.testing.assert_allclose(scores, [1.0, 0.0, np.sqrt(0.5)], atol=1e-15)


def test_sam_zero_vector_errors():
    with pytest.raises(DetectError):
        sam_scores(np.array([[0.0, 0.0]]), np.array([1.0, 0.0]))
    with pytest.raises(DetectError):
        sam_scores(np.array([[1.0, 0.0]]), np.array([0.0, 0.0]))


def test_sam_scale_invariance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(20, 4)) + 2.0
    z_ref = rng.normal(size=4) + 2.0
    a = sam_scores(z, z_ref)
    b = sam_scores(3.7 * z, z_ref)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cem_two_dim_hand_example():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    z_ref = np.array([1.0, 0.0])
    scores = cem_scores(z, z_ref)
    np.testing.assert_allclose(scores, [1.0, 0.0], atol=1e-6)


def test_cem_unit_gain_on_reference():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(50, 5))
    z_ref = rng.normal(size=5)
    z_with_ref = np.vstack([z, z_ref])
    scores = cem_scores(z_with_ref, z_ref)
    np.testing.assert_allclose(scores[-1], 1.0, atol=1e-6)


def test_cem_scale_leaves_ranking():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(20, 4))
    z_ref = rng.normal(size=4)
    a = cem_scores(z, z_ref)
    b = cem_scores(5.0 * z, 5.0 * z_ref)
    assert np.array_equal(np.argsort(a), np.argsort(b))


def test_score_maps_permutation_equivariant():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(12, 4)) + 1.5
    z_ref = rng.normal(size=4) + 1.5
    perm = rng.permutation(12)
    for fn in (sam_scores, cem_scores):
        base = fn(z, z_ref)
        permuted = fn(z[perm], z_ref)
        np.testing.assert_allclose(permuted, base[perm], atol=1e-9)


def _scene_and_bundle():
    rng = np.random.default_rng(4)
    cube = HsiCube(rng.uniform(0.1, 0.9, size=(3, 4, 6)), np.linspace(400, 900, 6))
    ref = Spectrum(rng.uniform(0.1, 0.9, size=6), cube.wavelengths)
    bundle = NetworkBundle.create(bands=6, hidden=8, embed=5, seed=9)
    return cube, ref, bundle


def test_embed_scene_contract():
    cube, ref, bundle = _scene_and_bundle()
    z, z_ref = embed_scene(cube, bundle, ref)
    assert z.shape == (12, 5)
    z2, z_ref2 = embed_scene(cube, bundle, ref)
    assert np.array_equal(z, z2) and np.array_equal(z_ref, z_ref2)

    # a pixel equal to the reference embeds onto z_ref (same function; up to
    # BLAS batched-vs-single matmul rounding)
    cube.data[1, 2] = ref.values
    z3, z_ref3 = embed_scene(cube, bundle, ref)
    np.testing.assert_allclose(z3[1 * 4 + 2], z_ref3, rtol=0, atol=1e-12)


def test_embed_scene_band_mismatch():
    cube, ref, _ = _scene_and_bundle()
    wrong = NetworkBundle.create(bands=7, hidden=8, embed=5)
    with pytest.raises(DetectError):
        embed_scene(cube, wrong, ref)


def test_run_detector_dispatch():
    cube, ref, bundle = _scene_and_bundle()
    for name in ("sam", "cem", "sam-raw", "cem-raw"):
        needs_bundle = name in ("sam", "cem")
        score_map = detect.run_detector(name, cube, ref, bundle if needs_bundle else None)
        assert score_map.scores.shape == (3, 4)
        assert score_map.name == name
    with pytest.raises(DetectError):
        detect.run_detector("sam", cube, ref, None)
    with pytest.raises(DetectError):
        detect.run_detector("ace", cube, ref, bundle)


def test_save_score_map(tmp_path):
    sm = ScoreMap(np.array([[0.1, 0.9], [0.5, 0.3]]), "sam", "raw")
    paths = detect.save_score_map(sm, tmp_path)
    raw = np.frombuffer((tmp_path / "sam-raw.f32").read_bytes(), dtype="<f4")
    np.testing.assert_allclose(raw.reshape(2, 2), sm.scores, atol=1e-7)
    assert (tmp_path / "sam-raw.csv").exists()
    assert (tmp_path / "sam-raw.pgm").read_bytes().startswith(b"P5")
    assert set(paths) == {"raw", "csv", "pgm"}
