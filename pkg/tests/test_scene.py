"""Scene I/O and the synthetic nearshore generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hutd import scene
from hutd.scene import (
    GroundTruth,
    HsiCube,
    SceneConfig,
    SceneError,
    Spectrum,
    TargetSpec,
    extract_pixels,
    load_envi,
    normalize_cube,
    save_envi,
    synth_scene,
)


def _tiny_cube():
    data = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    return HsiCube(data, np.array([400.0, 500.0, 600.0]))


def test_envi_roundtrip_bitwise(tmp_path):
    cube = _tiny_cube()
    save_envi(cube, tmp_path / "a.hdr", tmp_path / "a.dat")
    loaded = load_envi(tmp_path / "a.hdr", tmp_path / "a.dat")
    save_envi(loaded, tmp_path / "b.hdr", tmp_path / "b.dat")
    assert (tmp_path / "a.dat").read_bytes() == (tmp_path / "b.dat").read_bytes()
    assert np.array_equal(loaded.data, cube.data)
    assert np.array_equal(loaded.wavelengths, cube.wavelengths)


def _write_envi_variant(tmp_path, cube, interleave):
    if interleave == "bsq":
        payload = cube.data.transpose(2, 0, 1)
    elif interleave == "bil":
        payload = cube.data.transpose(0, 2, 1)
    else:  # bip
        payload = cube.data
    hdr = tmp_path / f"{interleave}.hdr"
    dat = tmp_path / f"{interleave}.dat"
    hdr.write_text(
        "ENVI\n"
        f"samples = {cube.width}\nlines = {cube.height}\nbands = {cube.bands}\n"
        f"interleave = {interleave}\ndata type = 4\nbyte order = 0\n"
    )
    dat.write_bytes(payload.astype("<f4").tobytes())
    return hdr, dat


@pytest.mark.parametrize("interleave", ["bsq", "bil", "bip"])
def test_envi_interleaves_equivalent(tmp_path, interleave):
    cube = _tiny_cube()
    hdr, dat = _write_envi_variant(tmp_path, cube, interleave)
    loaded = load_envi(hdr, dat)
    assert np.array_equal(loaded.data, cube.data)


def test_envi_big_endian_uint16(tmp_path):
    data = np.array([[[1, 2], [3, 4]]], dtype=np.uint16)
    hdr = tmp_path / "u.hdr"
    dat = tmp_path / "u.dat"
    hdr.write_text(
        "ENVI\nsamples = 2\nlines = 1\nbands = 2\n"
        "interleave = bip\ndata type = 12\nbyte order = 1\n"
    )
    dat.write_bytes(data.astype(">u2").tobytes())
    loaded = load_envi(hdr, dat)
    assert np.array_equal(loaded.data, data.astype(np.float64))


def test_envi_truncated_names_counts(tmp_path):
    cube = _tiny_cube()
    save_envi(cube, tmp_path / "a.hdr", tmp_path / "a.dat")
    raw = (tmp_path / "a.dat").read_bytes()
    (tmp_path / "a.dat").write_bytes(raw[:-4])
    with pytest.raises(SceneError, match=r"expected 48 bytes, got 44"):
        load_envi(tmp_path / "a.hdr", tmp_path / "a.dat")


def test_envi_unknown_interleave(tmp_path):
    (tmp_path / "x.hdr").write_text(
        "ENVI\nsamples = 1\nlines = 1\nbands = 1\n"
        "interleave = bif\ndata type = 4\nbyte order = 0\n"
    )
    (tmp_path / "x.dat").write_bytes(b"\x00" * 4)
    with pytest.raises(SceneError, match="interleave"):
        load_envi(tmp_path / "x.hdr", tmp_path / "x.dat")


def test_envi_missing_key(tmp_path):
    (tmp_path / "x.hdr").write_text("ENVI\nsamples = 1\nlines = 1\n")
    (tmp_path / "x.dat").write_bytes(b"")
    with pytest.raises(SceneError, match="bands"):
        load_envi(tmp_path / "x.hdr", tmp_path / "x.dat")


def test_save_envi_rejects_degenerate():
    with pytest.raises(SceneError):
        save_envi(
            HsiCube(np.zeros((0, 2, 2)), np.array([1.0, 2.0])), "h", "d"
        )


def test_extract_pixels_ordering():
    single = HsiCube(np.ones((1, 1, 4)), np.array([1.0, 2.0, 3.0, 4.0]))
    assert len(extract_pixels(single)) == 1

    data = np.zeros((2, 2, 1))
    data[0, 0, 0], data[0, 1, 0], data[1, 0, 0], data[1, 1, 0] = 1, 2, 3, 4
    pixels = extract_pixels(HsiCube(data, np.array([500.0])))
    assert [p.values[0] for p in pixels] == [1, 2, 3, 4]


def test_extract_pixels_index_arithmetic():
    h, w, b = 3, 5, 2
    data = np.arange(h * w * b, dtype=np.float64).reshape(h, w, b)
    cube = HsiCube(data, np.array([400.0, 500.0]))
    pixels = extract_pixels(cube)
    assert len(pixels) == h * w
    for i in range(h * w):
        r, c = i // w, i % w
        assert np.array_equal(pixels[i].values, data[r, c])


def _noiseless_cfg(**kw):
    defaults = dict(height=24, width=24, bands=20, materials=3, noise=0.0, seed=3)
    defaults.update(kw)
    return SceneConfig(
        targets=[TargetSpec(4, 4, 3, 3, kw.pop("depth", 0.0))]
        if "targets" not in kw
        else kw["targets"],
        **{k: v for k, v in defaults.items() if k != "targets"},
    )


def test_synth_zero_depth_targets_equal_reference():
    cfg = SceneConfig(
        height=24, width=24, bands=20, materials=3, noise=0.0, seed=3,
        targets=[TargetSpec(4, 4, 3, 3, 0.0)],
    )
    cube, gt, ref = synth_scene(cfg)
    target_pixels = cube.data[gt.mask]
    for px in target_pixels:
        np.testing.assert_array_equal(px, ref.values)


def test_synth_deep_targets_approach_water():
    cfg = SceneConfig(
        height=24, width=24, bands=20, materials=3, noise=0.0, seed=3,
        targets=[TargetSpec(4, 4, 3, 3, 500.0)],
    )
    cube, gt, _ = synth_scene(cfg)
    water = scene.water_spectrum(cfg.wavelengths())
    for px in cube.data[gt.mask]:
        np.testing.assert_allclose(px, water, atol=1e-12)


def test_synth_depth_interpolates_monotonically():
    cfg = SceneConfig(height=16, width=16, bands=12, materials=2, noise=0.0, seed=9,
                      targets=[TargetSpec(2, 2, 2, 2, 0.0)])
    wl = cfg.wavelengths()
    atten = cfg.attenuation()
    _, _, ref = synth_scene(cfg)
    water = scene.water_spectrum(wl)
    depths = [0.0, 0.4, 1.0, 2.0, 5.0]
    spectra = [scene.submerged_spectrum(ref.values, water, atten, d) for d in depths]
    for b in range(cfg.bands):
        seq = np.array([s[b] for s in spectra])
        gaps = water[b] - seq
        # distance to water shrinks monotonically with depth, per band
        assert np.all(np.abs(gaps[1:]) <= np.abs(gaps[:-1]) + 1e-15)


def test_synth_seed_determinism():
    cfg = SceneConfig(seed=42)
    a_cube, a_gt, a_ref = synth_scene(cfg)
    b_cube, b_gt, b_ref = synth_scene(SceneConfig(seed=42))
    assert np.array_equal(a_cube.data, b_cube.data)
    assert np.array_equal(a_gt.mask, b_gt.mask)
    assert np.array_equal(a_ref.values, b_ref.values)


def test_synth_mask_cardinality():
    cfg = SceneConfig()
    _, gt, _ = synth_scene(cfg)
    assert gt.mask.sum() == sum(t.height * t.width for t in cfg.targets)


def test_synth_rejects_bad_configs():
    with pytest.raises(SceneError):
        synth_scene(SceneConfig(targets=[]))
    with pytest.raises(SceneError):
        synth_scene(SceneConfig(bands=1))
    with pytest.raises(SceneError):
        synth_scene(SceneConfig(targets=[TargetSpec(60, 60, 10, 10, 1.0)]))
    with pytest.raises(SceneError):
        synth_scene(
            SceneConfig(targets=[TargetSpec(5, 5, 4, 4, 1.0), TargetSpec(6, 6, 4, 4, 1.0)])
        )


def test_normalize_cube():
    data = np.linspace(2.0, 6.0, 2 * 2 * 2).reshape(2, 2, 2)
    cube = HsiCube(data, np.array([400.0, 500.0]))
    out = normalize_cube(cube)
    assert out.data.min() == 0.0 and out.data.max() == 1.0

    already = normalize_cube(out)
    np.testing.assert_allclose(already.data, out.data, atol=1e-15)

    with pytest.raises(SceneError):
        normalize_cube(HsiCube(np.full((2, 2, 2), 3.0), np.array([400.0, 500.0])))


def test_pgm_roundtrip(tmp_path):
    mask = np.zeros((5, 7), dtype=bool)
    mask[1:3, 2:5] = True
    scene.save_mask(GroundTruth(mask), tmp_path / "m.pgm")
    loaded = scene.load_mask(tmp_path / "m.pgm")
    assert np.array_equal(loaded.mask, mask)


def test_spectrum_csv_roundtrip(tmp_path):
    spec = Spectrum(np.array([0.25, 0.5, 0.125]), np.array([400.0, 500.0, 600.0]))
    scene.save_spectrum_csv(spec, tmp_path / "s.csv")
    loaded = scene.load_spectrum_csv(tmp_path / "s.csv")
    assert np.array_equal(loaded.values, spec.values)
    assert np.array_equal(loaded.wavelengths, spec.wavelengths)


def test_scene_dir_roundtrip(tmp_path):
    cfg = SceneConfig(height=10, width=12, bands=8, materials=2, seed=1,
                      targets=[TargetSpec(2, 2, 2, 2, 1.0)])
    cube, gt, ref = synth_scene(cfg)
    scene.save_scene_dir(tmp_path / "sc", cube, gt, ref)
    cube2, gt2, ref2 = scene.load_scene_dir(tmp_path / "sc")
    np.testing.assert_allclose(cube2.data, cube.data, atol=1e-7)
    assert np.array_equal(gt2.mask, gt.mask)
    assert np.array_equal(ref2.values, ref.values)


def test_scene_dir_missing(tmp_path):
    with pytest.raises(SceneError):
        scene.load_scene_dir(tmp_path / "absent")


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 4),
    w=st.integers(1, 4),
    b=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_envi_roundtrip_random_cubes(tmp_path_factory, h, w, b, seed):
    tmp = tmp_path_factory.mktemp("envi")
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 1, size=(h, w, b)).astype(np.float32).astype(np.float64)
    cube = HsiCube(data, np.arange(b, dtype=np.float64) * 10 + 400)
    save_envi(cube, tmp / "r.hdr", tmp / "r.dat")
    loaded = load_envi(tmp / "r.hdr", tmp / "r.dat")
    assert np.array_equal(loaded.data, cube.data)
