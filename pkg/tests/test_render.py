from __future__ import annotations

import numpy as np
import pytest

from dictstereo import brdf, render, sampling
from dictstereo.render import DEFAULT_VIEW

from conftest import random_unit


def oracle_column(dictionary, normal, rig, view=DEFAULT_VIEW):
    """B(n) built one entry at a time through brdf.evaluate."""
    B = np.zeros((dictionary.channels, rig.Q, dictionary.M))
    for q, (l, s) in enumerate(zip(rig.directions, rig.intensities)):
        if normal @ l <= 0 or normal @ view <= 0:
            continue
        for j, atom in enumerate(dictionary.atoms):
            for c in range(dictionary.channels):
                B[c, q, j] = s * brdf.evaluate(atom, l, view, normal, c) * (normal @ l)
    return B


def test_render_normals_matches_entrywise_oracle(small_dictionary, rig40):
    rng = np.random.default_rng(0)
    normals = random_unit(rng, 20)
    B = render.render_normals(small_dictionary, normals, rig40)
    for p in range(20):
        np.testing.assert_allclose(B[:, p], oracle_column(small_dictionary, normals[p], rig40), rtol=1e-12,
                                   atol=1e-14)


def test_render_scene_superposition_homogeneity_shadows(small_dictionary, rig40):
    rng = np.random.default_rng(1)
    P, M = 1000, small_dictionary.M
    normals = random_unit(rng, P)
    c1 = rng.uniform(0, 1, (P, M))
    c2 = rng.uniform(0, 1, (P, M))
    k = rng.uniform(0.1, 10, (P, 1))
    i1 = render.render_scene(normals, c1, small_dictionary, rig40)
    i2 = render.render_scene(normals, c2, small_dictionary, rig40)
    i12 = render.render_scene(normals, c1 + c2, small_dictionary, rig40)
    ik = render.render_scene(normals, k * c1, small_dictionary, rig40)
    np.testing.assert_allclose(i12, i1 + i2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ik, k[None, :, :] * i1, rtol=1e-12, atol=1e-14)
    # attached shadows: back-lit measurements are exactly zero
    back = normals @ rig40.directions.T <= 0  # (P, Q)
    assert np.all(i1[back.T, 0] == 0.0)
    assert np.all(i1[~back.T, 0] > 0.0)


def test_render_scene_equals_b_times_c(small_dictionary, rig40):
    rng = np.random.default_rng(2)
    normals = random_unit(rng, 30)
    c = rng.uniform(0, 1, (30, small_dictionary.M))
    img = render.render_scene(normals, c, small_dictionary, rig40)
    B = render.render_normals(small_dictionary, normals, rig40)
    for p in range(30):
        np.testing.assert_allclose(img[:, p, 0], B[0, p] @ c[p], rtol=1e-12, atol=1e-14)


def test_render_scene_image_shapes_and_mask(small_dictionary, rig40):
    normals = np.zeros((4, 5, 3))
    normals[..., 2] = 1.0
    mask = np.zeros((4, 5), dtype=bool)
    mask[1:3, 1:4] = True
    ab = np.zeros((4, 5, small_dictionary.M))
    ab[..., 0] = 1.0
    img = render.render_scene(normals, ab, small_dictionary, rig40, mask=mask)
    assert img.shape == (rig40.Q, 4, 5, 1)
    assert np.all(img[:, ~mask] == 0)
    assert np.all(img[:, mask] > 0)
    with pytest.raises(ValueError):
        render.render_scene(normals, ab[..., :2], small_dictionary, rig40)
    with pytest.raises(ValueError):
        render.render_scene(normals, -ab, small_dictionary, rig40)


def test_noise_is_seeded_and_nonnegative(small_dictionary, rig40):
    rng = np.random.default_rng(3)
    normals = random_unit(rng, 50)
    c = np.ones((50, small_dictionary.M))
    a = render.render_scene(normals, c, small_dictionary, rig40, noise_sigma=0.05, rng=np.random.default_rng(9))
    b = render.render_scene(normals, c, small_dictionary, rig40, noise_sigma=0.05, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert a.min() >= 0


def test_rendering_independent_of_batch(small_dictionary, rig40):
    rng = np.random.default_rng(4)
    normals = random_unit(rng, 64)
    full = render.render_normals(small_dictionary, normals, rig40)
    part = render.render_normals(small_dictionary, normals[17:23], rig40)
    assert np.array_equal(full[:, 17:23], part)


def test_rig_validation():
    with pytest.raises(ValueError):
        render.LightingRig(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        render.LightingRig(np.array([[0, 0, 2.0]]))
    with pytest.raises(ValueError):
        render.LightingRig(np.array([[0, 0, 1.0]]), np.array([-1.0]))
    rig = render.random_rig(30, 2, min_elevation_deg=20)
    assert np.all(rig.directions[:, 2] >= np.sin(np.radians(20)) - 1e-12)
    g = render.geodesic_rig(253)
    assert g.Q == 253 and np.all(g.directions[:, 2] > 0)


def test_shade_zero_when_backlit(small_dictionary):
    n = np.array([0.0, 0.0, 1.0])
    atom = small_dictionary.atoms[1]
    assert render.shade(atom, n, np.array([1.0, 0, 0]), n) == 0.0
    l = np.array([0.6, 0.0, 0.8])
    assert render.shade(atom, n, l, n) == pytest.approx(brdf.evaluate(atom, l, n, n) * 0.8)


def test_rendered_dictionary_columns_and_rows(small_dictionary, rig40):
    rd = render.render_dictionary(small_dictionary, sampling.equiangular_hemisphere(10), rig40)
    g = rd.grams
    sub = rd.columns([0, 2])
    assert np.array_equal(sub.matrices, rd.matrices[..., [0, 2]])
    np.testing.assert_array_equal(sub.grams, g[:, :, [0, 2]][:, :, :, [0, 2]])
    r = rd.rows([3, 1])
    assert np.array_equal(r.matrices, rd.matrices[:, :, [3, 1], :])
    assert r.rig.Q == 2


def test_pyramid_cache_round_trip_and_corruption(tmp_path, small_dictionary, rig40):
    res = (10.0, 5.0)
    pyr = render.cached_pyramid(tmp_path, small_dictionary, res, rig40)
    files = list(tmp_path.glob("rendered-*.bin"))
    assert len(files) == 1
    again = render.cached_pyramid(tmp_path, small_dictionary, res, rig40)
    for a, b in zip(pyr.levels, again.levels):
        assert np.array_equal(a.matrices, b.matrices)
        assert np.array_equal(a.candidates.normals, b.candidates.normals)
    key = render.cache_key(small_dictionary, res, rig40, DEFAULT_VIEW)
    data = bytearray(files[0].read_bytes())
    data[-10] ^= 0xFF
    files[0].write_bytes(bytes(data))
    with pytest.raises(ValueError, match="hash"):
        render.load_pyramid(files[0], key)
    other = render.cache_key(small_dictionary, res, render.random_rig(40, 6), DEFAULT_VIEW)
    with pytest.raises(ValueError, match="key"):
        render.load_pyramid(files[0], other)


def test_relight_under_original_light_reproduces_render(small_dictionary, rig40):
    class Result:
        pass

    rng = np.random.default_rng(5)
    r = Result()
    r.normals = random_unit(rng, 12).reshape(3, 4, 3)
    r.abundances = rng.uniform(0, 1, (3, 4, 1, small_dictionary.M))
    r.mask = np.ones((3, 4), dtype=bool)
    r.dictionary = small_dictionary
    full = render.render_scene(r.normals, r.abundances, small_dictionary, rig40)
    one = render.relight(r, rig40.subset([7]))
    assert np.array_equal(one[0], full[7])
    dark = render.relight(r, render.LightingRig(rig40.directions[:1], np.zeros(1)))
    assert np.all(dark == 0)
