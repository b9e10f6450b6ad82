from __future__ import annotations

import io
import math
import struct

import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from dictstereo import brdf
from dictstereo.brdf import TABLE_SHAPE, TABLE_SIZE

from conftest import random_unit


def oracle_half_angle(l, v, n):
    """Rusinkiewicz coordinates via explicit frame rotations."""
    t = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    F = np.stack([t, b, n])
    L, V = F @ l, F @ v
    h = (L + V) / np.linalg.norm(L + V)
    th = math.acos(np.clip(h[2], -1, 1))
    ph = math.atan2(h[1], h[0])

    def rot_z(a):
        return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])

    def rot_y(a):
        return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])

    d = rot_y(-th) @ rot_z(-ph) @ L
    td = math.acos(np.clip(d[2], -1, 1))
    pd = math.atan2(d[1], d[0]) % math.pi
    return th, td, pd


def _front_triples(rng, count):
    out = []
    while len(out) < count:
        n = random_unit(rng, 1)[0]
        l, v = random_unit(rng, 2, upper=False)
        if n @ l > 0.02 and n @ v > 0.02:
            out.append((l, v, n))
    return out


def _pi_dist(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def test_half_angle_matches_rotation_oracle():
    rng = np.random.default_rng(0)
    for l, v, n in _front_triples(rng, 500):
        c = brdf.to_half_angle(l, v, n)
        th, td, pd = oracle_half_angle(l, v, n)
        assert c.theta_h == pytest.approx(th, abs=1e-9)
        assert c.theta_d == pytest.approx(td, abs=1e-9)
        if th > 1e-3:
            assert _pi_dist(c.phi_d, pd) < 1e-8
        assert 0.0 <= c.phi_d < math.pi


def test_normal_incidence_gives_zero_angles():
    z = np.array([0.0, 0.0, 1.0])
    c = brdf.to_half_angle(z, z, z)
    assert (c.theta_h, c.theta_d) == (0.0, 0.0)


def test_canonical_directions_round_trip():
    rng = np.random.default_rng(1)
    th = rng.uniform(0, 1.2, 300)
    td = rng.uniform(0, 1.2, 300)
    pd = rng.uniform(0.01, math.pi - 0.01, 300)
    wi, wo = brdf.canonical_directions(th, td, pd)
    # closed form for the incident elevation
    cos_i = np.cos(th) * np.cos(td) - np.sin(th) * np.sin(td) * np.cos(pd)
    np.testing.assert_allclose(wi[:, 2], cos_i, atol=1e-12)
    z = np.array([0.0, 0.0, 1.0])
    for k in range(300):
        if wi[k, 2] > 0.05 and wo[k, 2] > 0.05:
            c = brdf.to_half_angle(wi[k], wo[k], z)
            assert c.theta_h == pytest.approx(th[k], abs=1e-9)
            assert c.theta_d == pytest.approx(td[k], abs=1e-9)
            assert _pi_dist(c.phi_d, pd[k]) < 1e-8


def test_back_facing_geometry_rejected():
    n = np.array([0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        brdf.to_half_angle(np.array([0.0, 0.0, -1.0]), n, n)
    with pytest.raises(ValueError):
        brdf.to_half_angle(np.array([0.0, 0.0, 2.0]), n, n)


def test_sampling_functional_partition_of_unity():
    rng = np.random.default_rng(2)
    for l, v, n in _front_triples(rng, 1000):
        s = brdf.sampling_functional(l, v, n)
        w = np.asarray(s.weights)
        assert 1 <= len(w) <= 8
        assert np.all(w > 0)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert len(set(s.indices)) == len(s.indices)
        assert all(0 <= i < TABLE_SIZE for i in s.indices)


def test_functional_at_node_is_one_hot():
    coords = brdf.HalfAngleCoords(brdf.theta_h_nodes()[40], brdf.theta_d_nodes()[30], brdf.phi_d_nodes()[17])
    s = brdf.functional_from_coords(coords)
    assert s.indices == ((40 * 90 + 30) * 180 + 17,)
    assert s.weights == (1.0,)


def test_phi_wraps_between_last_and_first_bin():
    # phi_d = 179.5 degrees blends bins 179 and 0 equally
    s = brdf.functional_from_coords(brdf.HalfAngleCoords(0.3, 0.2, math.radians(179.5)))
    phis = {i % 180 for i in s.indices}
    assert phis == {179, 0}


def test_evaluate_matches_independent_trilinear(random_table):
    table = random_table.values[0]
    # pad phi with its first slice so the interpolator wraps
    padded = np.concatenate([table, table[:, :, :1]], axis=2)
    interp = RegularGridInterpolator((np.arange(90), np.arange(90), np.arange(181)), padded)
    rng = np.random.default_rng(3)
    for l, v, n in _front_triples(rng, 300):
        th, td, pd = oracle_half_angle(l, v, n)
        u = [min(math.sqrt(th / (math.pi / 2)) * 90, 89), min(td / (math.pi / 2) * 90, 89), pd / math.pi * 180]
        assert brdf.evaluate(random_table, l, v, n) == pytest.approx(float(interp(u)[0]), rel=1e-7, abs=1e-9)


def test_evaluate_reciprocity(random_table):
    rng = np.random.default_rng(4)
    for l, v, n in _front_triples(rng, 1000):
        a = brdf.evaluate(random_table, l, v, n)
        b = brdf.evaluate(random_table, v, l, n)
        assert abs(a - b) <= 1e-9


def test_evaluate_bad_channel(random_table):
    z = np.array([0.0, 0.0, 1.0])
    with pytest.raises(IndexError):
        brdf.evaluate(random_table, z, z, z, channel=1)


def ward_oracle(th, ci, co, rd, rs, a):
    if ci <= 0 or co <= 0:
        return rd / math.pi
    return rd / math.pi + rs * math.exp(-math.tan(th) ** 2 / a ** 2) / (4 * math.pi * a * a * math.sqrt(ci * co))


def test_ward_table_matches_closed_form():
    b = brdf.generate_parametric("ward", {"rho_d": 0.3, "rho_s": 0.2, "alpha": 0.15})
    rng = np.random.default_rng(5)
    thn, tdn, pdn = brdf.theta_h_nodes(), brdf.theta_d_nodes(), brdf.phi_d_nodes()
    for _ in range(300):
        i, j, k = rng.integers(0, 90), rng.integers(0, 90), rng.integers(0, 180)
        th, td, pd = thn[i], tdn[j], pdn[k]
        ci = math.cos(th) * math.cos(td) - math.sin(th) * math.sin(td) * math.cos(pd)
        co = math.cos(th) * math.cos(td) + math.sin(th) * math.sin(td) * math.cos(pd)
        assert b.values[0, i, j, k] == pytest.approx(ward_oracle(th, ci, co, 0.3, 0.2, 0.15), rel=1e-9, abs=1e-12)


def test_lambertian_is_constant():
    b = brdf.generate_parametric("lambertian", {"albedo": 0.7})
    assert np.all(b.values == 0.7 / math.pi)
    rng = np.random.default_rng(6)
    for l, v, n in _front_triples(rng, 50):
        assert brdf.evaluate(b, l, v, n) == pytest.approx(0.7 / math.pi, rel=1e-14)


def test_cook_torrance_is_reciprocal_and_nonnegative():
    b = brdf.generate_parametric("cook-torrance", {"m": 0.3, "f0": 0.05})
    assert np.all(b.values >= 0)
    rng = np.random.default_rng(7)
    for l, v, n in _front_triples(rng, 100):
        assert brdf.evaluate(b, l, v, n) == pytest.approx(brdf.evaluate(b, v, l, n), abs=1e-9)


def test_parametric_rgb_and_validation():
    b = brdf.generate_parametric("lambertian", {"albedo": [0.1, 0.2, 0.3]})
    assert b.channels == 3
    np.testing.assert_allclose(b.values[:, 0, 0, 0], np.array([0.1, 0.2, 0.3]) / math.pi)
    with pytest.raises(ValueError):
        brdf.generate_parametric("ward", {"alpha": 0.0})
    with pytest.raises(ValueError):
        brdf.generate_parametric("ward", {"beta": 1.0})
    with pytest.raises(ValueError):
        brdf.generate_parametric("phong")


def test_brdf_rejects_bad_tables():
    with pytest.raises(ValueError):
        brdf.Brdf(np.zeros((1, 90, 90, 90)))
    with pytest.raises(ValueError):
        brdf.Brdf(-np.ones((1,) + TABLE_SHAPE))
    bad = np.zeros((1,) + TABLE_SHAPE)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        brdf.Brdf(bad)


# ---------------------------------------------------------------- MERL files

def _merl_bytes(stored: np.ndarray, dims=TABLE_SHAPE) -> bytes:
    return struct.pack("<3i", *dims) + stored.astype("<f8").tobytes()


@pytest.fixture(scope="module")
def merl_stored():
    rng = np.random.default_rng(8)
    return rng.uniform(0.0, 3000.0, 3 * TABLE_SIZE)


def test_merl_scales_applied(merl_stored):
    stored = np.full(3 * TABLE_SIZE, 1500.0)
    b = brdf.read_merl(io.BytesIO(_merl_bytes(stored)))
    np.testing.assert_allclose(b.values[:, 0, 0, 0], [1.0, 1.15, 1.66], rtol=1e-15)


def test_merl_read_write_read_is_bit_exact(merl_stored):
    first = brdf.read_merl(io.BytesIO(_merl_bytes(merl_stored)))
    buf = io.BytesIO()
    assert brdf.write_merl(first, buf) == 0
    second = brdf.read_merl(io.BytesIO(buf.getvalue()))
    assert first.values.tobytes() == second.values.tobytes()
    # and the bytes are stable from then on
    buf2 = io.BytesIO()
    brdf.write_merl(second, buf2)
    assert buf2.getvalue() == buf.getvalue()


def test_merl_write_arbitrary_table_within_one_ulp():
    rng = np.random.default_rng(9)
    b = brdf.Brdf(rng.uniform(0, 2, (3,) + TABLE_SHAPE))
    buf = io.BytesIO()
    inexact = brdf.write_merl(b, buf)
    back = brdf.read_merl(io.BytesIO(buf.getvalue()))
    diff = np.abs(back.values - b.values)
    assert np.all(diff <= np.spacing(b.values))
    assert np.count_nonzero(diff) == inexact


def test_merl_negative_markers_clamped(merl_stored):
    stored = merl_stored.copy()
    stored[[5, 70, 3 * TABLE_SIZE - 1]] = -1.0
    b = brdf.read_merl(io.BytesIO(_merl_bytes(stored)))
    assert b.clamped == 3
    assert b.values.min() == 0.0


def test_merl_bad_header_and_truncation(merl_stored):
    with pytest.raises(ValueError, match="dimensions"):
        brdf.read_merl(io.BytesIO(_merl_bytes(merl_stored, dims=(90, 90, 360))))
    with pytest.raises(ValueError, match="truncated"):
        brdf.read_merl(io.BytesIO(_merl_bytes(merl_stored)[:-8]))
    with pytest.raises(ValueError, match="truncated"):
        brdf.read_merl(io.BytesIO(b"\x00\x01"))


def test_merl_needs_three_channels(random_table):
    with pytest.raises(ValueError):
        brdf.write_merl(random_table, io.BytesIO())


def test_merl_directory(tmp_path, merl_stored):
    (tmp_path / "b.binary").write_bytes(_merl_bytes(merl_stored))
    (tmp_path / "a.binary").write_bytes(_merl_bytes(merl_stored * 0.5))
    atoms = brdf.load_merl_directory(tmp_path)
    assert [a.name for a in atoms] == ["a", "b"]
    with pytest.raises(FileNotFoundError):
        brdf.load_merl_directory(tmp_path / "missing")


# ---------------------------------------------------------------- error metric

def test_relative_error_closed_form():
    # independent loop over the grid for truth = 0, estimate = 1
    total = 0.0
    for th in brdf.theta_h_nodes():
        td = brdf.theta_d_nodes()[:, None]
        pd = brdf.phi_d_nodes()[None, :]
        ci = np.cos(th) * np.cos(td) - np.sin(th) * np.sin(td) * np.cos(pd)
        total += float(np.sum(np.maximum(ci, 0.0) ** 2))
    expected = math.sqrt(total / TABLE_SIZE)
    zero = brdf.Brdf(np.zeros((1,) + TABLE_SHAPE))
    one = brdf.Brdf(np.ones((1,) + TABLE_SHAPE))
    assert brdf.relative_brdf_error(one, zero) == pytest.approx(expected, rel=1e-10)
    assert brdf.relative_brdf_error(one, one) == 0.0


def test_relative_error_pseudo_metric(small_dictionary):
    a, b, c = small_dictionary.atoms
    ab = brdf.relative_brdf_error(a, b)
    assert ab == pytest.approx(brdf.relative_brdf_error(b, a), rel=1e-12)
    assert ab <= brdf.relative_brdf_error(a, c) + brdf.relative_brdf_error(c, b) + 1e-12
    with pytest.raises(ValueError):
        brdf.relative_brdf_error(a, brdf.Brdf(np.zeros((3,) + TABLE_SHAPE)))


def test_weighted_gram_reproduces_error(small_dictionary):
    from dictstereo.reflectance import reconstruct_brdf

    W = brdf.weighted_gram(small_dictionary.stacked[0])
    c = np.array([0.3, 0.0, 1.2])
    e = np.array([0.0, 1.0, 0.0])
    d = c - e
    direct = brdf.relative_brdf_error(reconstruct_brdf(c, small_dictionary), small_dictionary.atoms[1])
    assert math.sqrt(d @ W @ d) == pytest.approx(direct, rel=1e-9)


def test_dictionary_helpers(small_dictionary):
    assert small_dictionary.M == 3
    assert small_dictionary.names == ["lam", "w1", "w3"]
    assert small_dictionary.without(1).names == ["lam", "w3"]
    assert small_dictionary.stacked.shape == (1, TABLE_SIZE, 3)
    with pytest.raises(ValueError):
        brdf.Dictionary(())
    rgb = brdf.generate_parametric("lambertian", {"albedo": [0.1, 0.2, 0.3]})
    with pytest.raises(ValueError):
        brdf.Dictionary((rgb, small_dictionary.atoms[0]))
