from __future__ import annotations

import json

import numpy as np
import pytest

from dictstereo import io as dio
from dictstereo.render import random_rig


@pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
def test_pfm_round_trip(tmp_path, shape):
    a = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    dio.write_pfm(tmp_path / "a.pfm", a)
    assert np.array_equal(dio.read_pfm(tmp_path / "a.pfm"), a)


def test_pfm_layout_and_big_endian(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    dio.write_pfm(tmp_path / "a.pfm", a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first on disk
    assert np.frombuffer(raw[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 2\n1.0\n" + np.flipud(a).astype(">f4").tobytes())
    assert np.array_equal(dio.read_pfm(tmp_path / "b.pfm"), a)
    (tmp_path / "c.pfm").write_bytes(raw[:-4])
    with pytest.raises(dio.InputError, match="truncated"):
        dio.read_pfm(tmp_path / "c.pfm")
    (tmp_path / "d.pfm").write_bytes(b"P6\n")
    with pytest.raises(dio.InputError):
        dio.read_pfm(tmp_path / "d.pfm")
    with pytest.raises(ValueError):
        dio.write_pfm(tmp_path / "e.pfm", np.zeros((2, 2, 2)))


def test_png16_round_trip_and_saturation(tmp_path):
    pytest.importorskip("cv2")
    a = np.random.default_rng(1).uniform(0, 1, (6, 5, 3))
    a[0, 0] = 1.0
    dio.write_png16(tmp_path / "a.png", a)
    back, sat = dio.read_png16(tmp_path / "a.png")
    assert np.max(np.abs(back - a)) <= 0.5 / 65535 + 1e-12
    assert sat[0, 0].all() and sat.sum() == 3


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(2).uniform(size=(7, 9)) > 0.5
    dio.write_mask(tmp_path / "m.png", m)
    assert np.array_equal(dio.read_mask(tmp_path / "m.png"), m)


def _dataset(tmp_path, q=4, encoding="pfm"):
    rig = random_rig(q, 0)
    names = []
    for i in range(q):
        img = np.full((3, 4, 1), 0.1 * (i + 1))
        if encoding == "pfm":
            name = f"i{i}.pfm"
            dio.write_pfm(tmp_path / name, img)
        else:
            name = f"i{i}.png"
            dio.write_png16(tmp_path / name, img)
        names.append(name)
    man = dio.Manifest(tmp_path, tuple(names), rig, np.array([0, 0, 1.0]), encoding=encoding)
    man.save(tmp_path / "manifest.json")
    return man


def test_manifest_round_trip_and_stack(tmp_path):
    man = _dataset(tmp_path)
    back = dio.load_manifest(tmp_path / "manifest.json")
    assert back.images == man.images
    np.testing.assert_allclose(back.rig.directions, man.rig.directions, atol=1e-15)
    stack, mask, sat = dio.load_stack(back)
    assert stack.shape == (4, 3, 4, 1)
    np.testing.assert_allclose(stack[2], 0.3, rtol=1e-7)
    assert mask is None and sat is None


def test_png_stack_defaults_saturation(tmp_path):
    pytest.importorskip("cv2")
    _dataset(tmp_path, encoding="png16")
    _, _, sat = dio.load_stack(dio.load_manifest(tmp_path / "manifest.json"))
    assert sat == 1.0


@pytest.mark.parametrize("edit,match", [
    (lambda d: d.pop("lights"), "lights"),
    (lambda d: d.update(version=2), "expected"),
    (lambda d: d["lights"].pop(), "images but"),
    (lambda d: d.update(images=[], lights=[]), "no images"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["lights"].__setitem__(0, [0, 0, 0]), "zero light"),
])
def test_manifest_errors(tmp_path, edit, match):
    _dataset(tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    edit(doc)
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(dio.InputError, match=match):
        dio.load_manifest(tmp_path / "manifest.json")


def test_stack_errors(tmp_path):
    man = _dataset(tmp_path)
    (tmp_path / "i1.pfm").unlink()
    with pytest.raises(dio.InputError, match="missing"):
        dio.load_stack(man)
    dio.write_pfm(tmp_path / "i1.pfm", np.zeros((5, 4)))
    with pytest.raises(dio.InputError, match="shape"):
        dio.load_stack(man)
    dio.write_pfm(tmp_path / "i1.pfm", np.full((3, 4), np.nan))
    with pytest.raises(dio.InputError, match="non-finite"):
        dio.load_stack(man)


def test_sha256(tmp_path):
    import hashlib

    (tmp_path / "x").write_bytes(b"abc" * 1000)
    assert dio.sha256_file(tmp_path / "x") == hashlib.sha256(b"abc" * 1000).hexdigest()
