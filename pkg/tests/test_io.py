import math
import struct

import numpy as np
import pytest

from ovfield.camera import Camera, look_at, orbit_angles, orbit_cameras, read_cameras, write_cameras
from ovfield.errors import FormatError
from ovfield.tensorio import (read_id_png, read_rgb_png, read_tensor, tensor_from_bytes,
                              tensor_to_bytes, write_heatmap_png, write_id_png, write_rgb_png,
                              write_tensor)


def test_tensor_roundtrip_and_layout(tmp_path, rng):
    a = rng.normal(size=(2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "a.oftn", a)
    assert read_tensor(tmp_path / "a.oftn").tobytes() == a.tobytes()
    buf = tensor_to_bytes(np.array([[1.0, 2.0]]))
    assert buf == b"OFTN" + struct.pack("<III", 1, 2, 1) + struct.pack("<I", 2) + \
        struct.pack("<2f", 1.0, 2.0)


@pytest.mark.parametrize("mutate", [lambda b: b[:-1], lambda b: b"NOPE" + b[4:],
                                    lambda b: b[:4] + struct.pack("<I", 2) + b[8:], lambda b: b[:6]])
def test_tensor_rejects_bad_bytes(mutate):
    with pytest.raises(FormatError):
        tensor_from_bytes(mutate(tensor_to_bytes(np.ones((2, 2)))))


def test_png_roundtrips(tmp_path, rng):
    ids = rng.integers(0, 300, (5, 7))
    write_id_png(tmp_path / "ids.png", ids)
    np.testing.assert_array_equal(read_id_png(tmp_path / "ids.png"), ids)
    with pytest.raises(ValueError):
        write_id_png(tmp_path / "x.png", np.array([[70000]]))
    rgb = rng.integers(0, 256, (4, 6, 3)) / 255.0
    write_rgb_png(tmp_path / "rgb.png", rgb)
    np.testing.assert_allclose(read_rgb_png(tmp_path / "rgb.png"), rgb, atol=1e-12)
    write_heatmap_png(tmp_path / "h.png", np.array([[-1.0, 0.0, 1.0, 3.0]]))
    from PIL import Image
    assert np.array(Image.open(tmp_path / "h.png")).tolist() == [[0, 128, 255, 255]]


def test_look_at_is_orthonormal_and_faces_target():
    rot = look_at([2.0, -1.0, 1.5], [0, 0, 0])
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rot[:, 2], -np.array([2.0, -1.0, 1.5]) / math.sqrt(7.25), atol=1e-12)


def test_orbit_eight_views_at_45_degrees():
    cams = orbit_cameras(8)
    np.testing.assert_allclose(orbit_angles(8), np.radians(np.arange(0, 360, 45)))
    elev = math.radians(30)
    for k, cam in enumerate(cams):
        az = math.radians(45 * k)
        expected = 3.2 * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az),
                                   math.sin(elev)])
        np.testing.assert_allclose(cam.position, expected, atol=1e-12)
        assert cam.t_near < 3.2 - math.sqrt(3) + 1e-9 and cam.t_far > 3.2 + math.sqrt(3) - 1e-9


def test_camera_file_roundtrip(tmp_path):
    cams = orbit_cameras(3, height=10, width=12)
    write_cameras(tmp_path / "cameras.txt", cams)
    back = read_cameras(tmp_path / "cameras.txt")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.position, b.position)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert (a.focal, a.principal, a.height, a.width) == (b.focal, b.principal, b.height, b.width)


@pytest.mark.parametrize("kw", [dict(t_near=2.0, t_far=1.0), dict(height=0), dict(focal=-1.0),
                                dict(rotation=np.ones((3, 3)))])
def test_camera_validation(kw):
    args = dict(position=np.zeros(3), rotation=np.eye(3), focal=1.0, principal=(0.5, 0.5),
                height=1, width=1, t_near=0.1, t_far=1.0)
    args.update(kw)
    with pytest.raises(ValueError):
        Camera(**args)
