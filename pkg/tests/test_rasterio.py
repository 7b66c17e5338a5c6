import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from polcolor import rasterio as pras
from polcolor.rasterio import Layout, PolRaster

from conftest import random_psd


def test_gray_file_size(tmp_path):
    r = PolRaster(Layout.GRAY1, np.arange(4.0).reshape(2, 2))
    pras.write(tmp_path / "g.pras", r)
    assert (tmp_path / "g.pras").stat().st_size == 16 + 16


def test_header_layout():
    blob = pras.encode(PolRaster(Layout.CLASS1, np.ones((3, 5))))
    assert blob[:4] == b"PRAS"
    assert blob[4:16] == bytes([1, 0, 3, 0, 5, 0, 0, 0, 3, 0, 0, 0])
    assert np.frombuffer(blob[16:], "<f4").tolist() == [1.0] * 15


@pytest.mark.parametrize("layout", list(Layout))
def test_roundtrip_bytes(layout, rng, tmp_path):
    data = np.abs(rng.standard_normal((4, 6, layout.channels)))
    r = PolRaster(layout, data)
    blob = pras.encode(r)
    back = pras.decode(blob)
    assert back.layout == layout and pras.encode(back) == blob
    pras.write(tmp_path / "x.pras", back)
    assert (tmp_path / "x.pras").read_bytes() == blob
    assert np.array_equal(back.data, data.astype(np.float32).astype(np.float64))


@given(st.binary(min_size=0, max_size=64))
def test_decode_garbage_raises_format_error(blob):
    try:
        pras.decode(blob)
    except pras.RasterFormatError:
        pass


def test_errors_are_distinct():
    blob = pras.encode(PolRaster(Layout.GRAY1, np.ones((2, 2))))
    with pytest.raises(pras.TruncatedPayloadError, match="truncated payload"):
        pras.decode(blob[:-1])
    with pytest.raises(pras.BadMagicError):
        pras.decode(b"PRAX" + blob[4:])
    bad_version = blob[:4] + (2).to_bytes(2, "little") + blob[6:]
    with pytest.raises(pras.UnknownVersionError):
        pras.decode(bad_version)
    bad_layout = blob[:6] + (9).to_bytes(2, "little") + blob[8:]
    with pytest.raises(pras.UnknownLayoutError):
        pras.decode(bad_layout)
    with pytest.raises(pras.RasterFormatError):
        pras.decode(blob + b"\0")


def test_invalid_rasters():
    with pytest.raises(ValueError):
        PolRaster(Layout.COV9, np.ones((2, 2, 3)))
    bad = np.zeros((1, 1, 9))
    bad[0, 0, 1] = -1
    with pytest.raises(ValueError):
        PolRaster(Layout.COV9, bad)


def test_covariance_roundtrip(rng):
    c = random_psd(rng, 12).reshape(3, 4, 3, 3)
    r = pras.from_covariance(c)
    assert np.allclose(pras.to_covariance(r), c, rtol=1e-6, atol=1e-6 * np.abs(c).max())
    back = pras.to_covariance(pras.decode(pras.encode(r)), repair=True)
    assert np.all(np.linalg.eigvalsh(back)[..., 0] >= -1e-12 * np.abs(c).max())


def _png(raster, mode):
    buf = io.BytesIO()
    Image.fromarray(pras.render_png(raster, mode)).save(buf, format="PNG")
    return buf.getvalue()


def test_gray_constant_uniform(tmp_path):
    r = PolRaster(Layout.GRAY1, np.full((8, 8), 10 ** -1.25))
    pras.export_png(r, "gray_db", tmp_path / "g.png")
    img = np.asarray(Image.open(tmp_path / "g.png"))
    assert img.dtype == np.uint8 and np.all(img == img[0, 0]) and img[0, 0] in (127, 128)
    ends = pras.render_png(PolRaster(Layout.GRAY1, np.array([[1.0, 1e-4, 0.0]])), "gray_db")
    assert ends.tolist() == [[255, 0, 0]]


def test_pauli_trihedral_blue():
    tri = np.array([[1, 0, 1], [0, 0, 0], [1, 0, 1]], complex)
    img = pras.render_png(pras.from_covariance(np.broadcast_to(tri, (4, 4, 3, 3))), "pauli")
    assert img.shape == (4, 4, 3)
    assert np.all(img[..., 2] == 255) and np.all(img[..., :2] == 0)


def test_zone_palette():
    zones = PolRaster(Layout.CLASS1, np.arange(1, 9, dtype=float).reshape(2, 4))
    img = pras.render_png(zones, "halpha_zones")
    assert len({tuple(p) for p in img.reshape(-1, 3)}) == 8
    with pytest.raises(ValueError):
        pras.render_png(PolRaster(Layout.CLASS1, np.zeros((2, 2))), "halpha_zones")


def test_png_deterministic(tmp_path, rng):
    r = pras.from_covariance(random_psd(rng, 16).reshape(4, 4, 3, 3))
    pras.export_png(r, "pauli", tmp_path / "a.png")
    pras.export_png(r, "pauli", tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert _png(r, "freeman") == _png(r, "freeman")


def test_png_incompatible_layout():
    with pytest.raises(ValueError):
        pras.render_png(PolRaster(Layout.GRAY1, np.ones((2, 2))), "pauli")
    with pytest.raises(ValueError):
        pras.render_png(PolRaster(Layout.GRAY1, np.ones((2, 2))), "sepia")
