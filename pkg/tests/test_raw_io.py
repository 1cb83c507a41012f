import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from darkisp.errors import BadMagic, InvalidHeader, IoFailure, MissingSidecarField, OddDimensions, TruncatedPayload
from darkisp.raw_io import (
    CFA_LAYOUTS,
    BayerImage,
    RgbImage,
    SensorMeta,
    load_bayer,
    load_rgb,
    pack_cfa,
    read_draw,
    save_bayer,
    save_rgb,
    sidecar_path,
    to_preview_bytes,
    unpack_cfa,
    write_draw,
)


def _ppm_pixels(path):
    img = load_rgb(path)
    return np.round(img.channels * 255).astype(int)


class TestLoadBayer:
    def test_unit_levels_pass_values_through(self, tmp_path, rng):
        planes = rng.uniform(0, 1, size=(4, 3, 5)).astype(np.float32)
        write_draw(tmp_path / "a.draw", planes, SensorMeta())
        np.testing.assert_array_equal(load_bayer(tmp_path / "a.draw").planes, planes.astype(np.float64))

    def test_black_level_maps_to_zero(self, tmp_path):
        meta = SensorMeta(black_level=512, white_level=16383)
        write_draw(tmp_path / "a.draw", np.full((4, 2, 2), 512.0), meta)
        assert np.all(load_bayer(tmp_path / "a.draw").planes == 0.0)

    def test_mid_count_normalization(self, tmp_path):
        meta = SensorMeta(black_level=512, white_level=16383)
        write_draw(tmp_path / "a.draw", np.full((4, 2, 2), 8447.0), meta)
        got = load_bayer(tmp_path / "a.draw").planes
        # hand arithmetic: 7935 / 15871
        expected = 7935.0 / 15871.0
        assert abs(expected - 0.4999685) < 1e-7
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_below_black_and_above_white_are_clamped(self, tmp_path):
        meta = SensorMeta(black_level=10, white_level=20)
        payload = np.array([0.0, 10.0, 15.0, 30.0]).reshape(4, 1, 1)
        write_draw(tmp_path / "a.draw", payload, meta)
        np.testing.assert_array_equal(load_bayer(tmp_path / "a.draw").planes.ravel(), [0.0, 0.0, 0.5, 1.0])

    def test_missing_sidecar_uses_defaults(self, tmp_path):
        write_draw(tmp_path / "a.draw", np.zeros((4, 2, 2)))
        assert not sidecar_path(tmp_path / "a.draw").exists()
        assert load_bayer(tmp_path / "a.draw").meta == SensorMeta()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.draw").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(BadMagic):
            load_bayer(tmp_path / "a.draw")

    def test_truncated_payload(self, tmp_path):
        write_draw(tmp_path / "a.draw", np.zeros((4, 2, 2)))
        data = (tmp_path / "a.draw").read_bytes()
        (tmp_path / "a.draw").write_bytes(data[:-4])
        with pytest.raises(TruncatedPayload):
            load_bayer(tmp_path / "a.draw")

    def test_zero_dimension(self, tmp_path):
        (tmp_path / "a.draw").write_bytes(struct.pack("<4sBIII", b"DRAW", 1, 0, 3, 4))
        with pytest.raises(InvalidHeader):
            read_draw(tmp_path / "a.draw")

    def test_wrong_version(self, tmp_path):
        (tmp_path / "a.draw").write_bytes(struct.pack("<4sBIII", b"DRAW", 2, 1, 1, 4) + bytes(16))
        with pytest.raises(InvalidHeader):
            read_draw(tmp_path / "a.draw")

    def test_missing_sidecar_field(self, tmp_path):
        write_draw(tmp_path / "a.draw", np.zeros((4, 2, 2)), SensorMeta())
        side = sidecar_path(tmp_path / "a.draw")
        d = json.loads(side.read_text())
        del d["ccm"]
        side.write_text(json.dumps(d))
        with pytest.raises(MissingSidecarField, match="ccm"):
            load_bayer(tmp_path / "a.draw")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure, match="nope.draw"):
            load_bayer(tmp_path / "nope.draw")

    def test_header_layout(self, tmp_path):
        write_draw(tmp_path / "a.draw", np.zeros((4, 3, 7)))
        raw = (tmp_path / "a.draw").read_bytes()
        assert raw[:4] == b"DRAW" and raw[4] == 1
        assert struct.unpack_from("<III", raw, 5) == (7, 3, 4)
        assert len(raw) == 17 + 4 * 3 * 7 * 4


class TestSensorMeta:
    def test_rejects_inverted_levels(self):
        with pytest.raises(InvalidHeader):
            SensorMeta(black_level=10, white_level=10)

    def test_rejects_nonpositive_gain(self):
        with pytest.raises(InvalidHeader):
            SensorMeta(wb_gains=(1, 0, 1, 1))

    def test_dict_round_trip(self):
        m = SensorMeta(64, 1023, "GBRG", (2, 1, 1.5, 1), ((1, 0.1, 0), (0, 1, 0), (0, 0, 1)), 0.1)
        assert SensorMeta.from_dict(json.loads(json.dumps(m.to_dict()))) == m


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6).map(
    lambda s: (4, s[1], s[2])), elements=st.floats(0, 1, width=32)))
def test_save_load_bit_exact(tmp_path_factory, planes):
    path = tmp_path_factory.mktemp("rt") / "x.draw"
    img = BayerImage(planes.astype(np.float64))
    save_bayer(img, path)
    np.testing.assert_array_equal(load_bayer(path).planes, img.planes)


class TestCfa:
    def test_rggb_tile(self):
        img = pack_cfa(np.array([[1.0, 2.0], [3.0, 4.0]]), "RGGB")
        r, gr, b, gb = img.planes[:, 0, 0]
        assert (r, gr, gb, b) == (1, 2, 3, 4)

    def test_bggr_tile(self):
        img = pack_cfa(np.array([[1.0, 2.0], [3.0, 4.0]]), "BGGR")
        r, gr, b, gb = img.planes[:, 0, 0]
        assert (b, gr, gb, r) == (1, 2, 3, 4)

    @pytest.mark.parametrize("pattern", sorted(CFA_LAYOUTS))
    def test_round_trip(self, pattern, rng):
        m = rng.uniform(size=(8, 8))
        np.testing.assert_array_equal(unpack_cfa(pack_cfa(m, pattern)), m)

    def test_odd_dimensions(self):
        with pytest.raises(OddDimensions):
            pack_cfa(np.zeros((3, 4)))


class TestSaveRgb:
    def test_preview_black(self, tmp_path):
        save_rgb(RgbImage(np.zeros((3, 2, 2))), tmp_path / "a.ppm", "preview")
        assert np.all(_ppm_pixels(tmp_path / "a.ppm") == 0)

    def test_preview_white(self, tmp_path):
        save_rgb(RgbImage(np.ones((3, 2, 2))), tmp_path / "a.ppm", "preview")
        assert np.all(_ppm_pixels(tmp_path / "a.ppm") == 255)

    def test_preview_half(self, tmp_path):
        oracle = round((1.055 * 0.5 ** (1 / 2.4) - 0.055) * 255)
        assert oracle == 188
        save_rgb(RgbImage(np.full((3, 1, 1), 0.5)), tmp_path / "a.ppm", "preview")
        assert np.all(_ppm_pixels(tmp_path / "a.ppm") == oracle)

    def test_preview_header(self, tmp_path):
        save_rgb(RgbImage(np.zeros((3, 2, 5))), tmp_path / "a.ppm", "preview")
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 2\n255\n")

    def test_preview_monotone(self):
        v = np.linspace(-0.5, 1.5, 2001)
        q = to_preview_bytes(np.broadcast_to(v, (3, 1, v.size))).astype(int)
        assert np.all(np.diff(q[0, :, 0]) >= 0)

    def test_pfm_round_trip_and_header(self, tmp_path, rng):
        ch = rng.uniform(-1, 2, size=(3, 4, 5)).astype(np.float32).astype(np.float64)
        save_rgb(RgbImage(ch), tmp_path / "a.pfm", "float")
        assert (tmp_path / "a.pfm").read_bytes().startswith(b"PF\n5 4\n-1.0\n")
        np.testing.assert_array_equal(load_rgb(tmp_path / "a.pfm").channels, ch)

    def test_pfm_rows_bottom_to_top(self, tmp_path):
        ch = np.zeros((3, 2, 1))
        ch[:, 1, 0] = 7.0  # bottom row
        save_rgb(RgbImage(ch), tmp_path / "a.pfm")
        body = np.frombuffer((tmp_path / "a.pfm").read_bytes()[len(b"PF\n1 2\n-1.0\n"):], "<f4")
        assert list(body[:3]) == [7.0, 7.0, 7.0]

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_rgb(RgbImage(np.full((3, 1, 1), np.nan)), tmp_path / "a.pfm")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(IoFailure):
            save_rgb(RgbImage(np.zeros((3, 1, 1))), tmp_path / "missing" / "a.pfm")
