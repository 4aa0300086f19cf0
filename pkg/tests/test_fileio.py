import math
import struct

import numpy as np
import pytest

from skywind import fileio
from skywind.errors import InputError
from skywind.imaging import CloudMask, PixelGeometry, ThermalFrame


class TestFrameRoundtrip:
    def test_roundtrip_preserves_temps(self, tmp_path):
        temps = np.random.default_rng(0).uniform(20000, 30000, (60, 80)).astype("<f4")
        frame = ThermalFrame(temps=temps.astype(float))
        path = tmp_path / "a.tsky"
        fileio.write_frame(path, frame)
        back = fileio.read_frame(path, frame_index=3, timestamp=12.5)
        np.testing.assert_allclose(back.temps, frame.temps, rtol=1e-7)
        assert back.frame_index == 3 and back.timestamp == 12.5

    def test_header_layout_little_endian(self, tmp_path):
        frame = ThermalFrame(temps=np.full((2, 3), 25000.0))
        path = tmp_path / "b.tsky"
        fileio.write_frame(path, frame)
        raw = path.read_bytes()
        assert raw[:4] == b"TSKY"
        rows, cols = struct.unpack_from("<II", raw, 4)
        assert (rows, cols) == (2, 3)
        first = struct.unpack_from("<f", raw, 12)[0]
        assert first == pytest.approx(25000.0)
        assert len(raw) == 12 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.tsky"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(InputError):
            fileio.read_frame(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "d.tsky"
        path.write_bytes(struct.pack("<4sII", b"TSKY", 4, 4) + b"\x00" * 8)
        with pytest.raises(InputError):
            fileio.read_frame(path)


class TestMaskAndGrids:
    def test_mask_roundtrip(self, tmp_path):
        bits = (np.random.default_rng(1).uniform(size=(6, 7)) < 0.5).astype(int)
        path = tmp_path / "m.tmsk"
        fileio.write_mask(path, CloudMask(bits))
        back = fileio.read_mask(path)
        np.testing.assert_array_equal(back.bits, bits)

    def test_field_grids_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        grids = [rng.normal(size=(5, 6)) for _ in range(4)]
        path = tmp_path / "f.tfld"
        fileio.write_field_grids(path, *grids)
        back = fileio.read_field_grids(path)
        assert path.read_bytes()[:4] == b"TFLD"
        for a, b in zip(grids, back):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_geometry_roundtrip(self, tmp_path):
        geom = PixelGeometry(
            dx=np.full((4, 5), 0.01), dy=np.full((4, 5), 0.012), diag_fov=1.0
        )
        path = tmp_path / "g.tgeo"
        fileio.write_geometry(path, geom)
        back = fileio.read_geometry(path, diag_fov=1.0)
        np.testing.assert_allclose(back.dx, geom.dx, atol=1e-8)
        np.testing.assert_allclose(back.dy, geom.dy, atol=1e-8)


class TestManifest:
    def test_roundtrip_with_and_without_masks(self, tmp_path):
        records = [
            fileio.ManifestRecord(
                frame_path="frame_0000.tsky", timestamp=0.0,
                sun_elevation_deg=88.0, sun_azimuth_deg=12.0, air_temp_k=298.0,
                mask_path="mask_0000.tmsk",
            ),
            fileio.ManifestRecord(frame_path="frame_0001.tsky", timestamp=15.0),
        ]
        path = tmp_path / "manifest.json"
        fileio.write_manifest(path, records)
        back = fileio.read_manifest(path)
        assert back == records
        assert back[1].mask_path is None

    def test_bad_shape_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{"frame_path": "x"}')
        with pytest.raises(InputError):
            fileio.read_manifest(path)
        path.write_text('[{"timestamp": 1.0}]')
        with pytest.raises(InputError):
            fileio.read_manifest(path)

    def test_load_frame_resolves_relative_paths_and_converts_units(self, tmp_path):
        frame = ThermalFrame(temps=np.full((3, 4), 26000.0))
        fileio.write_frame(tmp_path / "f.tsky", frame)
        record = fileio.ManifestRecord(
            frame_path="f.tsky", timestamp=4.0, sun_elevation_deg=45.0,
            sun_azimuth_deg=90.0, air_temp_k=290.0,
        )
        loaded = fileio.load_frame(record, 7, tmp_path)
        assert loaded.frame_index == 7
        assert loaded.sun_elevation == pytest.approx(math.pi / 4)
        assert loaded.sun_azimuth == pytest.approx(math.pi / 2)
        assert loaded.air_temp == 290.0
