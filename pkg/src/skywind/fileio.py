"""Binary frame/mask/field containers and the JSON sequence manifest.

All binary formats share the layout ``magic (4 bytes), u32 rows, u32 cols``
followed by row-major little-endian payload grids:

* ``TSKY``: one f32 grid of centi-kelvin temperatures;
* ``TMSK``: one u8 grid of cloud bits;
* ``TFLD``: four f32 grids (u, v, phi, psi);
* ``TGEO``: two f32 grids (dx, dy at unit height).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .imaging import CloudMask, PixelGeometry, ThermalFrame

_HEADER = struct.Struct("<4sII")


def _write_grids(path, magic: bytes, grids: list[np.ndarray]) -> None:
    rows, cols = grids[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, rows, cols))
        for grid in grids:
            if grid.shape != (rows, cols):
                raise InputError("all grids in one file must share a shape")
            fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def _read_grids(path, magic: bytes, count: int) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    got_magic, rows, cols = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise InputError(f"{path}: expected magic {magic!r}, found {got_magic!r}")
    need = _HEADER.size + 4 * rows * cols * count
    if len(data) < need:
        raise InputError(f"{path}: truncated payload")
    out = []
    offset = _HEADER.size
    for _ in range(count):
        grid = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        out.append(grid.reshape(rows, cols).astype(float))
        offset += 4 * rows * cols
    return out


def write_frame(path, frame: ThermalFrame) -> None:
    _write_grids(path, b"TSKY", [frame.temps])


def read_frame(
    path,
    frame_index: int = 0,
    timestamp: float = 0.0,
    sun_elevation: float = math.pi / 2,
    sun_azimuth: float = 0.0,
    air_temp: float = 300.0,
) -> ThermalFrame:
    (temps,) = _read_grids(path, b"TSKY", 1)
    return ThermalFrame(
        temps=temps,
        frame_index=frame_index,
        timestamp=timestamp,
        sun_elevation=sun_elevation,
        sun_azimuth=sun_azimuth,
        air_temp=air_temp,
    )


def write_mask(path, mask: CloudMask) -> None:
    rows, cols = mask.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"TMSK", rows, cols))
        fh.write(mask.bits.astype("u1").tobytes())


def read_mask(path) -> CloudMask:
    data = Path(path).read_bytes()
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != b"TMSK":
        raise InputError(f"{path}: not a mask file")
    bits = np.frombuffer(data, dtype="u1", count=rows * cols, offset=_HEADER.size)
    return CloudMask(bits.reshape(rows, cols))


def write_field_grids(path, u, v, phi, psi) -> None:
    _write_grids(path, b"TFLD", [u, v, phi, psi])


def read_field_grids(path):
    return _read_grids(path, b"TFLD", 4)


def write_geometry(path, geom: PixelGeometry) -> None:
    _write_grids(path, b"TGEO", [geom.dx, geom.dy])


def read_geometry(path, diag_fov: float = float("nan")) -> PixelGeometry:
    dx, dy = _read_grids(path, b"TGEO", 2)
    return PixelGeometry(dx=dx, dy=dy, diag_fov=diag_fov)


@dataclass(frozen=True)
class ManifestRecord:
    frame_path: str
    timestamp: float
    sun_elevation_deg: float = 90.0
    sun_azimuth_deg: float = 0.0
    air_temp_k: float = 300.0
    mask_path: str | None = None


def write_manifest(path, records: list[ManifestRecord]) -> None:
    payload = []
    for rec in records:
        entry = {
            "frame_path": rec.frame_path,
            "timestamp": rec.timestamp,
            "sun_elevation_deg": rec.sun_elevation_deg,
            "sun_azimuth_deg": rec.sun_azimuth_deg,
            "air_temp_k": rec.air_temp_k,
        }
        if rec.mask_path is not None:
            entry["mask_path"] = rec.mask_path
        payload.append(entry)
    Path(path).write_text(json.dumps(payload, indent=2))


def read_manifest(path) -> list[ManifestRecord]:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, list):
        raise InputError("manifest must be a JSON array of records")
    records = []
    for entry in payload:
        try:
            records.append(
                ManifestRecord(
                    frame_path=entry["frame_path"],
                    timestamp=float(entry["timestamp"]),
                    sun_elevation_deg=float(entry.get("sun_elevation_deg", 90.0)),
                    sun_azimuth_deg=float(entry.get("sun_azimuth_deg", 0.0)),
                    air_temp_k=float(entry.get("air_temp_k", 300.0)),
                    mask_path=entry.get("mask_path"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad manifest record {entry!r}: {exc}") from exc
    return records


def load_frame(record: ManifestRecord, index: int, base_dir: Path) -> ThermalFrame:
    """Read a manifest record's frame, resolving paths against the manifest dir."""
    path = Path(record.frame_path)
    if not path.is_absolute():
        path = base_dir / path
    return read_frame(
        path,
        frame_index=index,
        timestamp=record.timestamp,
        sun_elevation=math.radians(record.sun_elevation_deg),
        sun_azimuth=math.radians(record.sun_azimuth_deg),
        air_temp=record.air_temp_k,
    )


def load_mask(record: ManifestRecord, base_dir: Path) -> CloudMask | None:
    if record.mask_path is None:
        return None
    path = Path(record.mask_path)
    if not path.is_absolute():
        path = base_dir / path
    return read_mask(path)
