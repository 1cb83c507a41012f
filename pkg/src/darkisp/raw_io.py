"""Bayer RAW containers, RGB float/preview images and their metadata sidecars.

The on-disk RAW container ("DRAW") is a small little-endian header followed by
four float32 planes (R, Gr, B, Gb), each row-major::

    magic   4 bytes  b"DRAW"
    version u8       1
    width   u32
    height  u32
    planes  u32      4
    payload 4*H*W float32

Sensor metadata lives next to it in ``<path>.json``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvalidHeader,
    IoFailure,
    MissingSidecarField,
    OddDimensions,
    ShapeMismatch,
    TruncatedPayload,
)

MAGIC = b"DRAW"
VERSION = 1
_HEADER = struct.Struct("<4sBIII")

PLANES = ("R", "Gr", "B", "Gb")
PLANE_INDEX = {name: i for i, name in enumerate(PLANES)}

# Plane at tile positions (0,0), (0,1), (1,0), (1,1). The first green in raster
# order is always "Gr", the second "Gb".
CFA_LAYOUTS = {
    "RGGB": ("R", "Gr", "Gb", "B"),
    "BGGR": ("B", "Gr", "Gb", "R"),
    "GRBG": ("Gr", "R", "B", "Gb"),
    "GBRG": ("Gr", "B", "R", "Gb"),
}
_TILE = ((0, 0), (0, 1), (1, 0), (1, 1))

SIDECAR_FIELDS = ("black_level", "white_level", "cfa_pattern", "wb_gains", "ccm", "exposure_ratio")


@dataclass(frozen=True)
class SensorMeta:
    black_level: float = 0.0
    white_level: float = 1.0
    cfa_pattern: str = "RGGB"
    wb_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    ccm: tuple[tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    exposure_ratio: float = 1.0

    def __post_init__(self):
        if not self.white_level > self.black_level:
            raise InvalidHeader(f"white_level {self.white_level} must exceed black_level {self.black_level}")
        if self.cfa_pattern not in CFA_LAYOUTS:
            raise InvalidHeader(f"unknown CFA pattern {self.cfa_pattern!r}")
        gains = tuple(float(g) for g in self.wb_gains)
        if len(gains) != 4 or min(gains) <= 0:
            raise InvalidHeader(f"wb_gains must be 4 strictly positive values, got {gains}")
        ccm = tuple(tuple(float(v) for v in row) for row in self.ccm)
        if len(ccm) != 3 or any(len(r) != 3 for r in ccm):
            raise InvalidHeader("ccm must be 3x3")
        object.__setattr__(self, "wb_gains", gains)
        object.__setattr__(self, "ccm", ccm)

    def to_dict(self) -> dict:
        return {
            "black_level": self.black_level,
            "white_level": self.white_level,
            "cfa_pattern": self.cfa_pattern,
            "wb_gains": list(self.wb_gains),
            "ccm": [list(r) for r in self.ccm],
            "exposure_ratio": self.exposure_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorMeta":
        missing = [k for k in SIDECAR_FIELDS if k not in d]
        if missing:
            raise MissingSidecarField(f"sidecar lacks field(s): {', '.join(missing)}")
        return cls(
            black_level=float(d["black_level"]),
            white_level=float(d["white_level"]),
            cfa_pattern=str(d["cfa_pattern"]),
            wb_gains=tuple(d["wb_gains"]),
            ccm=tuple(tuple(r) for r in d["ccm"]),
            exposure_ratio=float(d["exposure_ratio"]),
        )


@dataclass
class BayerImage:
    """Four normalized planes in (R, Gr, B, Gb) order, shape 4 x H x W."""

    planes: np.ndarray
    meta: SensorMeta = field(default_factory=SensorMeta)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] != 4:
            raise ShapeMismatch(f"Bayer planes must be 4xHxW, got {self.planes.shape}")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass
class RgbImage:
    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ShapeMismatch(f"RGB channels must be 3xHxW, got {self.channels.shape}")

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def normalize(values: np.ndarray, black_level: float, white_level: float) -> np.ndarray:
    """Map raw counts to [0, 1]; anything under the black level becomes 0."""
    out = (np.asarray(values, dtype=np.float64) - black_level) / (white_level - black_level)
    return np.clip(out, 0.0, 1.0)


def write_draw(path, payload: np.ndarray, meta: SensorMeta | None = None) -> None:
    """Write a raw 4xHxW payload (any units) and its sidecar without touching the values."""
    payload = np.asarray(payload)
    if payload.ndim != 3 or payload.shape[0] != 4:
        raise ShapeMismatch(f"payload must be 4xHxW, got {payload.shape}")
    _, h, w = payload.shape
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, w, h, 4))
            f.write(body)
        if meta is not None:
            sidecar_path(path).write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_draw(path) -> np.ndarray:
    """Read the float32 payload of a DRAW file as a 4xHxW array (no normalization)."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IoFailure(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise InvalidHeader(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, w, h, c = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise InvalidHeader(f"{path}: unsupported version {version}")
    if c != 4:
        raise InvalidHeader(f"{path}: expected 4 planes, header says {c}")
    if w == 0 or h == 0:
        raise InvalidHeader(f"{path}: zero dimension {w}x{h}")
    expected = 4 * h * w * 4
    got = len(raw) - _HEADER.size
    if got != expected:
        raise TruncatedPayload(f"{path}: payload has {got} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(4, h, w)


def load_meta(path) -> SensorMeta:
    side = sidecar_path(path)
    if not side.exists():
        return SensorMeta()
    try:
        d = json.loads(side.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot parse sidecar {side}: {exc}") from exc
    return SensorMeta.from_dict(d)


def load_bayer(path) -> BayerImage:
    """Load a DRAW file, apply black/white level normalization and clamp to [0, 1]."""
    payload = read_draw(path)
    meta = load_meta(path)
    planes = normalize(payload, meta.black_level, meta.white_level)
    return BayerImage(planes, meta)


def save_bayer(img: BayerImage, path) -> None:
    """Write normalized planes as float32; the sidecar records black 0 / white 1."""
    m = img.meta
    meta = SensorMeta(0.0, 1.0, m.cfa_pattern, m.wb_gains, m.ccm, m.exposure_ratio)
    write_draw(path, img.planes, meta)


def pack_cfa(mosaic: np.ndarray, pattern: str = "RGGB", meta: SensorMeta | None = None) -> BayerImage:
    """Split a 2H x 2W mosaic into the four planes according to the CFA pattern."""
    mosaic = np.asarray(mosaic, dtype=np.float64)
    if mosaic.ndim != 2:
        raise ShapeMismatch(f"mosaic must be 2-D, got {mosaic.shape}")
    if mosaic.shape[0] % 2 or mosaic.shape[1] % 2:
        raise OddDimensions(f"mosaic dimensions must be even, got {mosaic.shape}")
    if pattern not in CFA_LAYOUTS:
        raise InvalidHeader(f"unknown CFA pattern {pattern!r}")
    h, w = mosaic.shape[0] // 2, mosaic.shape[1] // 2
    planes = np.empty((4, h, w))
    for (dy, dx), name in zip(_TILE, CFA_LAYOUTS[pattern]):
        planes[PLANE_INDEX[name]] = mosaic[dy::2, dx::2]
    if meta is None:
        meta = SensorMeta(cfa_pattern=pattern)
    return BayerImage(planes, meta)


def unpack_cfa(img: BayerImage, pattern: str | None = None) -> np.ndarray:
    """Inverse of :func:`pack_cfa`: interleave the planes back into a mosaic."""
    pattern = pattern or img.meta.cfa_pattern
    _, h, w = img.planes.shape
    mosaic = np.empty((2 * h, 2 * w))
    for (dy, dx), name in zip(_TILE, CFA_LAYOUTS[pattern]):
        mosaic[dy::2, dx::2] = img.planes[PLANE_INDEX[name]]
    return mosaic


def tile_rows(pattern: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Plane indices sampled on the top and bottom row of each 2x2 tile."""
    names = CFA_LAYOUTS[pattern]
    top = tuple(PLANE_INDEX[n] for n in names[:2])
    bottom = tuple(PLANE_INDEX[n] for n in names[2:])
    return top, bottom


def srgb_encode(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.power(np.maximum(v, 0.0031308), 1 / 2.4) - 0.055)


def to_preview_bytes(channels: np.ndarray) -> np.ndarray:
    """Clamp, sRGB-encode and quantize a 3xHxW float image to HxWx3 uint8."""
    v = srgb_encode(np.clip(channels, 0.0, 1.0))
    q = np.round(v * 255.0).astype(np.uint8)
    return np.transpose(q, (1, 2, 0))


def save_rgb(img: RgbImage, path, mode: str = "float") -> None:
    ch = img.channels
    if not np.all(np.isfinite(ch)):
        raise ValueError("RGB image contains non-finite values")
    _, h, w = ch.shape
    try:
        with open(path, "wb") as f:
            if mode == "float":
                f.write(b"PF\n%d %d\n-1.0\n" % (w, h))
                # PFM stores scanlines bottom-to-top
                pix = np.transpose(ch, (1, 2, 0))[::-1]
                f.write(np.ascontiguousarray(pix, dtype="<f4").tobytes())
            elif mode == "preview":
                f.write(b"P6\n%d %d\n255\n" % (w, h))
                f.write(to_preview_bytes(ch).tobytes())
            else:
                raise ValueError(f"unknown mode {mode!r}; expected 'float' or 'preview'")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidHeader("image header truncated")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def load_rgb(path) -> RgbImage:
    """Read a PFM (colour, either endianness) or binary PPM (8-bit) image."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"PF":
        (_, w, h, scale), pos = _read_header_tokens(raw, 4)
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        n = w * h * 3
        if len(raw) - pos < 4 * n:
            raise TruncatedPayload(f"{path}: PFM payload too short")
        pix = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(h, w, 3)[::-1]
        return RgbImage(np.transpose(pix, (2, 0, 1)).astype(np.float64))
    if raw[:2] == b"P6":
        (_, w, h, maxval), pos = _read_header_tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval > 255:
            raise InvalidHeader(f"{path}: 16-bit PPM not supported")
        n = w * h * 3
        if len(raw) - pos < n:
            raise TruncatedPayload(f"{path}: PPM payload too short")
        pix = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3)
        return RgbImage(np.transpose(pix, (2, 0, 1)).astype(np.float64) / maxval)
    raise BadMagic(f"{path}: not a PFM or binary PPM file")


def is_image_file(path) -> bool:
    return os.path.splitext(str(path))[1].lower() in (".pfm", ".ppm")
