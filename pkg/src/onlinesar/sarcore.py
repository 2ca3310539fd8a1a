"""Shared SAR domain types and I/O.

Rasters are complex-valued 2-D arrays indexed ``(pulse k, range bin r)``.
They are stored as ``complex64`` because that is the on-disk sample format
(interleaved little-endian float32 pairs), which keeps file round trips
bit-exact. Processing code promotes to ``complex128`` internally.
"""
from __future__ import annotations

import enum
import io
import math
import struct
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

SARB_MAGIC = b"SARB\x00\x01\x00\x00"
FRAME_MAGIC = b"\x5a\x5a"
MAX_SAMPLES = 1 << 34  # 128 GiB of complex64; anything larger is a corrupt header
DB_EPS = 1e-12


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class SarFormatError(ValueError):
    """Malformed raster file, pulse frame or PGM."""


class MagicError(SarFormatError):
    pass


class TruncatedPayloadError(SarFormatError):
    pass


class DimensionOverflowError(SarFormatError):
    pass


class CrcMismatchError(SarFormatError):
    pass


class FrameLengthError(SarFormatError):
    pass


class NonFiniteSampleError(ValueError):
    def __init__(self, k: int, r: int):
        super().__init__(f"non-finite sample at pulse k={k}, range bin r={r}")
        self.k = k
        self.r = r


class PulseOrderError(ValueError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"pulse index out of order: expected k={expected}, got k={got}")
        self.expected = expected
        self.got = got


class StageOrderError(ValueError):
    pass


# --------------------------------------------------------------------------
# key:value text blocks (used by every config / header in the package)
# --------------------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key: value`` lines. Blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(items: dict[str, object]) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

class Stage(enum.IntEnum):
    """Processing stage of a raster. Order is the pipeline order."""

    RAW = 0
    RC = 1
    RCMC = 2
    AZ = 3


def check_stage_transition(src: Stage, dst: Stage) -> Stage:
    if dst < src:
        raise StageOrderError(f"stage cannot go backwards: {src.name} -> {dst.name}")
    return dst


@dataclass(frozen=True)
class RadarParams:
    prf: float                 # Hz
    wavelength: float          # m
    antenna_length: float      # m, azimuth length of the real antenna
    platform_velocity: float   # m/s
    r0: float                  # m, slant range of range bin 0
    range_sample_rate: float   # Hz
    chirp_bandwidth: float     # Hz
    chirp_duration: float      # s
    az_spacing: float          # m, along-track sample spacing

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"RadarParams.{f.name} must be finite and > 0, got {v!r}")

    @classmethod
    def desk(cls) -> "RadarParams":
        """Desk-scale stripmap geometry.

        Chosen so that the azimuth aperture spans 64 pulses at near range
        (buffer N_b = 128), the Doppler bandwidth is half the PRF and range
        migration over the aperture stays below 2 % of a range bin.
        """
        return cls(
            prf=200.0,
            wavelength=0.008,
            antenna_length=2.0,
            platform_velocity=100.0,
            r0=8000.0,
            range_sample_rate=100e6,
            chirp_bandwidth=80e6,
            chirp_duration=1e-6,
            az_spacing=0.5,
        )

    @property
    def range_bin_spacing(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.range_sample_rate)

    @property
    def pulse_spacing(self) -> float:
        return self.platform_velocity / self.prf

    @property
    def chirp_rate(self) -> float:
        return self.chirp_bandwidth / self.chirp_duration

    @property
    def chirp_samples(self) -> int:
        return int(round(self.chirp_duration * self.range_sample_rate))

    def slant_range(self, r) -> np.ndarray:
        """Slant range of range bin(s) ``r``."""
        return self.r0 + np.asarray(r, dtype=np.float64) * self.range_bin_spacing

    def check_grid(self, n_range_bins: int) -> None:
        if self.chirp_duration * self.range_sample_rate > n_range_bins:
            raise ValueError(
                f"chirp spans {self.chirp_duration * self.range_sample_rate:g} samples, "
                f"more than the {n_range_bins} range bins"
            )

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str | float]) -> "RadarParams":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


@dataclass(frozen=True)
class NormalizationSpec:
    scale: float = 2000.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be > 0")

    @property
    def bounds(self) -> tuple[float, float]:
        return (-self.scale, self.scale)


@dataclass(frozen=True, eq=False)
class Raster:
    data: np.ndarray
    stage: Stage = Stage.RAW
    params: RadarParams | None = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.complex64)
        if data.ndim != 2:
            raise ValueError(f"raster data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("raster needs at least one row and one column")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def with_data(self, data, stage: Stage | None = None) -> "Raster":
        new_stage = self.stage if stage is None else check_stage_transition(self.stage, stage)
        return replace(self, data=data, stage=new_stage)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.stage == other.stage
            and self.params == other.params
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _first_nonfinite(a: np.ndarray) -> tuple[int, int] | None:
    bad = ~np.isfinite(a)
    if a.ndim == 1:
        bad = bad[None, :]
    if not bad.any():
        return None
    k, r = np.argwhere(bad)[0]
    return int(k), int(r)


def check_finite(a: np.ndarray) -> None:
    loc = _first_nonfinite(np.asarray(a))
    if loc is not None:
        raise NonFiniteSampleError(*loc)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def normalize(r: Raster, s: NormalizationSpec = NormalizationSpec()) -> Raster:
    """Origin-preserving scaling: both components divided by ``s.scale``."""
    check_finite(r.data)
    return replace(r, data=r.data / np.float32(s.scale))


def denormalize(r: Raster, s: NormalizationSpec = NormalizationSpec()) -> Raster:
    check_finite(r.data)
    return replace(r, data=r.data * np.float32(s.scale))


# --------------------------------------------------------------------------
# SARB raster files
# --------------------------------------------------------------------------

def write_raster(r: Raster, path) -> None:
    header = {"rows": r.rows, "cols": r.cols, "stage": r.stage.name}
    if r.params is not None:
        header.update(r.params.to_dict())
    head = format_kv(header).encode("utf-8")
    payload = r.data.astype("<c8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(SARB_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def read_raster(path) -> Raster:
    blob = Path(path).read_bytes()
    return raster_from_bytes(blob)


def raster_from_bytes(blob: bytes) -> Raster:
    if blob[:8] != SARB_MAGIC:
        raise MagicError(f"bad SARB magic {blob[:8]!r}")
    if len(blob) < 12:
        raise TruncatedPayloadError("missing header length")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + hlen > len(blob):
        raise TruncatedPayloadError("header runs past end of file")
    try:
        header = parse_kv(blob[12:12 + hlen].decode("utf-8"))
        rows, cols = int(header["rows"]), int(header["cols"])
        stage = Stage[header["stage"]]
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise SarFormatError(f"bad SARB header: {exc}") from exc
    if rows < 1 or cols < 1 or rows * cols > MAX_SAMPLES:
        raise DimensionOverflowError(f"unsupported raster dims {rows}x{cols}")
    need = rows * cols * 8
    payload = blob[12 + hlen:]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload holds {len(payload) // 8} samples, header promises {rows * cols}"
        )
    if len(payload) > need:
        raise SarFormatError(f"{len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<c8").reshape(rows, cols)
    params = None
    if "prf" in header:
        params = RadarParams.from_dict(header)
    return Raster(data.astype(np.complex64), stage, params)


# --------------------------------------------------------------------------
# image export
# --------------------------------------------------------------------------

def to_image(r: Raster | np.ndarray, mode: str = "magnitude") -> np.ndarray:
    """Min-max stretched 16-bit grayscale image of ``|z|`` or ``10 log10(|z|^2)``."""
    z = r.data if isinstance(r, Raster) else np.asarray(r)
    mag2 = np.abs(z.astype(np.complex128)) ** 2
    if mode == "magnitude":
        v = np.sqrt(mag2)
    elif mode == "db":
        v = 10.0 * np.log10(mag2 + DB_EPS)
    else:
        raise ValueError(f"unknown image mode {mode!r}")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, 32768, dtype=np.uint16)
    return np.rint((v - lo) / (hi - lo) * 65535.0).astype(np.uint16)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise MagicError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise SarFormatError("only 16-bit PGM supported")
    data = parts[4]
    if len(data) < w * h * 2:
        raise TruncatedPayloadError("PGM pixel data truncated")
    return np.frombuffer(data[: w * h * 2], dtype=">u2").reshape(h, w).astype(np.uint16)


# --------------------------------------------------------------------------
# pulse frames
# --------------------------------------------------------------------------

_FRAME_HEAD = struct.Struct("<2sII")


def encode_pulse_frame(row, k: int) -> bytes:
    """Frame one range line: magic, k, N_r, samples, CRC-32.

    The CRC covers everything between the magic and the CRC itself, so a
    corrupted pulse index or length is caught as well as corrupted samples.
    """
    row = np.asarray(row)
    if row.ndim != 1:
        raise ValueError("a pulse frame carries exactly one range line")
    if not 0 <= k < 1 << 32:
        raise ValueError(f"pulse index {k} does not fit in u32")
    body = struct.pack("<II", k, row.size) + row.astype("<c8").tobytes()
    return FRAME_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def frame_size(n_r: int) -> int:
    return _FRAME_HEAD.size + 8 * n_r + 4


def decode_pulse_frame(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < _FRAME_HEAD.size + 4:
        raise FrameLengthError("frame shorter than header")
    magic, k, n_r = _FRAME_HEAD.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise MagicError(f"bad frame magic {magic!r}")
    if len(buf) != frame_size(n_r):
        raise FrameLengthError(f"frame for N_r={n_r} must be {frame_size(n_r)} bytes, got {len(buf)}")
    body = buf[2:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatchError(f"CRC mismatch in frame k={k}")
    row = np.frombuffer(buf, dtype="<c8", count=n_r, offset=_FRAME_HEAD.size).astype(np.complex64)
    return row, k


def read_frame(stream: BinaryIO) -> tuple[np.ndarray, int] | None:
    """Read one frame from a byte stream; ``None`` on clean end of stream."""
    head = _read_exact(stream, _FRAME_HEAD.size)
    if head is None:
        return None
    magic, _, n_r = _FRAME_HEAD.unpack(head)
    if magic != FRAME_MAGIC:
        raise MagicError(f"bad frame magic {magic!r}")
    if n_r > MAX_SAMPLES:
        raise DimensionOverflowError(f"frame claims {n_r} range bins")
    rest = _read_exact(stream, 8 * n_r + 4)
    if rest is None:
        raise FrameLengthError("stream ended inside a frame")
    return decode_pulse_frame(head + rest)


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        b = stream.read(n - got)
        if not b:
            if got == 0:
                return None
            raise FrameLengthError(f"stream ended after {got} of {n} bytes")
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


def iter_frames(stream: BinaryIO, start: int = 0) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(k, row)`` from a frame stream, enforcing ``k = previous + 1``."""
    expected = start
    while True:
        item = read_frame(stream)
        if item is None:
            return
        row, k = item
        if k != expected:
            raise PulseOrderError(expected, k)
        expected += 1
        yield k, row


def frames_to_bytes(raster: Raster) -> bytes:
    buf = io.BytesIO()
    for k in range(raster.rows):
        buf.write(encode_pulse_frame(raster.data[k], k))
    return buf.getvalue()
