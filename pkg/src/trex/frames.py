"""Tactile frame types and the TRFX recording container.

A TRFX file holds a fixed-rate sequence of grayscale sensor images from
one or more sensors, prefixed by a small header:

    magic  4 bytes  b"TRFX"
    version u16 LE
    height  u16 LE
    width   u16 LE
    sensors u8

followed by repeated records of

    timestamp_us u64 LE
    sensors * height * width raw grayscale bytes

Segment labels for calibration recordings live in a sidecar manifest,
one segment per line: ``label start_us end_us``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"TRFX"
STREAM_VERSION = 1

_HEADER = struct.Struct("<4sHHHB")
_TIMESTAMP = struct.Struct("<Q")


class Side(Enum):
    LEFT = "L"
    RIGHT = "R"


@dataclass(frozen=True)
class TactileFrame:
    """One grayscale sensor image with its capture time and sensor side."""

    pixels: np.ndarray
    timestamp_us: int
    side: Side


@dataclass(frozen=True)
class ReferenceFrame:
    """Baseline no-contact image subtracted from live frames."""

    pixels: np.ndarray
    captured_at: int


@dataclass(frozen=True)
class StreamHeader:
    height: int
    width: int
    sensor_count: int
    version: int = STREAM_VERSION

    @property
    def frame_bytes(self) -> int:
        return self.height * self.width

    @property
    def record_bytes(self) -> int:
        return _TIMESTAMP.size + self.sensor_count * self.frame_bytes


class StreamFormatError(ValueError):
    """Malformed TRFX input. The message names the failing byte offset."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def write_stream(
    path: str | Path,
    header: StreamHeader,
    records: Iterable[tuple[int, Sequence[np.ndarray]]],
) -> None:
    with open(path, "wb") as fh:
        _write_header(fh, header)
        for timestamp_us, images in records:
            write_record(fh, header, timestamp_us, images)


def _write_header(fh: BinaryIO, header: StreamHeader) -> None:
    fh.write(
        _HEADER.pack(
            MAGIC, header.version, header.height, header.width, header.sensor_count
        )
    )


def write_record(
    fh: BinaryIO,
    header: StreamHeader,
    timestamp_us: int,
    images: Sequence[np.ndarray],
) -> None:
    if len(images) != header.sensor_count:
        raise ValueError(
            f"expected {header.sensor_count} images per record, got {len(images)}"
        )
    fh.write(_TIMESTAMP.pack(timestamp_us))
    for image in images:
        if image.shape != (header.height, header.width):
            raise ValueError(
                f"image shape {image.shape} does not match header "
                f"({header.height}, {header.width})"
            )
        if image.dtype != np.uint8:
            raise ValueError(f"image dtype must be uint8, got {image.dtype}")
        fh.write(image.tobytes())


class StreamWriter:
    """Incremental TRFX writer so long recordings never sit in memory."""

    def __init__(self, path: str | Path, header: StreamHeader) -> None:
        self.header = header
        self._fh: BinaryIO = open(path, "wb")
        _write_header(self._fh, header)

    def append(self, timestamp_us: int, images: Sequence[np.ndarray]) -> None:
        write_record(self._fh, self.header, timestamp_us, images)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "StreamWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_header(fh: BinaryIO) -> StreamHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise StreamFormatError(
            f"truncated header, expected {_HEADER.size} bytes, got {len(raw)}",
            offset=len(raw),
        )
    magic, version, height, width, sensor_count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if height == 0 or width == 0 or sensor_count == 0:
        raise StreamFormatError(
            f"degenerate geometry {height}x{width}x{sensor_count}", offset=4
        )
    return StreamHeader(height=height, width=width, sensor_count=sensor_count, version=version)


def iter_stream(
    path: str | Path,
) -> Iterator[StreamHeader | tuple[int, list[np.ndarray]]]:
    """Yield the StreamHeader first, then one (timestamp_us, images) per record."""
    with open(path, "rb") as fh:
        header = read_header(fh)
        yield header
        offset = _HEADER.size
        while True:
            raw_ts = fh.read(_TIMESTAMP.size)
            if not raw_ts:
                return
            if len(raw_ts) < _TIMESTAMP.size:
                raise StreamFormatError("truncated record timestamp", offset=offset)
            (timestamp_us,) = _TIMESTAMP.unpack(raw_ts)
            payload = fh.read(header.sensor_count * header.frame_bytes)
            if len(payload) < header.sensor_count * header.frame_bytes:
                raise StreamFormatError(
                    f"truncated record payload, expected "
                    f"{header.sensor_count * header.frame_bytes} bytes, got {len(payload)}",
                    offset=offset + _TIMESTAMP.size,
                )
            images = [
                np.frombuffer(
                    payload, dtype=np.uint8, count=header.frame_bytes, offset=i * header.frame_bytes
                ).reshape(header.height, header.width)
                for i in range(header.sensor_count)
            ]
            yield timestamp_us, images
            offset += header.record_bytes


def read_stream(
    path: str | Path,
) -> tuple[StreamHeader, list[tuple[int, list[np.ndarray]]]]:
    it = iter_stream(path)
    header = next(it)
    assert isinstance(header, StreamHeader)
    records = [rec for rec in it]  # type: ignore[misc]
    return header, records  # type: ignore[return-value]


class SegmentLabel(Enum):
    STATIC_HOLD = "StaticHold"
    LIFTOFF = "Liftoff"
    PUSH = "Push"
    PRESS_RELEASE = "PressRelease"


#: Labels whose windows mark tangential slip events for threshold derivation.
SLIP_EVENT_LABELS = (SegmentLabel.LIFTOFF, SegmentLabel.PUSH)


@dataclass(frozen=True)
class Segment:
    label: SegmentLabel
    start_us: int
    end_us: int

    def contains(self, timestamp_us: int) -> bool:
        return self.start_us <= timestamp_us <= self.end_us


def read_manifest(path: str | Path) -> list[Segment]:
    segments: list[Segment] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 'label start_us end_us', got {line!r}"
                )
            label_text, start_text, end_text = parts
            try:
                label = SegmentLabel(label_text)
            except ValueError:
                valid = ", ".join(lab.value for lab in SegmentLabel)
                raise ValueError(
                    f"{path}:{lineno}: unknown label {label_text!r}, expected one of {valid}"
                ) from None
            start_us, end_us = int(start_text), int(end_text)
            if end_us < start_us:
                raise ValueError(f"{path}:{lineno}: segment ends before it starts")
            segments.append(Segment(label, start_us, end_us))
    return segments


def write_manifest(path: str | Path, segments: Sequence[Segment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(f"{seg.label.value} {seg.start_us} {seg.end_us}\n")
