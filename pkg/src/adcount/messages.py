"""Binary frames exchanged between harness actors.

Every frame is a fixed little-endian header followed by the body::

    magic "ADCM" | schema u8 | type u8 | reserved u16 | round tag u64 | body length u32

None of the message types has a free-text field, so an ad key or a plain
sketch cannot cross the client boundary by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction

import numpy as np

from .blinding import BlindedReport
from .client import ThresholdMode
from .errors import MalformedHeaderError, TruncatedPayloadError

SCHEMA_VERSION = 1
_MAGIC = b"ADCM"
_FRAME = struct.Struct("<4sBBHQI")
FRAME_HEADER_SIZE = _FRAME.size

_MODES = {ThresholdMode.MEAN: 0, ThresholdMode.MEAN_PLUS_MEDIAN: 1}


class MessageType(IntEnum):
    REPORT = 1
    MISSING_LIST = 2
    ADJUSTED_REPORT = 3
    THRESHOLD_BROADCAST = 4
    USERS_COUNT_REQUEST = 5
    USERS_COUNT_RESPONSE = 6
    OPRF_REQUEST = 7
    OPRF_RESPONSE = 8


@dataclass(frozen=True)
class Frame:
    type: MessageType
    round_tag: int
    body: bytes

    def to_bytes(self) -> bytes:
        return _FRAME.pack(_MAGIC, SCHEMA_VERSION, int(self.type), 0, self.round_tag, len(self.body)) + self.body

    @property
    def byte_length(self) -> int:
        return FRAME_HEADER_SIZE + len(self.body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < FRAME_HEADER_SIZE:
            raise TruncatedPayloadError("frame shorter than its header")
        magic, version, kind, _, round_tag, length = _FRAME.unpack_from(data)
        if magic != _MAGIC or version != SCHEMA_VERSION:
            raise MalformedHeaderError("not an adcount frame of a supported schema")
        try:
            kind = MessageType(kind)
        except ValueError:
            raise MalformedHeaderError(f"unknown message type {kind}") from None
        if len(data) != FRAME_HEADER_SIZE + length:
            raise TruncatedPayloadError("frame length does not match its header")
        return cls(kind, round_tag, bytes(data[FRAME_HEADER_SIZE:]))


# -- body codecs ---------------------------------------------------------------


def report_frame(report: BlindedReport) -> Frame:
    kind = MessageType.ADJUSTED_REPORT if report.retry else MessageType.REPORT
    return Frame(kind, report.round_tag, report.to_bytes())


def decode_report(frame: Frame) -> BlindedReport:
    report = BlindedReport.from_bytes(frame.body)
    if report.round_tag != frame.round_tag:
        raise MalformedHeaderError("report round tag differs from frame round tag")
    return report


def _u32_list(values, fmt: str) -> bytes:
    values = list(values)
    return struct.pack("<I", len(values)) + np.asarray(values, dtype=fmt).tobytes()


def _read_list(body: bytes, offset: int, fmt: str) -> tuple[list[int], int]:
    if len(body) < offset + 4:
        raise TruncatedPayloadError("list length missing")
    (count,) = struct.unpack_from("<I", body, offset)
    size = np.dtype(fmt).itemsize
    end = offset + 4 + count * size
    if len(body) < end:
        raise TruncatedPayloadError("list body truncated")
    return np.frombuffer(body, dtype=fmt, count=count, offset=offset + 4).tolist(), end


def missing_list_frame(round_tag: int, retry: int, missing) -> Frame:
    return Frame(MessageType.MISSING_LIST, round_tag, struct.pack("<I", retry) + _u32_list(missing, "<u4"))


def decode_missing_list(frame: Frame) -> tuple[int, list[int]]:
    (retry,) = struct.unpack_from("<I", frame.body)
    missing, end = _read_list(frame.body, 4, "<u4")
    if end != len(frame.body):
        raise MalformedHeaderError("trailing bytes in missing list")
    return retry, missing


def threshold_frame(round_tag: int, users_th: Fraction, mode: ThresholdMode) -> Frame:
    body = struct.pack("<BQQ", _MODES[ThresholdMode(mode)], users_th.numerator, users_th.denominator)
    return Frame(MessageType.THRESHOLD_BROADCAST, round_tag, body)


def decode_threshold(frame: Frame) -> tuple[Fraction, ThresholdMode]:
    if len(frame.body) != 17:
        raise TruncatedPayloadError("threshold body must be 17 bytes")
    mode, num, den = struct.unpack("<BQQ", frame.body)
    inverse = {v: k for k, v in _MODES.items()}
    if mode not in inverse or den == 0:
        raise MalformedHeaderError("bad threshold body")
    return Fraction(num, den), inverse[mode]


def users_count_request_frame(round_tag: int, ad_ids) -> Frame:
    return Frame(MessageType.USERS_COUNT_REQUEST, round_tag, _u32_list(ad_ids, "<u8"))


def users_count_response_frame(round_tag: int, counts) -> Frame:
    return Frame(MessageType.USERS_COUNT_RESPONSE, round_tag, _u32_list(counts, "<u4"))


def decode_id_list(frame: Frame) -> list[int]:
    fmt = "<u8" if frame.type is MessageType.USERS_COUNT_REQUEST else "<u4"
    values, end = _read_list(frame.body, 0, fmt)
    if end != len(frame.body):
        raise MalformedHeaderError("trailing bytes in id list")
    return values


def oprf_frame(kind: MessageType, round_tag: int, element: bytes) -> Frame:
    if kind not in (MessageType.OPRF_REQUEST, MessageType.OPRF_RESPONSE):
        raise ValueError("not an oprf message type")
    return Frame(kind, round_tag, element)
