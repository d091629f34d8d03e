"""Frozen base-detector checkpoints.

Layout mirrors the memory-pool container: magic ``OWCK``, version byte,
uint32 header length, sorted-key JSON header (detector config, tensor
manifest, free-form metadata), little-endian float64 payloads, CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..detector.config import DetectorConfig
from ..detector.model import Detector
from ..errors import ConfigError, FormatError
from ..fileio import atomic_write

MAGIC = b"OWCK"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 4


def dumps_base(detector: Detector, meta: dict | None = None) -> bytes:
    tensors, arrays, offset = [], [], 0
    for name in detector.params.names():
        a = np.ascontiguousarray(detector.params[name].data, dtype="<f8")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        arrays.append(a)
        offset += a.nbytes
    header = {"version": VERSION, "config": detector.config.to_dict(), "tensors": tensors,
              "meta": meta or {}, "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([MAGIC, bytes([VERSION]), struct.pack("<I", len(hbytes)), hbytes]
                    + [a.tobytes() for a in arrays])
    return body + struct.pack("<I", zlib.crc32(body))


def save_base(detector: Detector, path, meta: dict | None = None) -> None:
    atomic_write(path, dumps_base(detector, meta))


def loads_base(data: bytes) -> tuple[Detector, dict]:
    """Rebuild a frozen detector; every parameter is replaced by the stored value."""
    n = len(data)
    if n < _PREFIX + 4:
        raise FormatError(f"checkpoint too short ({n} bytes)", n)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    if data[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {data[4]}", 4)
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise FormatError("checksum mismatch", n - 4)
    (hlen,) = struct.unpack("<I", data[5:9])
    if _PREFIX + hlen > n - 4:
        raise FormatError(f"header length {hlen} runs past end of file", 5)
    try:
        header = json.loads(data[_PREFIX:_PREFIX + hlen].decode("utf-8"))
        det = Detector(DetectorConfig.from_dict(header["config"]), 0)
        base, end = _PREFIX + hlen, n - 4
        if header["payload_bytes"] != end - base:
            raise FormatError("payload size disagrees with header", base)
        names = [t["name"] for t in header["tensors"]]
        if sorted(names) != sorted(det.params.names()):
            raise FormatError("tensor names do not match the detector layout", _PREFIX)
        for t in header["tensors"]:
            p = det.params[t["name"]]
            shape = tuple(t["shape"])
            start = base + t["offset"]
            if shape != p.data.shape or t["nbytes"] != p.data.size * 8 or start + t["nbytes"] > end:
                raise FormatError(f"tensor {t['name']} has a bad shape or extent", start)
            p.data[...] = np.frombuffer(data, dtype="<f8", count=p.data.size, offset=start).reshape(shape)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, UnicodeDecodeError, ConfigError) as e:
        raise FormatError(f"inconsistent checkpoint header: {e}", _PREFIX) from None
    det.freeze()
    return det, header["meta"]


def load_base(path) -> tuple[Detector, dict]:
    with open(path, "rb") as f:
        return loads_base(f.read())
