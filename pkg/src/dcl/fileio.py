"""Binary codecs and report writers.

Formats (all little-endian):

  checkpoint  "DCGK" | version u32 | blobs: name_len u16, name bytes,
              rank u8, extents u32 each, f32 data
  features    "DCFM" | version u32 | N u32 | d u32 | dropout_rate f32 |
              seed u64 | N*d f32 row-major
  labels      "DCLB" | N u32 | N u32 labels
"""

from __future__ import annotations

import json
import struct

import numpy as np

VERSION = 1


class CodecError(ValueError):
    pass


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CodecError(f"truncated file while reading {what}: expected {count} bytes, got {len(data)}")
    return data


def _check_magic(fh, magic):
    got = fh.read(4)
    if got != magic:
        raise CodecError(f"bad magic: expected {magic!r}, got {got!r}")


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, blobs):
    """``blobs``: ordered {name: float array}; values stored as f32."""
    with open(path, "wb") as fh:
        fh.write(b"DCGK")
        fh.write(struct.pack("<I", VERSION))
        for name, arr in blobs.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    blobs = {}
    with open(path, "rb") as fh:
        _check_magic(fh, b"DCGK")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CodecError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CodecError("truncated file while reading blob name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "blob name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "blob rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "blob extents"))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, f"blob {name!r} data")
            blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return blobs


# ---------------------------------------------------------------------------
# feature matrices


def write_features(path, values, dropout_rate=0.0, seed=0):
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise CodecError(f"feature matrix must be 2-d, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(b"DCFM")
        fh.write(struct.pack("<IIIfQ", VERSION, values.shape[0], values.shape[1],
                             float(dropout_rate), int(seed)))
        fh.write(values.tobytes())


def read_features(path):
    """Returns (values, dropout_rate, seed)."""
    with open(path, "rb") as fh:
        _check_magic(fh, b"DCFM")
        version, n, d, rate, seed = struct.unpack("<IIIfQ", _read_exact(fh, 24, "feature header"))
        if version != VERSION:
            raise CodecError(f"unsupported feature-file version {version}")
        raw = _read_exact(fh, 4 * n * d, "feature rows")
        values = np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()
    return values, rate, seed


# ---------------------------------------------------------------------------
# label files


def write_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if labels.ndim != 1:
        raise CodecError(f"labels must be 1-d, got shape {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(b"DCLB")
        fh.write(struct.pack("<I", labels.shape[0]))
        fh.write(labels.tobytes())


def read_labels(path):
    with open(path, "rb") as fh:
        _check_magic(fh, b"DCLB")
        (n,) = struct.unpack("<I", _read_exact(fh, 4, "label count"))
        raw = _read_exact(fh, 4 * n, "labels")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)


# ---------------------------------------------------------------------------
# reports


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def append_jsonl(fh, record):
    fh.write(json.dumps(record, sort_keys=False))
    fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
