"""Versioned binary container for named tensors (``OECK``).

Layout, all little-endian::

    b"OECK" | u32 version | u32 len, config text | u32 len, meta JSON
    | u32 tensor count | per tensor: u16 name len, name, u8 dtype ('f'|'i'),
      u8 ndim, ndim x u64 shape, raw data | u32 crc32 of everything before

Writes go to a temp file that is renamed into place.
"""
import json
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"OECK"
VERSION = 1
_DTYPES = {"f": "<f8", "i": "<i8"}


class CheckpointError(ValueError):
    pass


def dumps(config_text, meta, tensors):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode()
    mjs = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(mjs)), mjs]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "i" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "f"
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, code.encode(), struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data):
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not an OECK checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint corrupt or truncated (checksum mismatch)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", body, pos)
        config_text = body[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[pos + 4:pos + 4 + n])
        pos += 4 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            code = chr(body[pos])
            ndim = body[pos + 1]
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count_el = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype=_DTYPES[code], count=count_el, offset=pos)
            pos += 8 * count_el
            tensors[name] = arr.astype(np.float64 if code == "f" else np.int64).reshape(shape)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint corrupt: {exc}") from None
    if pos != len(body):
        raise CheckpointError("checkpoint corrupt: trailing bytes")
    return config_text, meta, tensors


def save(path, config_text, meta, tensors):
    data = dumps(config_text, meta, tensors)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".oeck")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
