"""Self-describing binary container for named arrays.

One serializer backs both checkpoints and corpus feature files: a magic
string, a format version, then (name, dtype tag, shape, little-endian
payload) entries, closed by a sha256 integrity trailer. Loading verifies the
checksum before trusting any field, so truncated or corrupted files are
refused with a diagnostic instead of yielding garbage tensors.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"XLSTPACK"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int64"): 2,
    np.dtype("uint8"): 3,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_DIGEST_LEN = 32


def save_arrays(path, arrays: dict) -> None:
    """Write named arrays; insertion order is preserved byte-for-byte."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"entry '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_arrays(path) -> dict:
    """Read a container back into an ordered {name: array} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 + _DIGEST_LEN:
        raise CheckpointError(f"{path}: file too short to be a container")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity checksum mismatch (truncated or corrupted)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic string, not a container file")
    offset = len(MAGIC)
    version, count = struct.unpack_from("<II", body, offset)
    offset += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported, this build reads version {FORMAT_VERSION}"
        )
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<BB", body, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", body, offset)
        offset += 4 * ndim
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: entry '{name}' has unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        raw = body[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: entry '{name}' payload is truncated")
        offset += nbytes
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        out[name] = arr
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after last entry")
    return out
