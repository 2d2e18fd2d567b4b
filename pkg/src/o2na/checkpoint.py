"""Binary checkpoint container.

Layout: magic "O2NACKPT", version u32, then repeated records of
(name length u32, UTF-8 name, rank u32, one u32 per dim, row-major float64
little-endian payload). Round trips are bit-exact.

Non-tensor metadata (config text, vocabularies) is stored inside the same
record schema as 1-D tensors whose float values are byte codes; see
bytes_to_record / record_to_bytes.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"O2NACKPT"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write named float arrays. ``tensors`` maps name -> ndarray/Tensor."""
    from .tensor import Tensor

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, value in tensors.items():
            if isinstance(value, Tensor):
                value = value.data
            data = np.asarray(value, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read back a name -> float64 ndarray mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    off = len(MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated {what} at byte {off}, need {n} bytes")
        piece = blob[off: off + n]
        off += n
        return piece

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "record name length"))
        name = take(name_len, "record name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "record rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "record dims")) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count, f"record '{name}' payload"), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def bytes_to_record(text):
    """Encode UTF-8 text as a 1-D float64 array of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def record_to_bytes(arr):
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")
