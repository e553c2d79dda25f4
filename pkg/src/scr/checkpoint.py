"""Binary checkpoint files.

Layout: magic ``SCR1``, u32 format version, u32-length-prefixed UTF-8 JSON
blob (config echo, step counters, RNG state), then one record per tensor:
u16 name length, name, u32 ndim, u32 dims, f32 little-endian payload. All
integers are little-endian.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"SCR1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: "OrderedDict[str, np.ndarray]"
    state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def params(self):
        return OrderedDict((k[len("param/"):], v) for k, v in self.tensors.items()
                           if k.startswith("param/"))

    def moments(self):
        return OrderedDict((k[len("adam/"):], v) for k, v in self.tensors.items()
                           if k.startswith("adam/"))


def to_bytes(ckpt):
    blob = json.dumps({"config": ckpt.config, "state": ckpt.state}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(blob)), blob]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(data):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(blob_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    tensors = OrderedDict()
    while pos < len(view):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(meta.get("config", {}), tensors, meta.get("state", {}), version)


def save_checkpoint(ckpt, path):
    data = to_bytes(ckpt)
    with open(path, "wb") as fout:
        fout.write(data)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fin:
        return from_bytes(fin.read())
