"""Model checkpoints: configuration, parameters and optimizer state in one file.

Layout (all integers little-endian)::

    magic "MSSEGCKP" | u32 version | u64 json length | json | blobs | sha256

The JSON block holds the network configuration, the storage dtype and an
ordered list of ``(name, shape)`` entries; the blobs follow in that order as
raw little-endian arrays. The trailing digest covers everything before it.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .network import Model, NetworkConfig

MAGIC = b"MSSEGCKP"
VERSION = 1
_DIGEST = 32


def _entries(model):
    out = list(model.param_arrays())
    for key in sorted(model.optimizer_state):
        out.append((f"optimizer.{key}", model.optimizer_state[key]))
    return out


def to_bytes(model, extra=None):
    dtype = np.dtype(model.dtype).newbyteorder("<")
    entries = _entries(model)
    meta = {
        "config": model.config.to_dict(),
        "dtype": dtype.str,
        "arrays": [[name, list(arr.shape)] for name, arr in entries],
        "extra": extra or {},
    }
    head = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    parts += [np.ascontiguousarray(arr, dtype=dtype).tobytes() for _, arr in entries]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(model, path, extra=None):
    """Write ``model`` to ``path``; ``extra`` is a JSON-serializable dict stored alongside."""
    Path(path).write_bytes(to_bytes(model, extra))


def from_bytes(blob, num_classes=None):
    """Rebuild a :class:`Model` from checkpoint bytes. Returns ``(model, extra)``."""
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST:
        raise FormatError(f"checkpoint truncated: {len(blob)} bytes", offset=len(blob))
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch (file corrupt or truncated)",
                          offset=len(body))
    version, head_len = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    if fixed + head_len > len(body):
        raise FormatError("checkpoint header length exceeds file", offset=len(MAGIC) + 4)
    try:
        meta = json.loads(body[fixed:fixed + head_len])
        config = NetworkConfig.from_dict(meta["config"])
        dtype = np.dtype(meta["dtype"])
        arrays = [(str(n), tuple(int(s) for s in shape)) for n, shape in meta["arrays"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}", offset=fixed) from None
    if num_classes is not None and config.num_classes != num_classes:
        raise ConfigurationError(
            f"checkpoint predicts {config.num_classes} classes, expected {num_classes}")
    if dtype.kind != "f":
        raise FormatError(f"unsupported parameter dtype {dtype}", offset=fixed)
    model = Model(config, dtype.newbyteorder("="))
    params = dict(model.param_arrays())
    pos = fixed + head_len
    seen = set()
    for name, shape in arrays:
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + n > len(body):
            raise FormatError(f"array {name} runs past the end of the checkpoint", offset=pos)
        arr = np.frombuffer(body, dtype=dtype, count=n // dtype.itemsize, offset=pos)
        arr = arr.reshape(shape).astype(model.dtype)
        pos += n
        if name.startswith("optimizer."):
            model.optimizer_state[name[len("optimizer."):]] = arr
            continue
        if name not in params or params[name].shape != shape:
            raise FormatError(f"array {name} with shape {shape} does not fit the network",
                              offset=pos - n)
        params[name][...] = arr
        seen.add(name)
    if pos != len(body):
        raise FormatError("trailing bytes after the last array", offset=pos)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"checkpoint lacks {sorted(missing)[0]}", offset=pos)
    return model, meta.get("extra", {})


def load_model(path, num_classes=None):
    """Read a checkpoint written by :func:`save_model`. Returns ``(model, extra)``."""
    return from_bytes(Path(path).read_bytes(), num_classes)
