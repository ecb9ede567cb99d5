"""Binary checkpoint format.

    b"MDKT" | version u16 | records...
    record: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | values f32 (little endian)

Records are followed by a trailer: b"MDKE" | sha256 of every preceding byte.
Names are prefixed by kind: ``param/`` for weights,
``opt/`` for optimizer buffers, ``meta/`` for integers and strings (stored as
one f32 per byte, which is exact).
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MDKT"
TRAILER = b"MDKE"
VERSION = 1
TRAILER_LEN = len(TRAILER) + 32


class CheckpointFormatError(ValueError):
    pass


class CheckpointCorruptError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    config_hash: str = ""
    epoch: int = 0
    params: dict = field(default_factory=dict)  # name -> float32 array
    opt_state: dict = field(default_factory=dict)  # name -> float32 array
    rng_state: dict = field(default_factory=dict)  # name -> int
    version: int = VERSION

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())
        return h.hexdigest()


def _bytes_record(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def _int_record(v: int) -> np.ndarray:
    return _bytes_record(int(v).to_bytes(8, "little", signed=True))


def _record_to_int(a: np.ndarray) -> int:
    return int.from_bytes(a.astype(np.uint8).tobytes(), "little", signed=True)


def encode(ckpt: Checkpoint) -> bytes:
    recs: list[tuple[str, np.ndarray]] = [
        ("meta/config_hash", _bytes_record(ckpt.config_hash.encode())),
        ("meta/epoch", _int_record(ckpt.epoch)),
    ]
    recs += [(f"meta/rng/{k}", _int_record(v)) for k, v in ckpt.rng_state.items()]
    recs += [(f"param/{k}", np.asarray(v)) for k, v in ckpt.params.items()]
    recs += [(f"opt/{k}", np.asarray(v)) for k, v in ckpt.opt_state.items()]
    out = [MAGIC, struct.pack("<H", ckpt.version)]
    for name, arr in recs:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + TRAILER + hashlib.sha256(body).digest()


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic: not an MDKT checkpoint")
    if len(buf) < 6:
        raise CheckpointCorruptError("truncated header at offset 4")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(buf) < 6 + TRAILER_LEN:
        raise CheckpointCorruptError(f"truncated: no trailer after offset 6 ({len(buf)} bytes)")
    end = len(buf) - TRAILER_LEN
    if buf[end:end + len(TRAILER)] != TRAILER:
        raise CheckpointCorruptError(f"missing trailer at offset {end} (file truncated?)")
    if hashlib.sha256(buf[:end]).digest() != buf[end + len(TRAILER):]:
        raise CheckpointCorruptError(f"checksum mismatch over bytes 0..{end}")
    buf = buf[:end]
    ck = Checkpoint(version=version)
    off = 6

    def need(n: int, what: str):
        if off + n > len(buf):
            raise CheckpointCorruptError(f"truncated {what} at offset {off}")

    while off < len(buf):
        need(2, "name length")
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(ln + 1, "name")
        try:
            name = buf[off:off + ln].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointCorruptError(f"bad record name at offset {off}") from e
        off += ln
        rank = buf[off]
        off += 1
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count, f"values of {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
        kind, _, key = name.partition("/")
        if kind == "param":
            ck.params[key] = arr
        elif kind == "opt":
            ck.opt_state[key] = arr
        elif name == "meta/config_hash":
            ck.config_hash = arr.astype(np.uint8).tobytes().decode()
        elif name == "meta/epoch":
            ck.epoch = _record_to_int(arr)
        elif name.startswith("meta/rng/"):
            ck.rng_state[name[len("meta/rng/"):]] = _record_to_int(arr)
        else:
            raise CheckpointFormatError(f"unknown record {name!r} at offset {off}")
    return ck


def save(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = encode(ckpt)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
