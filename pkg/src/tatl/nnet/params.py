"""Named network parameters split into encoder and decoder groups, and the
binary weights file format."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from ..errors import DimensionError, IoError

TAGS = ("encoder", "decoder")
MAGIC = b"TATLW\0"
FORMAT_VERSION = 1


@dataclass
class Param:
    name: str
    tag: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def new(cls, name, tag, value):
        if tag not in TAGS:
            raise ValueError(f"tag must be one of {TAGS}, got {tag!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        return cls(name, tag, value, np.zeros_like(value))


class ParamSet:
    """Ordered collection of :class:`Param` keyed by unique name."""

    def __init__(self, params: Iterable[Param] = ()):
        self._params: dict[str, Param] = {}
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, tag: str) -> list[Param]:
        return [p for p in self if p.tag == tag]

    def copy(self) -> "ParamSet":
        """Exact copy of the values with fresh zeroed gradients."""
        return ParamSet(Param.new(p.name, p.tag, p.value.copy()) for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad.fill(0.0)

    @property
    def size(self) -> int:
        return sum(p.value.size for p in self)

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self])

    def set_flat_values(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, expected {self.size}")
        pos = 0
        for p in self:
            p.value[...] = vec[pos:pos + p.value.size].reshape(p.value.shape)
            pos += p.value.size

    def checksum(self, tag: str | None = None) -> str:
        """SHA-256 over names, shapes and raw values (optionally one group)."""
        h = hashlib.sha256()
        for p in self:
            if tag is None or p.tag == tag:
                h.update(p.name.encode())
                h.update(repr(p.value.shape).encode())
                h.update(p.value.astype("<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet", tag: str | None = None) -> bool:
        """Bitwise equality of names, tags and values."""
        mine = [p for p in self if tag is None or p.tag == tag]
        theirs = [p for p in other if tag is None or p.tag == tag]
        if [(p.name, p.tag) for p in mine] != [(p.name, p.tag) for p in theirs]:
            return False
        return all(a.value.shape == b.value.shape and a.value.tobytes() == b.value.tobytes()
                   for a, b in zip(mine, theirs))


def encode_weights(params: ParamSet) -> bytes:
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for p in params:
        name = p.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<BB", TAGS.index(p.tag), p.value.ndim))
        out.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        out.append(p.value.astype("<f8").tobytes())
    return b"".join(out)


def decode_weights(buf: bytes, path=None) -> ParamSet:
    def fail(msg):
        raise IoError(f"{path or 'weights buffer'}: {msg}", path)

    if buf[:len(MAGIC)] != MAGIC:
        fail("bad magic, not a TATLW weights file")
    pos = len(MAGIC)
    if len(buf) < pos + 2:
        fail("truncated header")
    (version,) = struct.unpack_from("<H", buf, pos)
    if version != FORMAT_VERSION:
        fail(f"unsupported format version {version}")
    pos += 2
    params = []
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                fail(f"payload of {name!r} truncated")
            value = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            params.append(Param.new(name, TAGS[tag], value.astype(np.float64)))
    except (struct.error, UnicodeDecodeError, IndexError) as exc:
        fail(f"corrupt record ({exc})")
    return ParamSet(params)


def save_weights(path, params: ParamSet) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_weights(params))
    os.replace(tmp, path)


def load_weights(path) -> ParamSet:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise IoError(f"cannot read weights file {path}: {exc}", path) from exc
    return decode_weights(buf, path)
