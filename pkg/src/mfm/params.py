"""Named parameter collections and their flat binary file format.

File layout: magic bytes ``MFM1``, then for each parameter in name order:
u32 name length, UTF-8 name, u32 rank, u32 per-axis sizes, raw little-endian
32-bit floats in row-major order.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Iterator

import numpy as np

from .tensor import Parameter, ShapeError, Tensor

MAGIC = b"MFM1"


class ParameterSet:
    """Ordered mapping of unique names to parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def new(self, name: str, data) -> Parameter:
        return self.add(Parameter(name, data if isinstance(data, Tensor) else Tensor(data)))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count_scalars(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(Parameter(p.name, Tensor(p.value.data)) for p in self)

    def checksum(self) -> str:
        """SHA-256 over names, dtypes, shapes and exact value bytes."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            v = self._params[name].value.data
            h.update(name.encode("utf-8"))
            h.update(str(v.dtype).encode())
            h.update(np.asarray(v.shape, dtype=np.int64).tobytes())
            h.update(v.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        chunks = [MAGIC]
        for name in sorted(self._params):
            v = self._params[name].value.data
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", v.ndim))
            chunks.append(struct.pack(f"<{v.ndim}I", *v.shape))
            chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def load(cls, path) -> "ParameterSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        if blob[:4] != MAGIC:
            raise ValueError(f"bad parameter file magic: {blob[:4]!r}")
        pset = cls()
        off = 4
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            flat = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
            pset.new(name, Tensor(flat.reshape(shape)))
        return pset


def merge_sets(*sets: ParameterSet) -> ParameterSet:
    out = ParameterSet()
    for s in sets:
        for p in s:
            out.add(p)
    return out
