import struct
from collections.abc import MutableMapping

import numpy as np

CKPT_MAGIC = b"CKPT"


class CheckpointError(ValueError):
    pass


class PrefixView(MutableMapping):
    """Dict view that prepends ``prefix`` to every key."""

    def __init__(self, base, prefix):
        self._base = base
        self._prefix = prefix

    def __getitem__(self, key):
        return self._base[self._prefix + key]

    def __setitem__(self, key, value):
        self._base[self._prefix + key] = value

    def __delitem__(self, key):
        del self._base[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._base if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


class ParamStore:
    """Named parameters with matching gradient buffers and AdamW moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype, order="C")  # always a private copy
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def view(self, prefix):
        return PrefixView(self.params, prefix), PrefixView(self.grads, prefix)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def reset_moments(self):
        for name in self.params:
            self.m[name][...] = 0
            self.v[name][...] = 0
        self.step = 0

    @property
    def size(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self, dtype=None):
        """Deep copy of parameters only; moments and step start fresh."""
        out = ParamStore(self.dtype if dtype is None else dtype)
        for name, value in self.params.items():
            out.add(name, value)
        return out

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()]) if self.params else np.zeros(0)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self):
        chunks = [CKPT_MAGIC, struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        return cls.from_bytes(data, source=str(path))

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{source}: bad magic {data[:4]!r} at offset 0")
        pos = 4
        try:
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            store = cls(np.float32)
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", data, pos)
                pos += 1
                shape = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                size = int(np.prod(shape, dtype=np.int64))
                if pos + 4 * size > len(data):
                    raise CheckpointError(f"{source}: truncated payload for {name!r} at offset {pos}")
                arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
                pos += 4 * size
                store.add(name, arr)
        except struct.error as exc:
            raise CheckpointError(f"{source}: truncated header at offset {pos}") from exc
        if pos != len(data):
            raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes at offset {pos}")
        return store
