"""Named tensor tables and the ESRW binary weight format.

ESRW layout (little endian, strictly sequential, no padding)::

    b"ESRW"                 magic
    u32                     version (1)
    u32                     tensor count
    per tensor:
        u16                 name length in bytes
        bytes               UTF-8 name
        u8                  dtype (0 = float32)
        u8                  ndim
        u32 * ndim          dims
        f32 * prod(dims)    payload, row-major
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .graph import ArchSpec, conv_params, param_shapes

__all__ = ["WeightStore", "BindingError", "WeightFormatError", "init_weights", "MAGIC", "VERSION"]

MAGIC = b"ESRW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class BindingError(ValueError):
    """A weight store does not match the architecture it is bound to."""

    def __init__(self, msg: str, tensor: str | None = None):
        super().__init__(msg)
        self.tensor = tensor


class WeightFormatError(ValueError):
    pass


class WeightStore(Mapping):
    """Read-only mapping from ``"<node>.<role>"`` to float32 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t = {}
        for k, v in (tensors or {}).items():
            a = np.array(v, dtype=np.float32, copy=True)
            a.setflags(write=False)
            self._t[k] = a

    def __getitem__(self, key):
        return self._t[key]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def __repr__(self):
        return f"WeightStore({len(self)} tensors)"

    def updated(self, changes: Mapping[str, np.ndarray | None]) -> "WeightStore":
        """New store with ``changes`` applied; a value of ``None`` deletes the key."""
        d = dict(self._t)
        for k, v in changes.items():
            if v is None:
                d.pop(k, None)
            else:
                d[k] = v
        return WeightStore(d)

    def bind(self, arch: ArchSpec, strict: bool = True) -> None:
        """Check every learnable tensor of ``arch`` is present with the exact shape.

        With ``strict`` set, entries no node claims are rejected too.
        """
        wanted: dict[str, tuple[int, ...]] = {}
        for node in arch.nodes:
            wanted.update(param_shapes(node))
        for key, shape in wanted.items():
            if key not in self._t:
                raise BindingError(f"missing tensor {key!r} (expected shape {shape})", key)
            if self._t[key].shape != shape:
                raise BindingError(f"tensor {key!r} has shape {self._t[key].shape}, expected {shape}", key)
        if strict:
            for key in self._t:
                if key not in wanted:
                    raise BindingError(f"orphan tensor {key!r} not used by the architecture", key)

    # serialization

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<II", VERSION, len(self._t))]
        for name, arr in self._t.items():
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise WeightFormatError(f"tensor name too long: {name[:40]}...")
            out.append(struct.pack("<H", len(nb)))
            out.append(nb)
            out.append(struct.pack("<BB", 0, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightStore":
        view = memoryview(data)
        pos = 0

        def take(n: int, what: str):
            nonlocal pos
            if pos + n > len(view):
                raise WeightFormatError(f"truncated {what} at byte offset {pos}")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise WeightFormatError("bad magic; not an ESRW file")
        version, count = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise WeightFormatError(f"unsupported ESRW version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2, "name length"))
            name = bytes(take(nlen, "name")).decode("utf-8")
            dtype, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
            if dtype not in _DTYPES:
                raise WeightFormatError(f"tensor {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = take(size * 4, f"payload of {name!r}")
            if name in tensors:
                raise WeightFormatError(f"duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
        if pos != len(view):
            raise WeightFormatError(f"{len(view) - pos} trailing bytes after last tensor")
        return cls(tensors)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        return cls.from_bytes(Path(path).read_bytes())


def init_weights(arch: ArchSpec, seed: int = 0, gain: float = 1.0) -> WeightStore:
    """Deterministic random weights for every learnable tensor of ``arch``.

    Conv weights and biases are uniform in ``±gain/sqrt(fan_in)``; BN
    statistics are drawn around the identity transform; channel-weighting
    vectors follow N(1, 0.9^2).
    """
    rng = np.random.default_rng(seed)
    out = {}
    for node in arch.nodes:
        shapes = param_shapes(node)
        if not shapes:
            continue
        if node.kind == "conv":
            cp = conv_params(node)
            fan_in = 9 if node.get("fixed") else (cp.in_channels // cp.groups) * cp.kernel_h * cp.kernel_w
            bound = gain / np.sqrt(fan_in)
            for key, shape in shapes.items():
                out[key] = rng.uniform(-bound, bound, shape)
        elif node.kind == "bn":
            c = shapes[f"{node.name}.gamma"][0]
            out[f"{node.name}.gamma"] = rng.uniform(0.5, 1.5, c)
            out[f"{node.name}.beta"] = rng.uniform(-0.1, 0.1, c)
            out[f"{node.name}.mean"] = rng.uniform(-0.1, 0.1, c)
            out[f"{node.name}.var"] = rng.uniform(0.5, 1.5, c)
        elif node.kind == "scale":
            (key, shape), = shapes.items()
            out[key] = rng.normal(1.0, 0.9, shape)
        else:
            (key, shape), = shapes.items()
            out[key] = np.full(shape, 0.25)
    return WeightStore(out)
