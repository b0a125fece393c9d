"""Named parameter tensors with seeded initialization and a binary model container."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SKM1"


class ParameterError(ValueError):
    """A tensor is malformed or non-finite."""


class ParamSet:
    """Ordered mapping name -> ndarray; insertion order is the serialization order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._tensors:
            raise ParameterError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(array, dtype=self.dtype)
        self._tensors[name] = arr
        return arr

    def glorot(self, name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        fan_in, fan_out = shape[0], shape[-1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-a, a, size=shape))

    def normal(self, name: str, shape: tuple[int, ...], rng: np.random.Generator, std: float = 0.05) -> np.ndarray:
        return self.add(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        self._tensors[name] = np.ascontiguousarray(array, dtype=self.dtype)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamSet":
        out = ParamSet(dtype=self.dtype)
        for name, arr in self._tensors.items():
            out._tensors[name] = arr.copy()
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(dtype=dtype)
        for name, arr in self._tensors.items():
            out._tensors[name] = np.ascontiguousarray(arr, dtype=dtype)
        return out

    def check_finite(self) -> None:
        for name, arr in self._tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"non-finite values in tensor {name!r}")

    def num_parameters(self) -> int:
        return sum(arr.size for arr in self._tensors.values())


def save_params(path: str | Path, params: ParamSet, sidecar: dict) -> None:
    """Write the SKM1 container (length-prefixed float32 LE tensors) plus a JSON sidecar."""
    path = Path(path)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(params.names())))
        for name, arr in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    sidecar_path = Path(str(path) + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> tuple[ParamSet, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ParameterError(f"{path}: not a SKM1 model file")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = ParamSet(dtype=np.float32)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params.add(name, arr.copy())
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
    return params, sidecar
