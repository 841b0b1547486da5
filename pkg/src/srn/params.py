"""Named parameter arrays, checkpoint archives, seeding, and the optimizer.

Checkpoint archive layout (single file):

    bytes 0..8    magic ``SRNCKPT1\\n``
    bytes 9..16   little-endian uint64 manifest length
    manifest      canonical JSON (sorted keys, no whitespace) with
                  ``format_version``, ``rng_seed``, ``config`` and an
                  ``arrays`` list of {name, dtype, shape, offset, nbytes}
    payload       raw little-endian array bytes, concatenated in manifest
                  order (arrays sorted by name)

Writing the same store twice yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import InvalidInput

_MAGIC = b"SRNCKPT1\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def derive_seed(*parts: int) -> int:
    """Deterministically mix integer keys into a fresh 64-bit seed."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_from(*parts: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   dtype=np.float64) -> np.ndarray:
    """Uniform init scaled by 1/sqrt(fan_in); biases are zeroed separately."""
    limit = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class ParamStore:
    """All learnable arrays plus config and RNG provenance, serializable."""

    arrays: dict[str, np.ndarray]
    rng_seed: int = 0
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def validate(self) -> None:
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"array {name!r} contains non-finite values")
            if arr.dtype.name not in _DTYPES:
                raise InvalidInput(f"array {name!r} has unsupported dtype {arr.dtype}")

    def save(self, path) -> None:
        self.validate()
        names = sorted(self.arrays)
        if len(names) != len(self.arrays):
            raise InvalidInput("duplicate array names")
        entries = []
        blobs = []
        offset = 0
        for name in names:
            arr = np.ascontiguousarray(self.arrays[name], dtype=_DTYPES[self.arrays[name].dtype.name])
            blob = arr.tobytes()
            entries.append(
                {
                    "name": name,
                    "dtype": _DTYPES[arr.dtype.name] if arr.dtype.name in _DTYPES else arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)
        manifest = {
            "format_version": self.version,
            "rng_seed": int(self.rng_seed),
            "config": self.config,
            "arrays": entries,
        }
        body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(body).to_bytes(8, "little"))
            fh.write(body)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "ParamStore":
        raw = Path(path).read_bytes()
        if raw[: len(_MAGIC)] != _MAGIC:
            raise InvalidInput(f"{path}: not a checkpoint archive")
        n = int.from_bytes(raw[len(_MAGIC): len(_MAGIC) + 8], "little")
        head = len(_MAGIC) + 8
        manifest = json.loads(raw[head: head + n].decode("utf-8"))
        payload = raw[head + n:]
        arrays: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            buf = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            arrays[entry["name"]] = arr.copy()
        return cls(
            arrays=arrays,
            rng_seed=manifest["rng_seed"],
            config=manifest["config"],
            version=manifest["format_version"],
        )


class Adam:
    """Adaptive moment estimation over a named dict of leaf tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
