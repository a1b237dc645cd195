"""Named parameter collections, update rules and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import DTYPE, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"AUDSRCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, truncated, corrupted or version-mismatched checkpoint."""


class ParamStore:
    """Ordered map of parameter name -> leaf Tensor, plus per-parameter optimizer state."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True, name=name)
        t.requires_grad = True
        if t.name is None:
            t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._params.items()}

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def step(self, rule: str = "adam", lr: float = 1e-4) -> None:
        """Apply one update to every parameter. Gradients are left in place."""
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for name, t in self._params.items():
            if t.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; call backward first")
        self.step_count += 1
        if rule == "sgd":
            for t in self._params.values():
                t.data = t.data - lr * t.grad
        elif rule == "adam":
            bc1 = 1.0 - ADAM_BETA1 ** self.step_count
            bc2 = 1.0 - ADAM_BETA2 ** self.step_count
            for name, t in self._params.items():
                st = self.state.get(name)
                if st is None:
                    st = self.state[name] = {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
                st["m"] = ADAM_BETA1 * st["m"] + (1.0 - ADAM_BETA1) * t.grad
                st["v"] = ADAM_BETA2 * st["v"] + (1.0 - ADAM_BETA2) * t.grad * t.grad
                m_hat = st["m"] / bc1
                v_hat = st["v"] / bc2
                t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            raise ValueError(f"unknown update rule {rule!r}; expected 'sgd' or 'adam'")

    def reset_optimizer(self) -> None:
        self.state = {}
        self.step_count = 0

    # -- (de)serialization ----------------------------------------------------
    def to_arrays(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, t in self._params.items():
            out[prefix + name] = t.data
        for name in self._params:
            st = self.state.get(name)
            if st is not None:
                out[f"{prefix}{name}#m"] = st["m"]
                out[f"{prefix}{name}#v"] = st["v"]
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "",
                    step_count: int = 0) -> None:
        for name, t in self._params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r}")
            arr = np.asarray(arrays[key], dtype=DTYPE)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {key!r}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
            t.grad = None
        self.state = {}
        for name in self._params:
            if f"{prefix}{name}#m" in arrays:
                self.state[name] = {"m": np.array(arrays[f"{prefix}{name}#m"], dtype=DTYPE),
                                    "v": np.array(arrays[f"{prefix}{name}#v"], dtype=DTYPE)}
        self.step_count = int(step_count)

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, t in self._params.items():
            t.data = other[name].data.copy()


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write ``arrays`` (float64) and JSON-serializable ``meta`` to ``path``.

    Layout: magic, uint32 version, uint64 header length, canonical JSON header,
    raw little-endian float64 payload. The header carries a sha256 of the
    payload, so truncation and corruption are detected on load.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "entries": entries,
        "meta": dict(meta or {}),
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    blob = Path(path).read_bytes()
    fixed = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < fixed or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if fixed + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    required = ("version", "entries", "meta", "payload_bytes", "sha256")
    if not isinstance(header, dict) or any(k not in header for k in required):
        raise CheckpointError(f"{path}: corrupted header (missing fields)")
    if header.get("version") != version:
        raise CheckpointError(f"{path}: header version disagrees with preamble")
    payload = blob[fixed + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for e in header["entries"]:
        arrays[e["name"]] = values[e["offset"]:e["offset"] + e["count"]].astype(DTYPE).reshape(e["shape"])
    return arrays, header["meta"]
