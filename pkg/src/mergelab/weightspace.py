"""Core weight-space data model, arithmetic, and the MWS checkpoint format.

A model is an MLP described by an :class:`ArchSpec`; its parameters live in a
:class:`WeightSet` (per-layer weight matrix + bias vector).  A
:class:`TaskVector` is a displacement with the same shape.  All values are
64-bit floats.

Flattening order is fixed: layers in order, each layer contributing its
weight matrix row-major followed by its bias vector.  Cosine similarities and
genome encodings rely on this order being stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ArchSpec",
    "WeightSet",
    "TaskVector",
    "MwsError",
    "combine",
    "flatten",
    "unflatten",
    "cosine_sim",
    "save_weights",
    "load_weights",
    "write_container",
    "read_container",
]

_ACTIVATIONS = ("relu", "tanh", "sigmoid")

_MAGIC = b"MWS1"


class MwsError(ValueError):
    """Raised when an MWS file is malformed or inconsistent."""


@dataclass(frozen=True)
class ArchSpec:
    """MLP architecture: layer widths d_0..d_L, activation, bias flag."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    has_bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("architecture needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        """Number of weight layers L."""
        return len(self.layer_widths) - 1

    def layer_shape(self, layer: int) -> tuple[int, int]:
        """Shape of W at `layer` (1-based), rows x cols = d_l x d_{l-1}."""
        return (self.layer_widths[layer], self.layer_widths[layer - 1])


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class _ParamSet:
    """Shared storage for WeightSet/TaskVector: per-layer (W, b) pairs."""

    arch: ArchSpec
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if len(self.layers) != self.arch.n_layers:
            raise ValueError(
                f"expected {self.arch.n_layers} layers, got {len(self.layers)}"
            )
        frozen = []
        for i, (w, b) in enumerate(self.layers, start=1):
            w = _freeze(w)
            b = _freeze(b)
            if w.shape != self.arch.layer_shape(i):
                raise ValueError(
                    f"layer {i}: W shape {w.shape} != {self.arch.layer_shape(i)}"
                )
            if b.shape != (self.arch.layer_widths[i],):
                raise ValueError(f"layer {i}: bias shape {b.shape} inconsistent")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite entries")
            frozen.append((w, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def weight(self, layer: int) -> np.ndarray:
        return self.layers[layer - 1][0]

    def bias(self, layer: int) -> np.ndarray:
        return self.layers[layer - 1][1]


class WeightSet(_ParamSet):
    """Concrete MLP parameters."""


class TaskVector(_ParamSet):
    """A WeightSet-shaped displacement (fine-tuned minus base weights)."""


def _zeros_like_layers(arch: ArchSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        (np.zeros(arch.layer_shape(i)), np.zeros(arch.layer_widths[i]))
        for i in range(1, arch.n_layers + 1)
    ]


def combine(coeffs: Sequence[float], ws: Sequence[_ParamSet]) -> _ParamSet:
    """Element-wise linear combination sum_i coeffs[i] * ws[i].

    All operands must share one ArchSpec.  The result has the type of the
    first operand (WeightSet in, WeightSet out).
    """
    if len(ws) == 0:
        raise ValueError("combine needs at least one operand")
    if len(coeffs) != len(ws):
        raise ValueError("coeffs and operands must have equal length")
    arch = ws[0].arch
    for w in ws[1:]:
        if w.arch != arch:
            raise ValueError("operands do not share an architecture")
    layers = _zeros_like_layers(arch)
    for c, w in zip(coeffs, ws):
        c = float(c)
        for i, (wm, bv) in enumerate(w.layers):
            layers[i] = (layers[i][0] + c * wm, layers[i][1] + c * bv)
    return type(ws[0])(arch, tuple(layers))


def flatten(w: _ParamSet) -> np.ndarray:
    """Deterministic layer-major, row-major flattening (W then b per layer)."""
    parts = []
    for wm, bv in w.layers:
        parts.append(wm.ravel())
        parts.append(bv)
    return np.concatenate(parts)


def unflatten(arch: ArchSpec, vec: np.ndarray, like: type = WeightSet) -> _ParamSet:
    """Inverse of :func:`flatten` for the given architecture."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    layers = []
    pos = 0
    for i in range(1, arch.n_layers + 1):
        rows, cols = arch.layer_shape(i)
        w = vec[pos : pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        b = vec[pos : pos + rows]
        pos += rows
        layers.append((w, b))
    if pos != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
    return like(arch, tuple(layers))


def cosine_sim(a: _ParamSet, b: _ParamSet, return_degenerate: bool = False):
    """Cosine similarity of the flattened parameter vectors, in [-1, 1].

    A zero-norm operand makes the cosine undefined; it is reported as 0.0
    with the degenerate flag set (pass ``return_degenerate=True`` to see it).
    """
    if a.arch != b.arch:
        raise ValueError("operands do not share an architecture")
    fa, fb = flatten(a), flatten(b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return (0.0, True) if return_degenerate else 0.0
    if np.array_equal(fa, fb):
        val = 1.0
    elif np.array_equal(fa, -fb):
        val = -1.0
    else:
        val = float(np.clip(fa @ fb / (na * nb), -1.0, 1.0))
    return (val, False) if return_degenerate else val


# ---------------------------------------------------------------------------
# MWS container format (bit-exact, little-endian)
#
#   bytes 0-3          magic "MWS1"
#   u32                manifest_len
#   manifest_len bytes UTF-8 JSON manifest
#   u32                tensor_count
#   per tensor:        u32 name_len, name bytes, u32 ndim, u64 dims[ndim],
#                      f64 values row-major
#
# No padding, no alignment.  The manifest is serialized with compact
# separators and insertion-ordered keys so identical inputs produce identical
# bytes.
# ---------------------------------------------------------------------------


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, separators=(",", ":")).encode("utf-8")


def write_container(path, manifest: dict, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write a generic MWS container with the given manifest and tensors."""
    tensors = list(tensors)
    mbytes = _manifest_bytes(manifest)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nbytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nbytes)))
            fh.write(nbytes)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise MwsError(f"truncated file while reading {what}")
    return data


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an MWS container; returns (manifest, ordered name->tensor map)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise MwsError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        try:
            manifest = json.loads(_read_exact(fh, mlen, "manifest").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MwsError(f"unreadable manifest: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            dims = struct.unpack(
                "<" + "Q" * ndim, _read_exact(fh, 8 * ndim, "dims")
            )
            n = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(fh, 8 * n, f"values of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise MwsError("trailing bytes after last tensor")
    return manifest, tensors


def _weights_manifest(arch: ArchSpec) -> dict:
    return {
        "widths": list(arch.layer_widths),
        "activation": arch.activation,
        "has_bias": arch.has_bias,
    }


def save_weights(w: WeightSet, path) -> None:
    """Write a WeightSet to `path` in the MWS format (bit-exact round trip)."""
    tensors: list[tuple[str, np.ndarray]] = []
    for i in range(1, w.arch.n_layers + 1):
        tensors.append((f"W{i}", w.weight(i)))
        if w.arch.has_bias:
            tensors.append((f"b{i}", w.bias(i)))
        elif np.any(w.bias(i)):
            raise ValueError("has_bias=False but layer has nonzero bias")
    write_container(path, _weights_manifest(w.arch), tensors)


def load_weights(path) -> WeightSet:
    """Read a WeightSet from an MWS file, validating against its manifest."""
    manifest, tensors = read_container(path)
    try:
        arch = ArchSpec(
            tuple(manifest["widths"]),
            manifest["activation"],
            bool(manifest["has_bias"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MwsError(f"invalid manifest: {exc}") from exc
    layers = []
    for i in range(1, arch.n_layers + 1):
        wname = f"W{i}"
        if wname not in tensors:
            raise MwsError(f"missing tensor {wname}")
        w = tensors[wname]
        if w.shape != arch.layer_shape(i):
            raise MwsError(
                f"tensor {wname} shape {w.shape} != manifest {arch.layer_shape(i)}"
            )
        if arch.has_bias:
            bname = f"b{i}"
            if bname not in tensors:
                raise MwsError(f"missing tensor {bname}")
            b = tensors[bname]
            if b.shape != (arch.layer_widths[i],):
                raise MwsError(f"tensor {bname} shape {b.shape} inconsistent")
        else:
            b = np.zeros(arch.layer_widths[i])
        layers.append((w, b))
    return WeightSet(arch, tuple(layers))
