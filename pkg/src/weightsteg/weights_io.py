"""Bit-exact reading and writing of model weight files.

Weights are kept as raw unsigned words (uint32 for float32, uint16 for
float16) so that every transformation downstream is defined on bits, not on
decimal values. Decimal interpretation is a view; serializing a parsed file
reproduces the input bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError

CONTAINER_SUFFIX = ".safetensors"
_METADATA_KEY = "__metadata__"


class DType(Enum):
    """Word layout of a weight file."""

    F32 = "F32"
    F16 = "F16"

    @classmethod
    def parse(cls, text: str) -> "DType":
        try:
            return cls(text.upper())
        except ValueError:
            raise FormatError(f"unsupported dtype {text!r} (expected F32 or F16)") from None

    @property
    def word_bits(self) -> int:
        return 32 if self is DType.F32 else 16

    @property
    def mantissa_bits(self) -> int:
        return 23 if self is DType.F32 else 10

    @property
    def word_bytes(self) -> int:
        return self.word_bits // 8

    @property
    def word_dtype(self) -> np.dtype:
        # explicit little-endian so on-disk layout is platform independent
        return np.dtype("<u4") if self is DType.F32 else np.dtype("<u2")

    @property
    def float_dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f2")


def _as_words(bits, dtype: DType) -> np.ndarray:
    arr = np.asarray(bits)
    if arr.dtype != dtype.word_dtype:
        arr = arr.astype(dtype.word_dtype)
    return np.ascontiguousarray(arr).reshape(-1)


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """A named tensor held as flat raw words in row-major order."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "bits", _as_words(self.bits, self.dtype))
        if any(d < 0 for d in self.shape):
            raise ValueError(f"tensor {self.name!r}: negative dimension in {self.shape}")
        if len(self.bits) != math.prod(self.shape):
            raise ValueError(
                f"tensor {self.name!r}: {len(self.bits)} words != prod{self.shape}"
            )

    @property
    def n(self) -> int:
        """Number of weights."""
        return len(self.bits)

    def values(self) -> np.ndarray:
        """Decimal view of the stored bit patterns (no copy)."""
        return self.bits.view(self.dtype.float_dtype)

    @property
    def non_finite_count(self) -> int:
        """NaN/Inf words; they are legal cover words but worth surfacing."""
        return int(np.count_nonzero(~np.isfinite(self.values())))

    def with_bits(self, bits) -> "WeightTensor":
        return WeightTensor(self.name, self.dtype, self.shape, bits)

    def __eq__(self, other):
        return (
            isinstance(other, WeightTensor)
            and self.name == other.name
            and self.dtype is other.dtype
            and self.shape == other.shape
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(eq=False)
class ModelWeights:
    """Ordered tensors parsed from one weights file."""

    tensors: list[WeightTensor]
    source_path: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor names")

    @property
    def n(self) -> int:
        return sum(t.n for t in self.tensors)

    @property
    def non_finite_count(self) -> int:
        return sum(t.non_finite_count for t in self.tensors)

    def __eq__(self, other):
        return (
            isinstance(other, ModelWeights)
            and self.tensors == other.tensors
            and self.metadata == other.metadata
        )


def read_raw(data: bytes, dtype: DType) -> WeightTensor:
    """Parse consecutive little-endian words into one unnamed flat tensor."""
    if len(data) % dtype.word_bytes != 0:
        raise FormatError(
            f"byte length {len(data)} not divisible by word size {dtype.word_bytes}"
        )
    words = np.frombuffer(data, dtype=dtype.word_dtype).copy()
    return WeightTensor("", dtype, (len(words),), words)


def write_raw(tensor: WeightTensor) -> bytes:
    return tensor.bits.astype(tensor.dtype.word_dtype).tobytes()


def _decode_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 8:
        raise FormatError("file too small for container header")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise FormatError("header extends beyond end of file")

    def reject_duplicates(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                raise FormatError(f"duplicate tensor name {key!r}")
            out[key] = value
        return out

    try:
        header = json.loads(
            data[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=reject_duplicates
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("container header is not a JSON object")
    return header, 8 + header_len


def read_container(data: bytes, source_path: str = "") -> ModelWeights:
    """Parse a safetensors-compatible container, preserving tensor order."""
    header, buffer_start = _decode_header(data)
    buffer = data[buffer_start:]

    metadata = header.pop(_METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    tensors = []
    spans = []
    for name, meta in header.items():
        if not isinstance(meta, dict):
            raise FormatError(f"tensor {name!r}: metadata is not an object")
        try:
            dtype = DType.parse(str(meta["dtype"]))
            shape = tuple(int(d) for d in meta["shape"])
            begin, end = (int(x) for x in meta["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"tensor {name!r}: bad header entry ({exc})") from exc
        if any(d < 0 for d in shape):
            raise FormatError(f"tensor {name!r}: negative dimension")
        nbytes = math.prod(shape) * dtype.word_bytes
        if begin < 0 or end - begin != nbytes:
            raise FormatError(f"tensor {name!r}: data_offsets do not match shape")
        if end > len(buffer):
            raise FormatError(f"tensor {name!r}: data truncated")
        spans.append((begin, end))
        words = np.frombuffer(buffer[begin:end], dtype=dtype.word_dtype).copy()
        tensors.append(WeightTensor(name, dtype, shape, words))

    # tensors must tile the buffer: no gaps, no overlap
    cursor = 0
    for begin, end in sorted(spans):
        if begin != cursor:
            raise FormatError("tensor data_offsets overlap or leave a gap")
        cursor = end
    if cursor != len(buffer):
        raise FormatError("trailing bytes after tensor data")

    return ModelWeights(tensors, source_path=source_path, metadata=dict(metadata))


def write_container(model: ModelWeights) -> bytes:
    """Serialize to the canonical container encoding (compact JSON header).

    read_container(write_container(m)) == m bit for bit; re-serializing a
    model parsed from canonical bytes reproduces those bytes.
    """
    header: dict = {}
    if model.metadata:
        header[_METADATA_KEY] = dict(model.metadata)
    offset = 0
    chunks = []
    for tensor in model.tensors:
        if tensor.name == _METADATA_KEY:
            raise ValueError(f"{_METADATA_KEY!r} is reserved and cannot name a tensor")
        raw = write_raw(tensor)
        header[tensor.name] = {
            "dtype": tensor.dtype.value,
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        chunks.append(raw)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(chunks)


def flatten(model: ModelWeights) -> WeightTensor:
    """Concatenate all tensors' bits in file order into one flat tensor.

    This is the canonical cover sequence every attack operates on.
    """
    if not model.tensors:
        raise ValueError("cannot flatten a model with no tensors")
    dtypes = {t.dtype for t in model.tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in model: {sorted(d.value for d in dtypes)}")
    dtype = model.tensors[0].dtype
    bits = np.concatenate([t.bits for t in model.tensors])
    return WeightTensor("", dtype, (len(bits),), bits)


def unflatten(model: ModelWeights, flat_bits: np.ndarray) -> ModelWeights:
    """Split a flat word sequence back into the model's tensor structure."""
    total = sum(t.n for t in model.tensors)
    flat_bits = np.asarray(flat_bits).reshape(-1)
    if len(flat_bits) != total:
        raise ValueError(f"expected {total} words, got {len(flat_bits)}")
    tensors = []
    cursor = 0
    for t in model.tensors:
        tensors.append(t.with_bits(flat_bits[cursor : cursor + t.n]))
        cursor += t.n
    return ModelWeights(tensors, source_path=model.source_path, metadata=dict(model.metadata))


def _raw_dtype_for_path(path: Path) -> DType | None:
    return {".f32": DType.F32, ".f16": DType.F16}.get(path.suffix.lower())


def load_model(path: str | Path) -> ModelWeights:
    """Load a container or raw (.f32/.f16) weights file."""
    path = Path(path)
    data = path.read_bytes()
    raw_dtype = _raw_dtype_for_path(path)
    if raw_dtype is not None:
        return ModelWeights([read_raw(data, raw_dtype)], source_path=str(path))
    model = read_container(data, source_path=str(path))
    return model


def save_model(model: ModelWeights, path: str | Path) -> None:
    path = Path(path)
    raw_dtype = _raw_dtype_for_path(path)
    if raw_dtype is not None:
        flat = flatten(model)
        if flat.dtype is not raw_dtype:
            raise ValueError(f"model dtype {flat.dtype.value} does not match {path.suffix}")
        path.write_bytes(write_raw(flat))
    else:
        path.write_bytes(write_container(model))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def model_digest(model: ModelWeights) -> str:
    """Digest of the canonical serialization, for provenance records."""
    return sha256_hex(write_container(model))
