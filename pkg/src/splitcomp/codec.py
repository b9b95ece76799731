"""8-bit bottleneck quantization and payload-size accounting.

Wire layout of a quantized tensor (little-endian): the float32 scale, then
one signed byte per element in row-major order. Shapes travel separately in
the runtime frame header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from splitcomp import kernels
from splitcomp.errors import CorruptPayload, InvalidTensor, MissingConfig

FORMATS = ("bq8", "float32", "configured_jpeg")
SCALE_BYTES = 4


@dataclass(eq=False)
class QuantizedTensor:
    shape: tuple
    data: np.ndarray  # int8, flat
    scale: float  # float32-representable
    mode: str = "symmetric"

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.scale = float(np.float32(self.scale))

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale == other.scale
            and self.mode == other.mode
            and np.array_equal(self.data, other.data)
        )

    def to_bytes(self) -> bytes:
        return struct.pack("<f", self.scale) + np.ascontiguousarray(self.data, dtype=np.int8).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, shape) -> "QuantizedTensor":
        shape = tuple(int(d) for d in shape)
        numel = int(np.prod(shape, dtype=np.int64))
        if len(buf) != numel + SCALE_BYTES:
            raise CorruptPayload(f"bq8 payload has {len(buf)} bytes, expected {numel + SCALE_BYTES} for {shape}")
        (scale,) = struct.unpack_from("<f", buf, 0)
        if not np.isfinite(scale) or scale <= 0:
            raise CorruptPayload(f"invalid dequantization scale {scale}")
        data = np.frombuffer(buf, dtype=np.int8, offset=SCALE_BYTES).copy()
        return cls(shape, data, scale)


def _requantized_scale(s):
    # scale that quantize() would derive from dequantize()'s float32 output
    return np.float32(float(np.float32(127) * s) / 127.0)


def _stable_scale(amax: float) -> np.float32:
    """float32 scale near ``amax / 127`` that survives a dequantize/quantize cycle.

    Rounding ``amax / 127`` to float32 and then ``127 * s`` back again can land
    one ulp away, which would make re-quantizing a dequantized tensor change
    its scale. Among the nearest float32 neighbours, pick the closest one that
    maps to itself.
    """
    s0 = np.float32(amax / 127.0)
    if s0 == 0:  # max|t| so small that amax/127 underflows float32
        s0 = np.float32(np.finfo(np.float32).smallest_subnormal)
    cands = [s0, np.nextafter(s0, np.float32(np.inf)), np.nextafter(s0, np.float32(0))]
    cands.sort(key=lambda s: abs(float(s) - amax / 127.0))
    for s in cands:
        if s > 0 and _requantized_scale(s) == s and amax / float(s) <= 127.5:
            return s
    return s0


def quantize(t) -> QuantizedTensor:
    """Symmetric per-tensor int8 quantization with a single float32 scale.

    ``scale = max|t| / 127`` (1 for an all-zero tensor); elements are rounded
    half away from zero.
    """
    t = np.asarray(t)
    if not np.all(np.isfinite(t)):
        raise InvalidTensor("tensor contains NaN or Inf")
    amax = float(np.max(np.abs(t))) if t.size else 0.0
    scale = _stable_scale(amax) if amax > 0 else np.float32(1.0)
    data = kernels.quantize_int8(t, float(scale))
    return QuantizedTensor(t.shape, data, float(scale))


def dequantize(qt: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    """``data * scale`` reshaped to ``qt.shape``."""
    data = np.asarray(qt.data)
    if data.dtype != np.int8 or data.ndim != 1 or data.size != qt.numel:
        raise CorruptPayload(f"{data.size} int8 values do not fill shape {qt.shape}")
    if not qt.scale > 0:
        raise CorruptPayload(f"invalid dequantization scale {qt.scale}")
    # product in the output precision; float32 is what the tail consumes
    return (data.astype(dtype) * np.dtype(dtype).type(qt.scale)).reshape(qt.shape)


def numel(shape) -> int:
    return int(np.prod(tuple(shape), dtype=np.int64))


def element_reduction(input_shape, bottleneck_shape) -> float:
    """Fraction of elements removed: ``1 - numel(bottleneck) / numel(input)``."""
    n_in, n_b = numel(input_shape), numel(bottleneck_shape)
    if n_in == 0 or n_b == 0:
        raise ValueError("shapes must be non-empty")
    return 1.0 - n_b / n_in


def payload_size(obj, format: str = "bq8", *, jpeg_bytes: int | None = None) -> int:
    """Bytes on the wire for ``obj`` (a QuantizedTensor, an array or a shape).

    ``bq8`` is ``numel + 4``, ``float32`` is ``4 * numel`` and
    ``configured_jpeg`` returns the configured average JPEG size.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown payload format {format!r}")
    if format == "configured_jpeg":
        if jpeg_bytes is None:
            raise MissingConfig("jpeg_bytes must be configured for the configured_jpeg format")
        return int(jpeg_bytes)
    if isinstance(obj, QuantizedTensor):
        n = obj.numel
    elif isinstance(obj, np.ndarray):
        n = obj.size
    else:
        n = numel(obj)
    return n + SCALE_BYTES if format == "bq8" else 4 * n


def encode(t, codec: str) -> bytes:
    """Serialize a tensor body for ``codec`` in {"float32", "bq8"}."""
    if codec == "bq8":
        return quantize(t).to_bytes()
    if codec == "float32":
        return np.ascontiguousarray(t, dtype="<f4").tobytes()
    raise ValueError(f"unknown codec {codec!r}")


def decode(buf: bytes, shape, codec: str) -> np.ndarray:
    if codec == "bq8":
        return dequantize(QuantizedTensor.from_bytes(buf, shape))
    if codec == "float32":
        if len(buf) != 4 * numel(shape):
            raise CorruptPayload(f"float32 payload has {len(buf)} bytes, expected {4 * numel(shape)}")
        return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(tuple(shape))
    raise ValueError(f"unknown codec {codec!r}")


def roundtrip(t, codec: str) -> np.ndarray:
    """The tensor a receiver reconstructs after ``encode``/``decode``."""
    t = np.asarray(t)
    return decode(encode(t, codec), t.shape, codec)
