"""Weight/activation quantizers, the bit-packing codec and size accounting.

Quantizers work on plain numpy arrays; :func:`quantize_weight_ste` lifts a
weight quantizer into the autodiff graph with a straight-through backward.

Packed layout
-------------
* 1 bit: bit ``b`` of byte ``k`` is element ``8k + b`` (LSB first), 1 = positive.
* 2 bit (ternary): element ``4k + j`` occupies bits ``2j, 2j+1`` of byte ``k``;
  codes ``00 = 0``, ``01 = +alpha``, ``10 = -alpha``.
* 8 bit: one signed byte per element, value ``code * scale``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, DimensionError, FormatError
from .tensor import Tensor, straight_through

KINDS = ("binary", "ternary", "int8_activation", "none")
GRANULARITIES = ("per_tensor", "per_row")


@dataclass(frozen=True)
class QuantizerSpec:
    kind: str = "none"
    granularity: str = "per_tensor"
    ternary_threshold_factor: float = 0.7
    ste_clip: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.ternary_threshold_factor > 0:
            raise ValueError("ternary_threshold_factor must be positive")

    @property
    def bits(self):
        return {"binary": 1, "ternary": 2, "int8_activation": 8, "none": 32}[self.kind]

    @classmethod
    def for_bits(cls, bits, **kw):
        kind = {1: "binary", 2: "ternary", 32: "none"}.get(int(bits))
        if kind is None:
            raise ValueError(f"weight bits must be 1, 2 or 32, got {bits}")
        return cls(kind=kind, **kw)


NONE = QuantizerSpec()


def _scoped(w, granularity):
    """View ``w`` as [scopes, elements] for the requested scale granularity."""
    w = np.asarray(w)
    if w.size == 0:
        raise DimensionError("cannot quantize an empty tensor")
    if granularity == "per_row":
        if w.ndim != 2:
            raise DimensionError("per_row granularity needs a 2-D weight")
        return w
    return w.reshape(1, -1)


def _sign(w):
    # sign(0) = +1
    return np.where(w >= 0, 1, -1).astype(w.dtype)


def binarize(w, spec=QuantizerSpec("binary")):
    """Return ``(q, alpha)`` with ``q = alpha * sign(w)``, ``alpha = mean |w|`` per scope."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    scoped = _scoped(w, spec.granularity)
    # float64 mean makes alpha exact on the codebook (idempotence)
    alpha = np.abs(scoped).mean(axis=1, dtype=np.float64).astype(w.dtype)
    q = (alpha[:, None] * _sign(scoped)).reshape(w.shape)
    return q, alpha


def ternarize(w, spec=QuantizerSpec("ternary")):
    """Ternary weights: returns ``(q, alpha, delta)``.

    ``delta = factor * mean|w|``; entries with ``|w| > delta`` become
    ``+-alpha`` where ``alpha`` is the mean magnitude of those survivors.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    scoped = _scoped(w, spec.granularity)
    mag = np.abs(scoped).astype(np.float64)
    delta = spec.ternary_threshold_factor * mag.mean(axis=1)
    keep = mag > delta[:, None]
    count = keep.sum(axis=1)
    total = np.where(keep, mag, 0.0).sum(axis=1)
    alpha = np.divide(total, count, out=np.zeros_like(total), where=count > 0).astype(w.dtype)
    q = np.where(keep, alpha[:, None] * _sign(scoped), 0).astype(w.dtype).reshape(w.shape)
    return q, alpha, delta.astype(w.dtype)


def quantize_weight(w, spec):
    """Quantized view of ``w`` (array) according to ``spec``; identity for ``none``."""
    if spec.kind == "binary":
        return binarize(w, spec)[0]
    if spec.kind == "ternary":
        return ternarize(w, spec)[0]
    if spec.kind == "none":
        return np.asarray(w)
    raise ValueError(f"{spec.kind!r} is not a weight quantizer")


def quantize_with_scales(w, spec):
    """``(q, alpha)`` for a binary or ternary spec."""
    if spec.kind == "binary":
        return binarize(w, spec)
    if spec.kind == "ternary":
        return ternarize(w, spec)[:2]
    raise ValueError(f"{spec.kind!r} has no packed representation")


def quantize_weight_ste(w, spec):
    """Quantize a weight tensor inside the graph; backward is straight-through."""
    if spec.kind == "none":
        return w
    return straight_through(lambda a: quantize_weight(a, spec), clip=spec.ste_clip)(w)


def _round_half_away(x):
    return np.trunc(x + np.copysign(np.asarray(0.5, x.dtype), x))


def quantize_activation_int8(x):
    """Symmetric per-tensor INT8: returns integer codes and the scale ``max|x| / 127``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.size == 0:
        raise DimensionError("cannot quantize an empty tensor")
    peak = float(np.abs(x).max())
    if peak == 0:
        return np.zeros(x.shape, np.int8), 1.0
    # multiply by 127/peak (not divide by s) so exact ties such as 63.5 survive
    y = x * x.dtype.type(127.0 / peak)
    q = np.clip(_round_half_away(y), -127, 127)
    return q.astype(np.int8), peak / 127.0


def fake_quantize_int8(x):
    """Quantize-dequantize round trip ``q * s`` in the input dtype."""
    q, s = quantize_activation_int8(x)
    x = np.asarray(x)
    return q.astype(x.dtype) * x.dtype.type(s)


def quantize_activation_ste(x):
    return straight_through(fake_quantize_int8)(x)


# -- packing ----------------------------------------------------------------

@dataclass
class PackedTensor:
    bits: int
    shape: tuple
    packed_words: bytes
    scales: np.ndarray
    granularity: str = "per_tensor"

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.scales = np.asarray(self.scales, dtype=np.float32)

    @property
    def num_elements(self):
        return math.prod(self.shape)

    @property
    def zero_mask(self):
        if self.bits != 2:
            return None
        return _unpack_codes(self.packed_words, 2, self.num_elements) == 0

    def nbytes(self):
        return len(self.packed_words) + 4 * self.scales.size


def _row_scales(alpha, shape, granularity):
    alpha = np.asarray(alpha, dtype=np.float32).reshape(-1)
    n = math.prod(shape)
    if granularity == "per_row":
        if len(shape) != 2 or alpha.size != shape[0]:
            raise CodecError("per_row packing needs one scale per row of a 2-D tensor")
        return alpha, np.repeat(alpha, shape[1])
    if alpha.size != 1:
        raise CodecError("per_tensor packing needs exactly one scale")
    return alpha, np.full(n, alpha[0], dtype=np.float32)


def _pack_codes(codes, bits):
    codes = codes.astype(np.uint8)
    if bits == 1:
        return np.packbits(codes, bitorder="little").tobytes()
    per = 8 // bits
    pad = (-codes.size) % per
    codes = np.concatenate([codes, np.zeros(pad, np.uint8)]).reshape(-1, per)
    shifts = (np.arange(per, dtype=np.uint8) * bits)
    return np.bitwise_or.reduce(codes << shifts, axis=1).astype(np.uint8).tobytes()


def _unpack_codes(buf, bits, n):
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 1:
        return np.unpackbits(raw, bitorder="little")[:n]
    per = 8 // bits
    shifts = (np.arange(per, dtype=np.uint8) * bits)
    mask = (1 << bits) - 1
    return ((raw[:, None] >> shifts) & mask).reshape(-1)[:n]


def pack(q, alpha, bits, granularity="per_tensor"):
    """Encode quantized values ``q`` (on the codebook set by ``alpha``)."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float32)
    shape = q.shape
    flat = q.reshape(-1)
    scales, per_elem = _row_scales(alpha, shape, granularity)
    if bits == 1:
        pos = flat == per_elem
        neg = flat == -per_elem
        if not np.all(pos | neg):
            raise CodecError("value outside the binary codebook {-alpha, +alpha}")
        payload = _pack_codes(pos, 1)
    elif bits == 2:
        zero = flat == 0
        pos = (flat == per_elem) & ~zero
        neg = (flat == -per_elem) & ~zero
        if not np.all(pos | neg | zero):
            raise CodecError("value outside the ternary codebook {-alpha, 0, +alpha}")
        codes = np.where(pos, 1, np.where(neg, 2, 0))
        payload = _pack_codes(codes, 2)
    elif bits == 8:
        safe = np.where(per_elem == 0, 1.0, per_elem)
        ratio = flat.astype(np.float64) / safe
        codes = np.round(ratio)
        # codes * scale must land on the float32 value given, up to float32 rounding
        tol = 4 * np.finfo(np.float32).eps * 127 * np.abs(safe)
        if np.any(np.abs(codes) > 127) or np.any(np.abs(codes * safe - flat) > tol):
            raise CodecError("value outside the int8 codebook")
        payload = codes.astype(np.int8).tobytes()
    else:
        raise CodecError(f"unsupported bit width {bits}")
    return PackedTensor(bits, shape, payload, scales, granularity)


def unpack(p):
    """Decode a :class:`PackedTensor`; returns ``(q, scales)``."""
    n = p.num_elements
    expected = math.ceil(n * p.bits / 8)
    if len(p.packed_words) != expected:
        raise FormatError(f"payload is {len(p.packed_words)} bytes, expected {expected}")
    _, per_elem = _row_scales(p.scales, p.shape, p.granularity)
    if p.bits == 1:
        codes = _unpack_codes(p.packed_words, 1, n)
        q = np.where(codes == 1, per_elem, -per_elem)
    elif p.bits == 2:
        codes = _unpack_codes(p.packed_words, 2, n)
        if np.any(codes == 3):
            raise FormatError("invalid ternary code 0b11")
        q = np.where(codes == 1, per_elem, np.where(codes == 2, -per_elem, 0))
    elif p.bits == 8:
        codes = np.frombuffer(p.packed_words, dtype=np.int8).astype(np.float64)
        q = codes * per_elem
    else:
        raise FormatError(f"unsupported bit width {p.bits}")
    return q.astype(np.float32).reshape(p.shape), p.scales.copy()


# -- segment records --------------------------------------------------------
# name_len u32 | name utf-8 | bits u8 | granularity u8 | rank u32 | dims u32*rank
# | n_scales u32 | scales f32*n | payload_len u32 | payload

_GRAN_CODE = {"per_tensor": 0, "per_row": 1}
_GRAN_NAME = {v: k for k, v in _GRAN_CODE.items()}


def encode_record(name, bits, shape, scales, payload, granularity="per_tensor"):
    name_b = name.encode("utf-8")
    scales = np.asarray(scales, dtype="<f4").reshape(-1)
    parts = [
        struct.pack("<I", len(name_b)), name_b,
        struct.pack("<BB", bits, _GRAN_CODE[granularity]),
        struct.pack("<I", len(shape)), struct.pack(f"<{len(shape)}I", *shape),
        struct.pack("<I", scales.size), scales.tobytes(),
        struct.pack("<I", len(payload)), payload,
    ]
    return b"".join(parts)


def encode_packed(name, p):
    return encode_record(name, p.bits, p.shape, p.scales, p.packed_words, p.granularity)


def encode_raw(name, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    return encode_record(name, 32, a.shape, np.zeros(0, np.float32), a.tobytes())


class _Reader:
    def __init__(self, buf, offset=0):
        self.buf = memoryview(buf)
        self.pos = offset

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated data", offset=self.pos)
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_record(buf, offset=0):
    """Decode one record; returns ``(name, PackedTensor | ndarray, next_offset)``.

    Raw float32 tensors (bits = 32) come back as arrays, everything else as a
    :class:`PackedTensor`.
    """
    r = _Reader(buf, offset)
    start = r.pos
    (name_len,) = r.unpack("<I")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("record name is not UTF-8", offset=start) from exc
    bits, gran = r.unpack("<BB")
    if bits not in (1, 2, 8, 32) or gran not in _GRAN_NAME:
        raise FormatError(f"bad record header for {name!r}", offset=r.pos - 2)
    (rank,) = r.unpack("<I")
    shape = r.unpack(f"<{rank}I") if rank else ()
    (n_scales,) = r.unpack("<I")
    scales = np.frombuffer(r.take(4 * n_scales), dtype="<f4").astype(np.float32)
    (length,) = r.unpack("<I")
    payload_at = r.pos
    payload = r.take(length)
    n = math.prod(shape)
    if bits == 32:
        if length != 4 * n:
            raise FormatError(f"raw tensor {name!r} payload size mismatch", offset=payload_at)
        value = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    else:
        if length != math.ceil(n * bits / 8):
            raise FormatError(f"packed tensor {name!r} payload size mismatch", offset=payload_at)
        value = PackedTensor(bits, shape, payload, scales, _GRAN_NAME[gran])
    return name, value, r.pos


# -- size accounting --------------------------------------------------------

@dataclass(frozen=True)
class ParamEntry:
    name: str
    element_count: int
    bits: int
    scale_count: int = 0
    count_scale_overhead: bool = True

    def __post_init__(self):
        if self.element_count <= 0:
            raise ValueError(f"{self.name}: element_count must be positive")
        if self.bits not in (1, 2, 8, 32):
            raise ValueError(f"{self.name}: bits must be one of 1, 2, 8, 32")


@dataclass
class ParamInventory:
    entries: list = field(default_factory=list)

    def add(self, name, element_count, bits, scale_count=0, count_scale_overhead=True):
        self.entries.append(ParamEntry(name, int(element_count), int(bits), int(scale_count),
                                       count_scale_overhead))
        return self

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class SizeReport:
    bytes: float
    baseline_bytes: float
    ratio: float
    quantized_ratio: float

    @property
    def megabytes(self):
        # MiB, the unit behind the usual "417.2 MB" BERT-base figure
        return self.bytes / 2 ** 20

    @property
    def baseline_megabytes(self):
        return self.baseline_bytes / 2 ** 20


def model_size(inventory):
    """Storage for ``inventory``.

    ``bytes`` includes 32-bit scale overhead where counted.  ``ratio`` is the
    fp32 size over the quantized size excluding scales; ``quantized_ratio``
    restricts that to the entries stored below 32 bits (the headline
    "x32" figure for 1-bit weights).
    """
    entries = inventory.entries if isinstance(inventory, ParamInventory) else list(inventory)
    if not entries:
        raise ValueError("empty inventory")
    payload = sum(e.element_count * e.bits / 8 for e in entries)
    overhead = sum(4 * e.scale_count for e in entries if e.count_scale_overhead)
    baseline = sum(e.element_count * 4 for e in entries)
    q = [e for e in entries if e.bits < 32] or entries
    q_ratio = sum(e.element_count * 4 for e in q) / sum(e.element_count * e.bits / 8 for e in q)
    return SizeReport(payload + overhead, baseline, baseline / payload, q_ratio)


def bert_base_inventory(weight_bits=1, vocab=30522, hidden=768, layers=12, ffn=3072,
                        max_positions=512, type_vocab=2, include_pooler=True):
    """Parameter inventory of a BERT-base style encoder.

    Weight matrices and embedding tables are stored at ``weight_bits``;
    biases and layernorm parameters stay fp32.
    """
    inv = ParamInventory()
    inv.add("embeddings.word", vocab * hidden, weight_bits, 1)
    inv.add("embeddings.position", max_positions * hidden, weight_bits, 1)
    inv.add("embeddings.token_type", type_vocab * hidden, weight_bits, 1)
    inv.add("embeddings.layernorm", 2 * hidden, 32)
    for i in range(layers):
        for proj in ("query", "key", "value", "output"):
            inv.add(f"layer{i}.attention.{proj}.weight", hidden * hidden, weight_bits, 1)
            inv.add(f"layer{i}.attention.{proj}.bias", hidden, 32)
        inv.add(f"layer{i}.ffn.up.weight", hidden * ffn, weight_bits, 1)
        inv.add(f"layer{i}.ffn.up.bias", ffn, 32)
        inv.add(f"layer{i}.ffn.down.weight", ffn * hidden, weight_bits, 1)
        inv.add(f"layer{i}.ffn.down.bias", hidden, 32)
        inv.add(f"layer{i}.layernorms", 4 * hidden, 32)
    if include_pooler:
        inv.add("pooler.weight", hidden * hidden, weight_bits, 1)
        inv.add("pooler.bias", hidden, 32)
    return inv
