"""Two small little-endian binary containers.

``CTEN`` holds one tensor (float32 or raw fixed-point int32).
``CNW1`` holds a network's layers in datapath order.

CTEN layout::

    "CTEN" | version u8 | dtype u8 (0 f32, 1 fixed) | [N u8, F u8 if fixed]
           | rank u8 | rank x u32 dims | row-major payload (f32 or i32)

CNW1 layout::

    "CNW1" | layer count u32 | per layer:
        name (u16 length + UTF-8) | kind u8 | 4 x u32 dims (out, in, kh, kw)
        | total_bits u8 | fraction_bits u8 | weights then biases
    [ "QACT" | N u8 | F u8 ]   optional activation format

Float weights are marked by ``total_bits == fraction_bits == 0`` and carry
f32 values; fixed weights carry i32 raw values that must fit in
``total_bits`` signed bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .cnn import ChipNetBlockParams, ConvParams, Network, QuantizedNetwork
from .errors import ContainerError
from .fixedpoint import ACTIVATION_FORMAT, FixedTensor, QFormat

CTEN_MAGIC = b"CTEN"
CTEN_VERSION = 1
CNW_MAGIC = b"CNW1"
QACT_MAGIC = b"QACT"
DTYPE_F32, DTYPE_FIXED = 0, 1


class LayerKind(IntEnum):
    CONV = 0
    BLOCK_DENSE = 1
    BLOCK_DILATED = 2
    OUTPUT = 3


_DILATION = {LayerKind.CONV: 1, LayerKind.BLOCK_DENSE: 1, LayerKind.BLOCK_DILATED: 2,
             LayerKind.OUTPUT: 1}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated container: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


# --- CTEN ------------------------------------------------------------------


def encode_cten(t) -> bytes:
    """Serialize a float array (stored as f32) or a :class:`FixedTensor` (stored as i32)."""
    if isinstance(t, FixedTensor):
        q = t.qformat
        raw = np.asarray(t.raw, dtype=np.int64)
        head = CTEN_MAGIC + struct.pack("<BBBB", CTEN_VERSION, DTYPE_FIXED, q.total_bits,
                                        q.fraction_bits)
        payload = raw.astype("<i4").tobytes()
        shape = raw.shape
    else:
        a = np.asarray(t)
        head = CTEN_MAGIC + struct.pack("<BB", CTEN_VERSION, DTYPE_F32)
        payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
        shape = a.shape
    if len(shape) > 255:
        raise ContainerError("rank exceeds 255")
    return head + struct.pack(f"<B{len(shape)}I", len(shape), *shape) + payload


def decode_cten(data: bytes):
    """Inverse of :func:`encode_cten`: a float32 ndarray or a :class:`FixedTensor`."""
    r = _Reader(data)
    if r.take(4) != CTEN_MAGIC:
        raise ContainerError("not a CTEN container (bad magic)")
    version, dtype = r.unpack("BB")
    if version != CTEN_VERSION:
        raise ContainerError(f"unsupported CTEN version {version}")
    q = None
    if dtype == DTYPE_FIXED:
        n, f = r.unpack("BB")
        try:
            q = QFormat(n, f)
        except ValueError as e:
            raise ContainerError(f"invalid fixed-point format in container: {e}") from None
    elif dtype != DTYPE_F32:
        raise ContainerError(f"unknown CTEN dtype code {dtype}")
    (rank,) = r.unpack("B")
    dims = r.unpack(f"{rank}I") if rank else ()
    count = int(np.prod(dims, dtype=np.int64))
    if r.remaining != 4 * count:
        raise ContainerError(f"payload is {r.remaining} bytes, expected {4 * count}")
    if q is None:
        return r.array("<f4", count).astype(np.float32).reshape(dims)
    raw = r.array("<i4", count).astype(np.int64).reshape(dims)
    try:
        return FixedTensor(q, raw)
    except ValueError as e:
        raise ContainerError(str(e)) from None


def write_cten(path: str, t) -> None:
    with open(path, "wb") as f:
        f.write(encode_cten(t))


def read_cten(path: str):
    with open(path, "rb") as f:
        return decode_cten(f.read())


# --- CNW1 ------------------------------------------------------------------


@dataclass
class LayerRecord:
    name: str
    kind: LayerKind
    kernel: np.ndarray
    bias: np.ndarray


def _records(net: Network | QuantizedNetwork) -> list[LayerRecord]:
    recs = [LayerRecord("encoder", LayerKind.CONV, net.encoder.kernel, net.encoder.bias)]
    for i, b in enumerate(net.blocks):
        recs.append(LayerRecord(f"block{i}.dense", LayerKind.BLOCK_DENSE, b.dense3.kernel,
                                b.dense3.bias))
        recs.append(LayerRecord(f"block{i}.dilated", LayerKind.BLOCK_DILATED, b.dilated3.kernel,
                                b.dilated3.bias))
    recs.append(LayerRecord("output", LayerKind.OUTPUT, net.output.kernel, net.output.bias))
    return recs


def encode_cnw(net: Network | QuantizedNetwork) -> bytes:
    fixed = isinstance(net, QuantizedNetwork)
    recs = _records(net)
    parts = [CNW_MAGIC, struct.pack("<I", len(recs))]
    for rec in recs:
        name = rec.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B4I", rec.kind, *rec.kernel.shape))
        if fixed:
            q = net.weight_format
            parts.append(struct.pack("<BB", q.total_bits, q.fraction_bits))
            for a in (rec.kernel, rec.bias):
                a = np.asarray(a, dtype=np.int64)
                if a.size and (a.min() < q.raw_min or a.max() > q.raw_max):
                    raise ContainerError(f"{rec.name}: raw value outside {q}")
                parts.append(a.astype("<i4").tobytes())
        else:
            parts.append(struct.pack("<BB", 0, 0))
            parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (rec.kernel, rec.bias)]
    if fixed:
        qa = net.activation_format
        parts.append(QACT_MAGIC + struct.pack("<BB", qa.total_bits, qa.fraction_bits))
    return b"".join(parts)


def decode_cnw(data: bytes) -> Network | QuantizedNetwork:
    r = _Reader(data)
    if r.take(4) != CNW_MAGIC:
        raise ContainerError("not a CNW1 container (bad magic)")
    (count,) = r.unpack("I")
    recs, formats = [], set()
    for _ in range(count):
        (name_len,) = r.unpack("H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("layer name is not valid UTF-8") from None
        kind_code, o, i, kh, kw = r.unpack("B4I")
        try:
            kind = LayerKind(kind_code)
        except ValueError:
            raise ContainerError(f"{name}: unknown layer kind {kind_code}") from None
        n, f = r.unpack("BB")
        formats.add((n, f))
        if n == 0:
            kernel = r.array("<f4", o * i * kh * kw).astype(np.float64)
            bias = r.array("<f4", o).astype(np.float64)
        else:
            try:
                q = QFormat(n, f)
            except ValueError as e:
                raise ContainerError(f"{name}: {e}") from None
            kernel = r.array("<i4", o * i * kh * kw).astype(np.int64)
            bias = r.array("<i4", o).astype(np.int64)
            if min(kernel.min(initial=0), bias.min(initial=0)) < q.raw_min or \
                    max(kernel.max(initial=0), bias.max(initial=0)) > q.raw_max:
                raise ContainerError(f"{name}: raw value does not fit in {q}")
        recs.append(LayerRecord(name, kind, kernel.reshape(o, i, kh, kw), bias))
    qa = ACTIVATION_FORMAT
    if r.remaining:
        if r.take(4) != QACT_MAGIC:
            raise ContainerError("unexpected trailing bytes after the last layer")
        try:
            qa = QFormat(*r.unpack("BB"))
        except ValueError as e:
            raise ContainerError(f"activation format: {e}") from None
        if r.remaining:
            raise ContainerError("unexpected trailing bytes after the activation format")
    if len(formats) > 1:
        raise ContainerError("layers disagree on the weight format")
    return _assemble(recs, formats.pop() if formats else (0, 0), qa)


def _assemble(recs: list[LayerRecord], fmt: tuple[int, int], qa: QFormat):
    kinds = [r.kind for r in recs]
    n_blocks = (len(recs) - 2) // 2
    expected = ([LayerKind.CONV] + [LayerKind.BLOCK_DENSE, LayerKind.BLOCK_DILATED] * n_blocks
                + [LayerKind.OUTPUT])
    if len(recs) < 2 or kinds != expected:
        raise ContainerError("layer kinds are not encoder, block pairs, output")

    def conv(rec):
        return ConvParams(rec.kernel, rec.bias, _DILATION[rec.kind])
    try:
        enc = conv(recs[0])
        blocks = [ChipNetBlockParams(conv(recs[1 + 2 * k]), conv(recs[2 + 2 * k]))
                  for k in range(n_blocks)]
        out = conv(recs[-1])
        if fmt[0] == 0:
            return Network(enc, blocks, out)
        Network(enc, blocks, out)  # topology check
        return QuantizedNetwork(enc, blocks, out, QFormat(*fmt), qa)
    except ValueError as e:
        raise ContainerError(f"inconsistent layer shapes: {e}") from None


def write_cnw(path: str, net: Network | QuantizedNetwork) -> None:
    with open(path, "wb") as f:
        f.write(encode_cnw(net))


def read_cnw(path: str) -> Network | QuantizedNetwork:
    with open(path, "rb") as f:
        return decode_cnw(f.read())
