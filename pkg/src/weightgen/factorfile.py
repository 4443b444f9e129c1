"""Binary container for a generated layer's factor set.

Layout (little-endian):

    offset  size  field
    0       4     magic "ISGW"
    4       1     version, currently 1
    5       1     payload kind: 0 raw float64, 1 quantized codes
    6       1     level flags: bit0 intra active, bit1 cross active
    7       3     bit-widths q_basis, q_coeff, q_mixer (one byte each)
    10      20    u32 c_out, c_in, k, n_basis, n_cross
    30      ...   payloads in declaration order: basis, coeff, mixer
                  (only the active ones are present)

Raw payloads are C-order float64.  Quantized payloads store one float64
scale followed by int16 codes per tensor; loading reconstructs the grid
values, so a quantized round trip equals fake-quantizing the original
factors, and the generated weights are bit-identical to generating from
the original factors (re-quantization is a no-op).

Writes are atomic: the file appears under its final name only when
complete.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FactorFileError
from .generator import GenPlan, TwoLevelFactors, plan_layer
from .quantize import dequantize, quantize_codes

MAGIC = b"ISGW"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBBB5I")

KIND_RAW = 0
KIND_QUANTIZED = 1


def _payload_tensors(factors: TwoLevelFactors):
    out = []
    if factors.basis is not None:
        out.append(("basis", factors.basis, factors.plan.q_basis))
    out.append(("coeff", factors.coeff, factors.plan.q_coeff))
    if factors.mixer is not None:
        out.append(("mixer", factors.mixer, factors.plan.q_mixer))
    return out


def factors_to_bytes(factors: TwoLevelFactors, quantized: bool = False) -> bytes:
    factors.validate()
    p = factors.plan
    flags = (1 if p.intra_active else 0) | (2 if p.cross_active else 0)
    kind = KIND_QUANTIZED if quantized else KIND_RAW
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, kind, flags, p.q_basis, p.q_coeff, p.q_mixer,
            p.c_out, p.c_in, p.k, p.n_basis, p.n_cross,
        )
    ]
    for _, tensor, bits in _payload_tensors(factors):
        if quantized:
            codes, scale = quantize_codes(tensor, bits)
            parts.append(struct.pack("<d", scale))
            parts.append(codes.astype("<i2").tobytes())
        else:
            parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return b"".join(parts)


def factors_from_bytes(data: bytes) -> TwoLevelFactors:
    if len(data) < _HEADER.size:
        raise FactorFileError(
            f"container truncated: {len(data)} bytes, header needs {_HEADER.size}"
        )
    (magic, version, kind, flags, q_basis, q_coeff, q_mixer,
     c_out, c_in, k, n_basis, n_cross) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FactorFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FactorFileError(f"unsupported container version {version}")
    if kind not in (KIND_RAW, KIND_QUANTIZED):
        raise FactorFileError(f"unknown payload kind {kind}")
    try:
        plan = plan_layer(c_out, c_in, k, n_basis, n_cross, q_basis, q_coeff, q_mixer)
    except Exception as exc:
        raise FactorFileError(f"invalid header fields: {exc}") from exc
    want_flags = (1 if plan.intra_active else 0) | (2 if plan.cross_active else 0)
    if flags != want_flags:
        raise FactorFileError(
            f"level flags {flags:#x} contradict the stored dimensions "
            f"(expected {want_flags:#x})"
        )

    shapes = []
    if plan.intra_active:
        shapes.append(("basis", (plan.n_cross, plan.n_basis, plan.kk)))
        shapes.append(("coeff", (plan.n_cross, plan.c_in, plan.n_basis)))
    else:
        shapes.append(("coeff", (plan.n_cross, plan.c_in, plan.kk)))
    if plan.cross_active:
        shapes.append(("mixer", (plan.c_out, plan.n_cross)))

    offset = _HEADER.size
    loaded = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        if kind == KIND_QUANTIZED:
            need = 8 + 2 * count
            if offset + need > len(data):
                raise FactorFileError(
                    f"container truncated inside {name}: need {need} bytes at "
                    f"offset {offset}, have {len(data) - offset}"
                )
            (scale,) = struct.unpack_from("<d", data, offset)
            codes = np.frombuffer(
                data, dtype="<i2", count=count, offset=offset + 8
            ).astype(np.int64)
            bits = {"basis": plan.q_basis, "coeff": plan.q_coeff,
                    "mixer": plan.q_mixer}[name]
            try:
                tensor = dequantize(codes, scale, bits).reshape(shape)
            except Exception as exc:
                raise FactorFileError(f"invalid codes in {name}: {exc}") from exc
            offset += need
        else:
            need = 8 * count
            if offset + need > len(data):
                raise FactorFileError(
                    f"container truncated inside {name}: need {need} bytes at "
                    f"offset {offset}, have {len(data) - offset}"
                )
            tensor = (
                np.frombuffer(data, dtype="<f8", count=count, offset=offset)
                .astype(np.float64)
                .reshape(shape)
            )
            offset += need
        loaded[name] = tensor
    if offset != len(data):
        raise FactorFileError(
            f"{len(data) - offset} trailing bytes after the last payload"
        )
    factors = TwoLevelFactors(
        plan=plan,
        basis=loaded.get("basis"),
        coeff=loaded["coeff"],
        mixer=loaded.get("mixer"),
    )
    try:
        factors.validate()
    except Exception as exc:
        raise FactorFileError(f"loaded factors are invalid: {exc}") from exc
    return factors


def save_factors(path, factors: TwoLevelFactors, quantized: bool = False) -> None:
    data = factors_to_bytes(factors, quantized=quantized)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_factors(path) -> TwoLevelFactors:
    with open(path, "rb") as fh:
        return factors_from_bytes(fh.read())
