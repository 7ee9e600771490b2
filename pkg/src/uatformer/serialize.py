"""Binary model files and CSV tables.

Model file layout (all little-endian)::

    magic      5 bytes  b"UATT1"
    version    u32
    header     10 x u32: n, d, h, d_k, d_v, d_out, d_ff, flags, M, scale_dim
               f64: layernorm eps
    payload    f64, row-major, in this order:
               per head: wq (d x d_k), wk (d x d_k), wv (d x d_v)
               wo (h*d_v x d_out), w1 (d_out x d_ff), b1 (d_ff),
               w2 (d_ff x d_out), b2 (d_out)
               if flags & LAYERNORM: ln1 gain, ln1 bias, ln2 gain, ln2 bias (d_out each)
    lookup     only if flags & LOOKUP:
               u32: D_in, D_out, mode, len(in_shape), in_shape..., len(out_shape),
                    out_shape..., len(resolution), resolution...
               f64: beta, self_penalty, delta, margin, margin_fraction,
                    measured_sup_error (NaN if unset), analytic_bound (NaN if unset)
               f64: centroids (M x D_in), outputs (M x D_out), memory (M x d)

``n`` is the nominal sequence length (0 when the block accepts any length).
"""

import csv
import io
import math
import os
import struct
import tempfile
from typing import List, Sequence, Union

import numpy as np

from .construct import PER_REGION, SINGLE_HEAD, CertifiedModel, LookupSpec
from .transformer import BlockParams, FfnParams, HeadParams, MhaParams

MAGIC = b"UATT1"
VERSION = 1
FLAG_RESIDUAL = 1
FLAG_LAYERNORM = 2
FLAG_LOOKUP = 4
_HEADER = struct.Struct("<10Id")
_MODES = {SINGLE_HEAD: 0, PER_REGION: 1}


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"model file payload needs {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class CsvError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _block_arrays(p: BlockParams):
    return list(p.named_arrays().values())


def model_to_bytes(model: Union[BlockParams, CertifiedModel], n: int = 0) -> bytes:
    lookup = isinstance(model, CertifiedModel)
    p = model.block if lookup else model
    m = model.spec.count if lookup else 0
    if lookup and not n:
        n = 1 + m
    flags = (FLAG_RESIDUAL * p.use_residual) | (FLAG_LAYERNORM * p.use_layernorm) | (FLAG_LOOKUP * lookup)
    mha = p.mha
    header = _HEADER.pack(n, mha.d_in, len(mha.heads), mha.d_k, mha.d_v, mha.d_out,
                          p.ffn.w1.shape[1], flags, m, p.scale_dim, p.ln_eps)
    parts = [MAGIC, struct.pack("<I", VERSION), header]
    parts += [_f64(a) for a in _block_arrays(p)]
    if lookup:
        s = model.spec
        ints = [s.centroids.shape[1], s.outputs.shape[1], _MODES[model.mode]]
        for shape in (s.in_shape, s.out_shape, model.resolution or ()):
            ints += [len(shape), *shape]
        parts.append(struct.pack(f"<{len(ints)}I", *ints))
        nan = float("nan")
        scalars = [s.beta, s.self_penalty, s.delta, s.margin, s.margin_fraction,
                   nan if model.measured_sup_error is None else model.measured_sup_error,
                   nan if model.analytic_bound is None else model.analytic_bound]
        parts.append(struct.pack("<7d", *scalars))
        parts += [_f64(s.centroids), _f64(s.outputs), _f64(model.memory)]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start

    def take(self, nbytes: int, expected_total: int) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise TruncatedFileError(expected_total, len(self.data))
        out = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def u32(self, count, expected_total):
        return list(struct.unpack(f"<{count}I", self.take(4 * count, expected_total)))

    def f64(self, shape, expected_total):
        count = int(np.prod(shape))
        raw = self.take(8 * count, expected_total)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def model_from_bytes(data: bytes) -> Union[BlockParams, CertifiedModel]:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a model file: magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    fixed = len(MAGIC) + 4 + _HEADER.size
    if len(data) < len(MAGIC) + 4:
        raise TruncatedFileError(fixed, len(data))
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, this reader supports {VERSION}")
    if len(data) < fixed:
        raise TruncatedFileError(fixed, len(data))
    n, d, h, dk, dv, dout, dff, flags, m, scale_dim, ln_eps = _HEADER.unpack_from(data, len(MAGIC) + 4)
    layernorm, lookup = bool(flags & FLAG_LAYERNORM), bool(flags & FLAG_LOOKUP)

    shapes = [(d, dk), (d, dk), (d, dv)] * h + [(h * dv, dout), (dout, dff), (dff,), (dff, dout), (dout,)]
    if layernorm:
        shapes += [(dout,)] * 4
    block_bytes = 8 * sum(int(np.prod(s)) for s in shapes)
    expected = fixed + block_bytes
    r = _Reader(data, fixed)
    arrays = [r.f64(s, expected) for s in shapes]
    heads = [HeadParams(*arrays[3 * j:3 * j + 3]) for j in range(h)]
    rest = arrays[3 * h:]
    ln = {}
    if layernorm:
        ln = dict(zip(("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"), rest[5:9]))
    block = BlockParams(MhaParams(heads, rest[0]), FfnParams(*rest[1:5]), use_residual=bool(flags & FLAG_RESIDUAL),
                        use_layernorm=layernorm, scale_dim=scale_dim, ln_eps=ln_eps, **ln)
    if not lookup:
        if r.pos != len(data):
            raise TruncatedFileError(expected, len(data))
        return block

    # lookup section: variable-length integer header first
    d_in, d_out, mode = r.u32(3, expected + 12)
    shapes_out = []
    for _ in range(3):
        (k,) = r.u32(1, r.pos + 4)
        shapes_out.append(tuple(r.u32(k, r.pos + 4 * k)))
    in_shape, out_shape, resolution = shapes_out
    total = r.pos + 7 * 8 + 8 * (m * d_in + m * d_out + m * d)
    beta, penalty, delta, margin, frac, measured, bound = struct.unpack("<7d", r.take(56, total))
    centroids = r.f64((m, d_in), total)
    outputs = r.f64((m, d_out), total)
    memory = r.f64((m, d), total)
    if r.pos != len(data):
        raise TruncatedFileError(total, len(data))
    spec = LookupSpec(centroids, outputs, beta, penalty, delta, margin, frac, in_shape, out_shape)
    mode_name = {v: k for k, v in _MODES.items()}.get(mode)
    if mode_name is None:
        raise ModelFileError(f"unknown construction mode code {mode}")
    return CertifiedModel(
        block, memory, spec, mode_name,
        measured_sup_error=None if math.isnan(measured) else measured,
        analytic_bound=None if math.isnan(bound) else bound,
        resolution=resolution or None,
    )


def save_model(model, path, n: int = 0):
    atomic_write_bytes(path, model_to_bytes(model, n))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        # repr is the shortest string that parses back to the same double
        return repr(float(value))
    return str(value)


def csv_text(table: Sequence[Sequence]) -> str:
    if not table:
        raise CsvError("table needs at least a header row")
    width = len(table[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    for i, row in enumerate(table):
        if len(row) != width:
            raise CsvError(f"row {i} has {len(row)} fields, header has {width}")
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def emit_csv(table: Sequence[Sequence], path):
    atomic_write_text(path, csv_text(table))


def read_csv(path) -> List[List[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))
