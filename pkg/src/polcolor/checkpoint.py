"""Binary "PCKP" model checkpoints.

Layout (little-endian)::

    b"PCKP" | version u16 | section*

    section := tag (4 ASCII bytes) | length u64 | payload (length bytes)

Sections, in write order:

* ``CONF``: UTF-8 ``key=value`` lines, sorted by key.  Floats are written
  with ``repr`` so they parse back exactly.
* ``PARM``: network parameters as an array list.
* ``QUNT``: u32 table count, then per table: u32 param id, u32 K,
  u8 uniform-fallback flag, K+1 edges and K centers as float64.
* ``NORM``: u32 feature count F, then F means and F standard deviations
  as float64.
* ``ADAM`` (optional): first moments then second moments as two array lists.

An array list is a u32 count followed by, per array, u32 ndim, ndim u32
dimensions and the row-major float64 data.  Parameters are widened to
float64 on disk and narrowed back to the training precision on load,
which is exact.  Unknown sections are rejected.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from . import quantizer
from .pipeline import ExtractorConfig, Model, ModelCheckpoint, NormStats, TrainConfig, TranslatorConfig

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save", "load", "to_bytes", "from_bytes"]

MAGIC = b"PCKP"
VERSION = 1
_SECTIONS = (b"CONF", b"PARM", b"QUNT", b"NORM", b"ADAM")


class CheckpointError(ValueError):
    pass


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _config_text(ck: ModelCheckpoint) -> bytes:
    t = ck.train
    conf = {
        "version": str(ck.version),
        "epochs_done": str(ck.epochs_done),
        "params.seed": str(ck.params.seed),
        "extractor.widths": _ints(ck.extractor.widths),
        "extractor.db_floor": repr(float(ck.extractor.db_floor)),
        "translator.trunk": _ints(ck.translator.trunk),
        "translator.head_hidden": str(ck.translator.head_hidden),
        "translator.heads": str(ck.translator.heads),
        "translator.bins": str(ck.translator.bins),
        "train.batch_pixels": str(t.batch_pixels),
        "train.patch": str(t.patch),
        "train.epochs": str(t.epochs),
        "train.seed": str(t.seed),
        "train.precision": t.precision,
        "train.learning_rate": repr(float(t.learning_rate)),
        "train.train_extractor": str(bool(t.train_extractor)).lower(),
    }
    if ck.adam is not None:
        a = ck.adam
        conf.update({
            "adam.step_count": str(a.step_count),
            "adam.beta1": repr(float(a.beta1)),
            "adam.beta2": repr(float(a.beta2)),
            "adam.epsilon": repr(float(a.epsilon)),
            "adam.learning_rate": repr(float(a.learning_rate)),
        })
    return "".join(f"{k}={conf[k]}\n" for k in sorted(conf)).encode("utf-8")


def _write_arrays(buf: io.BytesIO, arrays) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.astype("<f8").tobytes(order="C"))


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated {self.what} section")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def arrays(self) -> list[np.ndarray]:
        (count,) = self.unpack("I")
        out = []
        for _ in range(count):
            (ndim,) = self.unpack("I")
            shape = self.unpack(f"{ndim}I") if ndim else ()
            out.append(self.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape))
        return out

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise CheckpointError(f"{len(self.blob) - self.pos} stray bytes in {self.what} section")


def to_bytes(ck: ModelCheckpoint) -> bytes:
    sections = [(b"CONF", _config_text(ck))]

    buf = io.BytesIO()
    _write_arrays(buf, ck.params.arrays())
    sections.append((b"PARM", buf.getvalue()))

    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(ck.quantizers)))
    for t in ck.quantizers:
        buf.write(struct.pack("<IIB", t.param_id, t.k, int(t.uniform_fallback)))
        buf.write(t.edges.astype("<f8").tobytes())
        buf.write(t.centers.astype("<f8").tobytes())
    sections.append((b"QUNT", buf.getvalue()))

    buf = io.BytesIO()
    buf.write(struct.pack("<I", ck.norm.mean.size))
    buf.write(ck.norm.mean.astype("<f8").tobytes())
    buf.write(ck.norm.std.astype("<f8").tobytes())
    sections.append((b"NORM", buf.getvalue()))

    if ck.adam is not None:
        buf = io.BytesIO()
        _write_arrays(buf, ck.adam.first_moment)
        _write_arrays(buf, ck.adam.second_moment)
        sections.append((b"ADAM", buf.getvalue()))

    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<H", VERSION))
    for tag, payload in sections:
        out.write(tag + struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def _parse_conf(text: str) -> dict[str, str]:
    conf = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        conf[key] = value
    return conf


def _widths(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def from_bytes(blob: bytes) -> ModelCheckpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < 6:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    pos = 6
    sections: dict[bytes, bytes] = {}
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise CheckpointError("truncated section header")
        tag = blob[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", blob, pos + 4)
        pos += 12
        if tag not in _SECTIONS or tag in sections:
            raise CheckpointError(f"unexpected section {tag!r}")
        if pos + length > len(blob):
            raise CheckpointError(f"truncated {tag.decode('ascii')} section")
        sections[tag] = blob[pos:pos + length]
        pos += length
    missing = [t.decode() for t in _SECTIONS[:4] if t not in sections]
    if missing:
        raise CheckpointError(f"missing sections {missing}")

    try:
        conf = _parse_conf(sections[b"CONF"].decode("utf-8"))
        extractor = ExtractorConfig(_widths(conf["extractor.widths"]), float(conf["extractor.db_floor"]))
        translator = TranslatorConfig(
            _widths(conf["translator.trunk"]), int(conf["translator.head_hidden"]),
            int(conf["translator.heads"]), int(conf["translator.bins"]),
        )
        train = TrainConfig(
            int(conf["train.batch_pixels"]), int(conf["train.patch"]), int(conf["train.epochs"]),
            int(conf["train.seed"]), conf["train.precision"], float(conf["train.learning_rate"]),
            conf["train.train_extractor"] == "true",
        )
        epochs_done = int(conf["epochs_done"])
        seed = int(conf["params.seed"])
    except KeyError as exc:
        raise CheckpointError(f"missing config key {exc.args[0]}") from None

    dtype = train.dtype
    template = Model(extractor, translator).init_params(seed, dtype)
    r = _Reader(sections[b"PARM"], "PARM")
    arrays = r.arrays()
    r.done()
    expected = [a.shape for a in template.arrays()]
    if [a.shape for a in arrays] != expected:
        raise CheckpointError("parameter shapes do not match the configured architecture")
    params = template.with_arrays([a.astype(dtype) for a in arrays])

    r = _Reader(sections[b"QUNT"], "QUNT")
    (count,) = r.unpack("I")
    tables = []
    for _ in range(count):
        pid, k, fb = r.unpack("IIB")
        edges = r.floats(k + 1)
        centers = r.floats(k)
        tables.append(quantizer.QuantizerTable(pid, edges, centers, bool(fb)))
    r.done()
    if len(tables) != 9:
        raise CheckpointError(f"expected 9 quantizer tables, found {len(tables)}")

    r = _Reader(sections[b"NORM"], "NORM")
    (n,) = r.unpack("I")
    norm = NormStats(r.floats(n), r.floats(n))
    r.done()
    if n != extractor.n_features:
        raise CheckpointError("normalization statistics do not match the extractor")

    adam = None
    if b"ADAM" in sections:
        r = _Reader(sections[b"ADAM"], "ADAM")
        m = [a.astype(dtype) for a in r.arrays()]
        v = [a.astype(dtype) for a in r.arrays()]
        r.done()
        if [a.shape for a in m] != expected or [a.shape for a in v] != expected:
            raise CheckpointError("optimizer state does not match the parameters")
        adam = nn.AdamState(
            m, v, int(conf["adam.step_count"]), float(conf["adam.beta1"]), float(conf["adam.beta2"]),
            float(conf["adam.epsilon"]), float(conf["adam.learning_rate"]),
        )
    return ModelCheckpoint(extractor, translator, train, params, norm, tables, adam, epochs_done, version)


def save(path, ck: ModelCheckpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
