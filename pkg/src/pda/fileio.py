"""Binary record container, training logs, manifests and config files.

A file is a sequence of records.  Each record is a 33-byte header followed by
its payload::

    magic    4s   b"PDAE"
    version  u32
    tag      u32  section tag (TAGS)
    rows     u64
    cols     u64
    dtype    u8   DTYPES
    crc      u32  crc32 of the 29 bytes above

All integers are little-endian.  Float payloads are row-major ``rows * cols``
values.  A label payload is ``count u64`` followed by ``count`` u32 ids.  A
metadata payload is ``rows`` bytes of UTF-8 JSON.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

MAGIC = b"PDAE"
VERSION = 1
TAGS = {"embeddings": 1, "labels": 2, "weights": 3, "bank": 4, "checkpoint": 5,
        "eval_labels": 6, "metadata": 7}
TAG_NAMES = {v: k for k, v in TAGS.items()}
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u4"), 4: np.dtype("u1")}
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_HEAD = struct.Struct("<4sIIQQB")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size + _CRC.size
LABEL_TAGS = (TAGS["labels"], TAGS["eval_labels"])


@dataclass
class Record:
    tag: int
    data: object            # ndarray for numeric records, dict for metadata
    offset: int = 0

    @property
    def section(self):
        return TAG_NAMES[self.tag]


def _header(tag, rows, cols, code):
    head = _HEAD.pack(MAGIC, VERSION, tag, rows, cols, code)
    return head + _CRC.pack(zlib.crc32(head))


def encode_matrix(matrix, tag="embeddings"):
    m = np.asarray(matrix)
    if m.dtype not in DTYPE_CODES:
        m = m.astype(np.float64)
    if m.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError("refusing to write non-finite values")
    code = DTYPE_CODES[m.dtype]
    payload = np.ascontiguousarray(m, dtype=DTYPES[code]).tobytes()
    return _header(TAGS[tag], m.shape[0], m.shape[1], code) + payload


def encode_labels(labels, tag="labels"):
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DataError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() > np.iinfo(np.uint32).max):
        raise DataError("label ids must fit in u32")
    payload = struct.pack("<Q", y.size) + y.astype("<u4").tobytes()
    return _header(TAGS[tag], y.size, 1, 3) + payload


def encode_metadata(meta: dict):
    blob = json.dumps(meta, sort_keys=True).encode()
    return _header(TAGS["metadata"], len(blob), 1, 4) + blob


def decode(buf: bytes):
    """Parse every record in ``buf``; any inconsistency raises FormatError."""
    records, pos = [], 0
    while pos < len(buf):
        if len(buf) - pos < HEADER_SIZE:
            raise FormatError(f"truncated header at offset {pos}")
        head = buf[pos:pos + _HEAD.size]
        magic, version, tag, rows, cols, code = _HEAD.unpack(head)
        (crc,) = _CRC.unpack_from(buf, pos + _HEAD.size)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset {pos}")
        if zlib.crc32(head) != crc:
            raise FormatError(f"header checksum mismatch at offset {pos}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version} at offset {pos + 4}")
        if tag not in TAG_NAMES:
            raise FormatError(f"unknown section tag {tag} at offset {pos + 8}")
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} at offset {pos + 28}")
        start = pos + HEADER_SIZE
        if tag in LABEL_TAGS:
            if code != 3 or cols != 1:
                raise FormatError(f"label section must be u32 x 1 at offset {pos}")
            size = 8 + 4 * rows
        elif tag == TAGS["metadata"]:
            if code != 4:
                raise FormatError(f"metadata section must be bytes at offset {pos}")
            size = rows
        else:
            if code not in (1, 2):
                raise FormatError(f"numeric section must be f32 or f64 at offset {pos}")
            size = rows * cols * DTYPES[code].itemsize
        end = start + size
        if end > len(buf):
            raise FormatError(f"payload at offset {start} declares {size} bytes, "
                              f"only {len(buf) - start} present")
        body = buf[start:end]
        if tag in LABEL_TAGS:
            (count,) = struct.unpack_from("<Q", body)
            if count != rows:
                raise FormatError(f"label count {count} != header rows {rows} at offset {start}")
            data = np.frombuffer(body, dtype="<u4", offset=8).astype(np.int64)
        elif tag == TAGS["metadata"]:
            try:
                data = json.loads(body.decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"unreadable metadata at offset {start}: {exc}") from None
        else:
            data = np.frombuffer(body, dtype=DTYPES[code]).reshape(rows, cols).copy()
        records.append(Record(tag, data, pos))
        pos = end
    return records


def write_records(path, chunks):
    """Write pre-encoded records atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def read_records(path):
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    if not buf:
        raise FormatError(f"{path}: empty file at offset 0")
    try:
        return decode(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_embeddings(path, matrix, labels=None, eval_labels=None):
    """Matrix plus optional training labels and evaluation-only labels."""
    chunks = [encode_matrix(matrix)]
    n = np.asarray(matrix).shape[0]
    for y, tag in ((labels, "labels"), (eval_labels, "eval_labels")):
        if y is not None:
            if len(y) != n:
                raise DataError(f"{tag}: {len(y)} ids for {n} rows")
            chunks.append(encode_labels(y, tag))
    write_records(path, chunks)


def read_embeddings(path, with_eval_labels=False):
    """Return ``(matrix, labels or None)``; add eval labels only when asked.

    Training code calls this with the default, so ground-truth target labels
    stored under the evaluation tag are never handed to it.
    """
    records = read_records(path)
    mats = [r for r in records if r.tag == TAGS["embeddings"]]
    if len(mats) != 1:
        raise FormatError(f"{path}: expected one embeddings section, found {len(mats)}")
    matrix = mats[0].data
    labels = next((r.data for r in records if r.tag == TAGS["labels"]), None)
    if not with_eval_labels:
        return matrix, labels
    return matrix, labels, next((r.data for r in records if r.tag == TAGS["eval_labels"]), None)


def save_arrays(path, arrays: dict, tag, meta=None):
    """Named arrays of any shape; names and shapes travel in a metadata record."""
    names = sorted(arrays)
    header = {"names": names, "shapes": [list(np.shape(arrays[n])) for n in names],
              "meta": meta or {}}
    chunks = [encode_metadata(header)]
    for n in names:
        a = np.asarray(arrays[n], dtype=np.float64)
        chunks.append(encode_matrix(a.reshape(1, -1) if a.ndim != 2 else a, tag))
    write_records(path, chunks)


def load_arrays(path, tag):
    records = read_records(path)
    if not records or records[0].tag != TAGS["metadata"]:
        raise FormatError(f"{path}: missing metadata section at offset 0")
    header = records[0].data
    body = [r for r in records[1:] if r.tag == TAGS[tag]]
    if len(body) != len(header.get("names", [])):
        raise FormatError(f"{path}: metadata lists {len(header.get('names', []))} arrays, "
                          f"found {len(body)} {tag} sections")
    arrays = {}
    for name, shape, rec in zip(header["names"], header["shapes"], body):
        if int(np.prod(shape)) != rec.data.size:
            raise FormatError(f"{path}: array {name!r} at offset {rec.offset} has "
                              f"{rec.data.size} values, shape {shape}")
        arrays[name] = rec.data.reshape(shape)
    return arrays, header.get("meta", {})


def save_weights(path, weights):
    save_arrays(path, weights.to_arrays(), "weights", {"encoder": weights.config.to_dict()})


def load_weights(path):
    from .encoder import EncoderConfig, FrozenWeights

    arrays, meta = load_arrays(path, "weights")
    return FrozenWeights.from_arrays(EncoderConfig(**meta["encoder"]), arrays)


def save_banks(path, source, target):
    save_arrays(path, {"source": source.centroids, "target": target.centroids}, "bank",
                {"shots": source.shots})


def load_banks(path):
    from .alignment import FeatureBank

    arrays, meta = load_arrays(path, "bank")
    shots = meta.get("shots", 0)
    k = arrays["source"].shape[0]
    return (FeatureBank(arrays["source"], "source", shots, [[]] * k),
            FeatureBank(arrays["target"], "target", shots, [[]] * k))


def save_checkpoint(path, state):
    save_arrays(path, state.arrays(), "checkpoint", state.meta())


def load_checkpoint(path):
    from .training import CheckpointState

    arrays, meta = load_arrays(path, "checkpoint")
    return CheckpointState.from_parts(meta, arrays)


# ---------------------------------------------------------------- config text

def _coerce(kind, raw, key):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ParameterError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config_text(text, cls):
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ParameterError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    return values


def load_config(path=None, cls=None, overrides=None):
    """Defaults, then file values, then ``overrides`` (already typed)."""
    from .training import TrainConfig

    cls = cls or TrainConfig
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(), cls))
        except FileNotFoundError:
            raise DataError(f"no such config file: {path}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls(**values)


def config_to_text(config):
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in dataclasses.asdict(config).items())


# ---------------------------------------------------------------- training log

LOG_COLUMNS = ("step", "lr", "L_x", "L_u", "L_xa", "L_ua", "total", "n_pseudo_kept")


class TrainLog:
    """One tab-separated line per step, after a ``#``-prefixed config echo."""

    def __init__(self, path, config, encoder=None):
        self.fh = open(path, "w")
        echo = {"train": dataclasses.asdict(config)}
        if encoder is not None:
            echo["encoder"] = encoder.to_dict()
        self.fh.write("# config " + json.dumps(echo, sort_keys=True) + "\n")
        self.fh.write("# " + "\t".join(LOG_COLUMNS) + "\n")

    def __call__(self, report):
        self.fh.write("\t".join(repr(v) for v in report.as_row()) + "\n")

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_train_log(path):
    """Return ``(config echo dict, list of row dicts)``."""
    echo, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# config "):
            echo = json.loads(line[len("# config "):])
        elif line and not line.startswith("#"):
            parts = line.split("\t")
            if len(parts) != len(LOG_COLUMNS):
                raise FormatError(f"{path}: log row has {len(parts)} fields")
            row = dict(zip(LOG_COLUMNS, parts))
            row = {k: (int(v) if k in ("step", "n_pseudo_kept") else float(v))
                   for k, v in row.items()}
            rows.append(row)
    return echo, rows


# ---------------------------------------------------------------- manifest

MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    class_names: list
    source: str
    target: str
    kind: str = "raw"
    n_patches: int = 1
    encoder: str | None = None
    format_version: int = MANIFEST_VERSION
    root: str = "."

    @property
    def n_classes(self):
        return len(self.class_names)

    def resolve(self, rel):
        return str(Path(self.root) / rel)

    def to_json(self):
        d = dataclasses.asdict(self)
        d.pop("root")
        d["source"] = {"path": self.source, "labeled": True}
        d["target"] = {"path": self.target, "labeled": False}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, validate=True):
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"no such manifest: {path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
        if d.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {d.get('format_version')}")
        try:
            m = cls(class_names=list(d["class_names"]), source=d["source"]["path"],
                    target=d["target"]["path"], kind=d.get("kind", "raw"),
                    n_patches=int(d.get("n_patches", 1)), encoder=d.get("encoder"),
                    root=str(Path(path).parent))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: missing manifest field {exc}") from None
        if validate:
            m.validate()
        return m

    def validate(self):
        if self.kind not in ("raw", "embedding"):
            raise DataError(f"unknown feature kind {self.kind!r}")
        if self.n_classes < 2:
            raise DataError("manifest needs at least 2 class names")
        for rel in (self.source, self.target) + ((self.encoder,) if self.encoder else ()):
            if not Path(self.resolve(rel)).exists():
                raise DataError(f"manifest references missing file {rel}")
        _, y = read_embeddings(self.resolve(self.source))
        if y is None:
            raise DataError("source file carries no labels")
        if y.size and y.max() >= self.n_classes:
            raise DataError(f"source label {int(y.max())} outside {self.n_classes} classes")
        read_embeddings(self.resolve(self.target))

    def _load(self, rel, with_eval=False):
        out = read_embeddings(self.resolve(rel), with_eval_labels=with_eval)
        X = out[0]
        if self.kind == "raw":
            if X.shape[1] % self.n_patches:
                raise DataError(f"width {X.shape[1]} is not a multiple of n_patches")
            X = X.reshape(len(X), self.n_patches, -1)
        return (X,) + tuple(out[1:])

    def load_training(self):
        """Source inputs + labels and target inputs; no target labels of any kind."""
        Xs, ys = self._load(self.source)
        Xt, _ = self._load(self.target)
        return Xs, ys, Xt

    def load_eval_labels(self):
        """Ground truth for evaluation: source labels, target eval-only labels."""
        _, ys, _ = self._load(self.source, with_eval=True)
        _, _, yt = self._load(self.target, with_eval=True)
        return ys, yt
