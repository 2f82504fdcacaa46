"""Raw tabular data -> per-field vocabularies -> global embedding-row indices.

Also holds the synthetic planted-structure generator used for desk-scale
experiments and the ``OEDS`` binary cache for encoded datasets.
"""
import csv
import json
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .nn import make_rng

CATEGORICAL = "categorical"
NUMERIC = "numeric"
OOV = 0

OEDS_MAGIC = b"OEDS"
OEDS_VERSION = 1

_LOG_BASES = {"natural": math.e, "e": math.e, "2": 2.0, "e2": 2.0, "10": 10.0}


class DataError(ValueError):
    pass


class CorruptFileError(DataError):
    pass


@dataclass
class RawDataset:
    rows: list  # (label, tuple of n tokens)
    field_names: list
    field_kinds: list

    def __post_init__(self):
        n = len(self.field_names)
        if len(self.field_kinds) != n:
            raise DataError("field_kinds and field_names differ in length")
        for i, (label, values) in enumerate(self.rows):
            if label not in (0, 1):
                raise DataError(f"row {i}: label must be 0 or 1, got {label!r}")
            if len(values) != n:
                raise DataError(f"row {i}: expected {n} values, got {len(values)}")

    @property
    def n_fields(self):
        return len(self.field_names)

    def __len__(self):
        return len(self.rows)


@dataclass
class FieldSchema:
    names: list
    kinds: list
    vocabs: list  # per field: token -> local index (>= 1)
    cardinalities: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cardinalities = np.array([len(v) + 1 for v in self.vocabs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(np.int64)
        self._inverse = [None] * len(self.vocabs)

    @property
    def n_fields(self):
        return len(self.names)

    @property
    def total(self):
        return int(self.cardinalities.sum())

    def row_fields(self):
        """Field id of every global embedding row."""
        return np.repeat(np.arange(self.n_fields, dtype=np.int64), self.cardinalities)

    def field_range(self, i):
        start = int(self.offsets[i])
        return start, start + int(self.cardinalities[i])

    def decode(self, field_id, global_index):
        """Token for a global row index, or ``None`` for the OOV slot."""
        if self._inverse[field_id] is None:
            self._inverse[field_id] = {v: k for k, v in self.vocabs[field_id].items()}
        local = int(global_index) - int(self.offsets[field_id])
        if not 0 <= local < self.cardinalities[field_id]:
            raise DataError(f"index {global_index} outside field {field_id}")
        return self._inverse[field_id].get(local)

    def to_dict(self):
        return {"names": list(self.names), "kinds": list(self.kinds),
                "vocabs": [sorted(v.items(), key=lambda kv: kv[1]) for v in self.vocabs]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["names"]), list(d["kinds"]), [{k: int(i) for k, i in v} for v in d["vocabs"]])

    def __eq__(self, other):
        return isinstance(other, FieldSchema) and self.to_dict() == other.to_dict()

    def summary(self):
        lines = [f"fields: {self.n_fields}    |f|: {self.total}"]
        for name, kind, card, off in zip(self.names, self.kinds, self.cardinalities, self.offsets):
            lines.append(f"  {name:<16} {kind:<12} cardinality={int(card):<8} offset={int(off)}")
        return "\n".join(lines)


@dataclass
class EncodedDataset:
    labels: np.ndarray  # (N,) int8
    idx: np.ndarray  # (N, n) int64 global row ids

    def __len__(self):
        return len(self.labels)

    def subset(self, order):
        return EncodedDataset(self.labels[order], self.idx[order])


def discretize_numeric(x, log_base="natural"):
    """Bucket a numeric value as ``floor(log(x)**2)`` for x > 2, else ``"1"``."""
    try:
        x = float(x)
    except (TypeError, ValueError):
        return "1"
    if not math.isfinite(x) or x <= 2:
        return "1"
    try:
        base = _LOG_BASES[str(log_base)]
    except KeyError:
        raise DataError(f"unknown log base {log_base!r}") from None
    return str(int(math.floor(math.log(x, base) ** 2)))


def build_schema(raw, min_count=2):
    """Vocabulary per field: tokens seen at least ``min_count`` times, ordered
    by descending count then token. Local index 0 is the OOV slot."""
    if len(raw) == 0:
        raise DataError("empty input")
    if min_count < 1:
        raise DataError("min_count must be positive")
    vocabs = []
    for i in range(raw.n_fields):
        counts = Counter(values[i] for _, values in raw.rows)
        kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                      key=lambda tok: (-counts[tok], tok))
        vocabs.append({tok: j + 1 for j, tok in enumerate(kept)})
    return FieldSchema(list(raw.field_names), list(raw.field_kinds), vocabs)


def encode(raw, schema):
    if raw.n_fields != schema.n_fields:
        raise DataError(f"dataset has {raw.n_fields} fields, schema has {schema.n_fields}")
    n = schema.n_fields
    idx = np.empty((len(raw), n), dtype=np.int64)
    labels = np.empty(len(raw), dtype=np.int8)
    offsets = [int(o) for o in schema.offsets]
    vocabs = schema.vocabs
    for r, (label, values) in enumerate(raw.rows):
        if len(values) != n:
            raise DataError(f"row {r}: expected {n} values, got {len(values)}")
        labels[r] = label
        for i in range(n):
            idx[r, i] = offsets[i] + vocabs[i].get(values[i], OOV)
    return EncodedDataset(labels, idx)


def split(ds, ratios=(0.8, 0.1, 0.1), seed=0):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three numbers summing to 1, got {ratios}")
    N = len(ds)
    if N < 10:
        raise DataError("dataset too small to split")
    order = make_rng(seed).permutation(N)
    n_train = int(math.floor(ratios[0] * N))
    n_val = int(math.floor(ratios[1] * N))
    return (ds.subset(order[:n_train]), ds.subset(order[n_train:n_train + n_val]),
            ds.subset(order[n_train + n_val:]))


@dataclass
class SynthSpec:
    n_fields: int = 8
    cardinalities: tuple = (200,) * 8
    n_informative_fields: int = 4
    n_rows: int = 50_000
    noise_level: float = 0.05
    zipf_exponent: float = 1.1
    signal: float = 1.5
    bias: float = -1.0

    @property
    def informative_fields(self):
        return list(range(self.n_informative_fields))


def synth_generate(spec, seed=0):
    """Labels follow a logistic model over hidden per-value weights of the
    first ``n_informative_fields`` fields; the remaining fields are drawn
    independently of the label. Field values follow a Zipf-like law so that
    frequencies span several orders of magnitude."""
    if spec.n_fields < 1 or spec.n_rows < 1:
        raise DataError("synthetic spec needs at least one field and one row")
    if len(spec.cardinalities) != spec.n_fields:
        raise DataError("one cardinality per field required")
    if not 0 <= spec.n_informative_fields <= spec.n_fields:
        raise DataError("n_informative_fields must be within [0, n_fields]")
    if not 0.0 <= spec.noise_level <= 1.0:
        raise DataError("noise_level must be within [0, 1]")
    rng = make_rng(seed, 17)
    cols = []
    logit = np.full(spec.n_rows, float(spec.bias))
    for i, card in enumerate(spec.cardinalities):
        p = 1.0 / np.arange(1, card + 1) ** spec.zipf_exponent
        p /= p.sum()
        values = rng.choice(card, size=spec.n_rows, p=p)
        weights = rng.normal(0.0, spec.signal, size=card)
        if i < spec.n_informative_fields:
            logit += weights[values]
        cols.append(values)
    prob = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(spec.n_rows) < prob).astype(np.int64)
    resample = rng.random(spec.n_rows) < spec.noise_level
    base_rate = labels.mean()
    coin = (rng.random(spec.n_rows) < base_rate).astype(np.int64)
    labels = np.where(resample, coin, labels)
    names = [f"f{i}" for i in range(spec.n_fields)]
    tokens = [[f"v{v}" for v in col] for col in cols]
    rows = [(int(labels[r]), tuple(tokens[i][r] for i in range(spec.n_fields)))
            for r in range(spec.n_rows)]
    return RawDataset(rows, names, [CATEGORICAL] * spec.n_fields)


def load_csv(path, numeric_fields=(), delimiter=",", log_base="natural"):
    """Read a delimited file with a header and a ``label`` column."""
    numeric_fields = set(numeric_fields)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty input") from None
        if "label" not in header:
            raise DataError(f"{path}: no 'label' column in header")
        li = header.index("label")
        names = [h for j, h in enumerate(header) if j != li]
        unknown = numeric_fields - set(names)
        if unknown:
            raise DataError(f"numeric fields not in header: {sorted(unknown)}")
        is_num = [name in numeric_fields for name in names]
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(rec)} columns, expected {len(header)}")
            try:
                label = int(float(rec[li]))
            except ValueError:
                raise DataError(f"{path}: line {line_no}: bad label {rec[li]!r}") from None
            vals = [v for j, v in enumerate(rec) if j != li]
            vals = tuple(discretize_numeric(v if v != "" else None, log_base) if num else v
                         for v, num in zip(vals, is_num))
            rows.append((label, vals))
    kinds = [NUMERIC if num else CATEGORICAL for num in is_num]
    return RawDataset(rows, names, kinds)


def write_csv(raw, path, delimiter=","):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["label", *raw.field_names])
        for label, values in raw.rows:
            w.writerow([label, *values])


def save_encoded(path, schema, ds):
    blob = json.dumps(schema.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    N, n = ds.idx.shape
    body = b"".join([
        OEDS_MAGIC, struct.pack("<II", OEDS_VERSION, len(blob)), blob,
        struct.pack("<QI", N, n),
        ds.labels.astype("<i1").tobytes(),
        ds.idx.astype("<i8").tobytes(),
    ])
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_encoded(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != OEDS_MAGIC:
        raise CorruptFileError(f"{path}: not an OEDS file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, blob_len = struct.unpack_from("<II", body, 4)
    if version != OEDS_VERSION:
        raise CorruptFileError(f"{path}: unsupported OEDS version {version}")
    pos = 12
    schema = FieldSchema.from_dict(json.loads(body[pos:pos + blob_len]))
    pos += blob_len
    N, n = struct.unpack_from("<QI", body, pos)
    pos += 12
    labels = np.frombuffer(body, dtype="<i1", count=N, offset=pos).astype(np.int8)
    pos += N
    idx = np.frombuffer(body, dtype="<i8", count=N * n, offset=pos).astype(np.int64).reshape(N, n)
    if pos + 8 * N * n != len(body):
        raise CorruptFileError(f"{path}: trailing or missing bytes")
    return schema, EncodedDataset(labels, idx)
