"""Raw TSV → vocabulary → encoded binary datasets, plus synthetic parity data.

Raw format: one example per line, TAB separated, label first, then one token
per schema field. Multivalent tokens are comma-separated lists; an empty
token means "missing".

Vocabulary indices are per field. Index 0 is "unknown" (rare or unseen
values), index 1 is "missing", retained values get indices 2, 3, ... in
sorted order of their raw string.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("categorical", "numeric", "multivalent")
UNKNOWN, MISSING = 0, 1
N_RESERVED = 2
DEFAULT_MAX_VALUES = 10

DATA_MAGIC = b"FINTDATA"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIQI")


class DataError(ValueError):
    """Input data or schema violates the expected format."""


class MalformedRow(DataError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: str
    vocab_size: int = 0
    max_values: int = DEFAULT_MAX_VALUES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "multivalent" and not 1 <= self.max_values <= 255:
            raise DataError(f"field {self.name!r}: max_values must be in [1, 255]")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind != "numeric":
            d["vocab_size"] = self.vocab_size
        if self.kind == "multivalent":
            d["max_values"] = self.max_values
        return d


def load_schema(path) -> list[FieldSchema]:
    """Read a schema file: a JSON list of ``{name, kind, max_values?}``."""
    with open(path, encoding="utf-8") as f:
        items = json.load(f)
    if not isinstance(items, list) or not items:
        raise DataError("schema must be a non-empty JSON list")
    fields = []
    for item in items:
        try:
            fields.append(
                FieldSchema(
                    name=str(item["name"]),
                    kind=item["kind"],
                    max_values=int(item.get("max_values", DEFAULT_MAX_VALUES)),
                )
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad schema entry {item!r}") from exc
    if len({f.name for f in fields}) != len(fields):
        raise DataError("duplicate field names in schema")
    return fields


def schema_to_json(fields: Sequence[FieldSchema]) -> str:
    items = [{"name": f.name, "kind": f.kind} | ({"max_values": f.max_values} if f.kind == "multivalent" else {}) for f in fields]
    return json.dumps(items, indent=2)


# ---------------------------------------------------------------------------
# raw rows


@dataclass
class RawRow:
    label: int
    values: list  # str per categorical/numeric field, list[str] per multivalent field


def parse_line(line: str, schema: Sequence[FieldSchema], lineno: int) -> RawRow:
    tokens = line.rstrip("\r\n").split("\t")
    if len(tokens) != len(schema) + 1:
        raise MalformedRow(lineno, f"expected {len(schema) + 1} columns, got {len(tokens)}")
    if tokens[0] not in ("0", "1"):
        raise MalformedRow(lineno, f"label must be 0 or 1, got {tokens[0]!r}")
    values = []
    for f, tok in zip(schema, tokens[1:]):
        if f.kind == "multivalent":
            values.append([t for t in tok.split(",") if t] if tok else [])
        else:
            values.append(tok)
    return RawRow(int(tokens[0]), values)


def read_raw(lines: Iterable[str], schema: Sequence[FieldSchema]) -> tuple[list[RawRow], list[MalformedRow]]:
    """Parse raw lines, collecting malformed rows instead of stopping at the first."""
    rows, errors = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(parse_line(line, schema, lineno))
        except MalformedRow as exc:
            errors.append(exc)
    return rows, errors


def format_row(row: RawRow, schema: Sequence[FieldSchema]) -> str:
    toks = [str(row.label)]
    for f, v in zip(schema, row.values):
        toks.append(",".join(v) if f.kind == "multivalent" else v)
    return "\t".join(toks)


# ---------------------------------------------------------------------------
# numeric normalization


def normalize_numeric(z: float) -> float:
    """``ln(max(z, 0) + 1) + 1``."""
    return math.log(max(z, 0.0) + 1.0) + 1.0


def parse_numeric(token: str) -> tuple[float, str]:
    """Return ``(normalized value, status)`` with status ok/missing/unparsable/clamped."""
    if token == "":
        return 0.0, "missing"
    try:
        z = float(token)
    except ValueError:
        return 0.0, "unparsable"
    if not math.isfinite(z):
        return 0.0, "unparsable"
    status = "clamped" if z < 0 else "ok"
    return normalize_numeric(z), status


# ---------------------------------------------------------------------------
# manifest and vocabulary


@dataclass
class DatasetManifest:
    fields: list[FieldSchema]
    vocab: dict[str, dict[str, int]]
    min_count: int
    split_rows: dict[str, int] = field(default_factory=dict)
    unknown_folds: dict[str, int] = field(default_factory=dict)
    numeric_stats: dict[str, dict[str, int]] = field(default_factory=dict)
    normalization: dict = field(default_factory=lambda: {"transform": "ln(max(z,0)+1)+1", "log_base": "e", "missing": 0.0})
    source_sha256: str = ""
    seed: int | None = None

    @property
    def schema_hash(self) -> str:
        payload = json.dumps(
            {"fields": [f.to_dict() for f in self.fields], "vocab": self.vocab},
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "format_version": DATA_VERSION,
            "fields": [f.to_dict() for f in self.fields],
            "vocab": self.vocab,
            "min_count": self.min_count,
            "split_rows": self.split_rows,
            "unknown_folds": self.unknown_folds,
            "numeric_stats": self.numeric_stats,
            "normalization": self.normalization,
            "source_sha256": self.source_sha256,
            "seed": self.seed,
            "schema_hash": self.schema_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        fields = [
            FieldSchema(f["name"], f["kind"], f.get("vocab_size", 0), f.get("max_values", DEFAULT_MAX_VALUES))
            for f in d["fields"]
        ]
        m = cls(
            fields=fields,
            vocab=d["vocab"],
            min_count=d["min_count"],
            split_rows=d.get("split_rows", {}),
            unknown_folds=d.get("unknown_folds", {}),
            numeric_stats=d.get("numeric_stats", {}),
            normalization=d.get("normalization", {}),
            source_sha256=d.get("source_sha256", ""),
            seed=d.get("seed"),
        )
        if "schema_hash" in d and d["schema_hash"] != m.schema_hash:
            raise DataError("manifest schema_hash does not match its contents")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def count_values(rows: Iterable[RawRow], schema: Sequence[FieldSchema]) -> dict[str, Counter]:
    counts = {f.name: Counter() for f in schema if f.kind != "numeric"}
    for row in rows:
        for f, v in zip(schema, row.values):
            if f.kind == "categorical":
                if v != "":
                    counts[f.name][v] += 1
            elif f.kind == "multivalent":
                counts[f.name].update(v[: f.max_values])
    return counts


def build_vocab(rows: Iterable[RawRow], schema: Sequence[FieldSchema], min_count: int = 10) -> DatasetManifest:
    """Keep values seen at least ``min_count`` times; everything rarer folds to "unknown"."""
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    counts = count_values(rows, schema)
    vocab, folds, fields = {}, {}, []
    for f in schema:
        if f.kind == "numeric":
            fields.append(replace(f, vocab_size=0))
            continue
        kept = sorted(v for v, c in counts[f.name].items() if c >= min_count)
        if not kept:
            log.warning("field %r retains no values at min_count=%d; it becomes constant", f.name, min_count)
        vocab[f.name] = {v: N_RESERVED + i for i, v in enumerate(kept)}
        folds[f.name] = sum(c for c in counts[f.name].values() if c < min_count)
        fields.append(replace(f, vocab_size=N_RESERVED + len(kept)))
    return DatasetManifest(fields=fields, vocab=vocab, min_count=min_count, unknown_folds=folds)


# ---------------------------------------------------------------------------
# encoded examples


@dataclass
class MiniBatch:
    """Dense arrays for B examples, per-field local vocabulary indices.

    ``cat`` is (B, n_categorical) int64, ``num`` (B, n_numeric) float64,
    ``multi`` holds one (B, max_values) int64 array per multivalent field,
    padded with -1.
    """

    labels: np.ndarray
    cat: np.ndarray
    num: np.ndarray
    multi: list[np.ndarray]

    def __post_init__(self):
        n = len(self.labels)
        if self.cat.shape[0] != n or self.num.shape[0] != n or any(m.shape[0] != n for m in self.multi):
            raise DataError("all batch arrays must share the leading dimension")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "MiniBatch":
        return MiniBatch(self.labels[idx], self.cat[idx], self.num[idx], [m[idx] for m in self.multi])

    @classmethod
    def concat(cls, parts: Sequence["MiniBatch"]) -> "MiniBatch":
        return cls(
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.cat for p in parts]),
            np.concatenate([p.num for p in parts]),
            [np.concatenate([p.multi[k] for p in parts]) for k in range(len(parts[0].multi))],
        )

    def equals(self, other: "MiniBatch") -> bool:
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.cat, other.cat)
            and np.array_equal(self.num, other.num)
            and len(self.multi) == len(other.multi)
            and all(np.array_equal(a, b) for a, b in zip(self.multi, other.multi))
        )


Dataset = MiniBatch


def _kind_fields(fields: Sequence[FieldSchema], kind: str) -> list[FieldSchema]:
    return [f for f in fields if f.kind == kind]


def encode_rows(rows: Sequence[RawRow], manifest: DatasetManifest, stats: dict | None = None) -> Dataset:
    """Map raw rows to indices/normalized values. ``stats`` accumulates numeric status counts."""
    fields = manifest.fields
    cats, nums, multis = (_kind_fields(fields, k) for k in KINDS)
    pos = {f.name: i for i, f in enumerate(fields)}
    n = len(rows)
    labels = np.empty(n, dtype=np.uint8)
    cat = np.empty((n, len(cats)), dtype=np.int64)
    num = np.empty((n, len(nums)), dtype=np.float64)
    multi = [np.full((n, f.max_values), -1, dtype=np.int64) for f in multis]
    if stats is not None:
        for f in nums:
            stats.setdefault(f.name, {"missing": 0, "unparsable": 0, "clamped": 0})
    for r, row in enumerate(rows):
        if row.label not in (0, 1):
            raise DataError(f"row {r}: label {row.label!r} not in {{0, 1}}")
        labels[r] = row.label
        for k, f in enumerate(cats):
            v = row.values[pos[f.name]]
            cat[r, k] = MISSING if v == "" else manifest.vocab[f.name].get(v, UNKNOWN)
        for k, f in enumerate(nums):
            value, status = parse_numeric(row.values[pos[f.name]])
            num[r, k] = value
            if stats is not None and status != "ok":
                stats[f.name][status] += 1
        for k, f in enumerate(multis):
            table = manifest.vocab[f.name]
            members = row.values[pos[f.name]][: f.max_values]
            for c, v in enumerate(members):
                multi[k][r, c] = table.get(v, UNKNOWN)
    return Dataset(labels, cat, num, multi)


def decode_rows(ds: Dataset, manifest: DatasetManifest) -> list[RawRow]:
    """Inverse of :func:`encode_rows` for vocabulary fields (unknown → ``"<unk>"``)."""
    fields = manifest.fields
    inverse = {name: {i: v for v, i in table.items()} for name, table in manifest.vocab.items()}
    rows = []
    for r in range(len(ds)):
        values = []
        kind_pos = {k: 0 for k in KINDS}
        for f in fields:
            k = kind_pos[f.kind]
            kind_pos[f.kind] += 1
            if f.kind == "categorical":
                idx = int(ds.cat[r, k])
                values.append("" if idx == MISSING else inverse[f.name].get(idx, "<unk>"))
            elif f.kind == "numeric":
                v = float(ds.num[r, k])
                values.append("" if v == 0.0 else repr(math.exp(v - 1.0) - 1.0))
            else:
                idxs = [int(i) for i in ds.multi[k][r] if i >= 0]
                values.append([inverse[f.name].get(i, "<unk>") for i in idxs])
        rows.append(RawRow(int(ds.labels[r]), values))
    return rows


# ---------------------------------------------------------------------------
# binary dataset file


def _row_dtype(n_cat: int, n_num: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("cat", "<u4", (n_cat,)), ("num", "<f8", (n_num,))])


def write_dataset(path, ds: Dataset, manifest: DatasetManifest) -> None:
    n_cat, n_num = ds.cat.shape[1], ds.num.shape[1]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, len(ds), len(manifest.fields)))
        if not ds.multi:
            rec = np.empty(len(ds), dtype=_row_dtype(n_cat, n_num))
            rec["label"] = ds.labels
            rec["cat"] = ds.cat
            rec["num"] = ds.num
            f.write(rec.tobytes())
            return
        for r in range(len(ds)):
            parts = [struct.pack("<B", ds.labels[r]), ds.cat[r].astype("<u4").tobytes(), ds.num[r].astype("<f8").tobytes()]
            for m in ds.multi:
                idx = m[r][m[r] >= 0]
                parts.append(struct.pack("<B", len(idx)))
                parts.append(idx.astype("<u4").tobytes())
            f.write(b"".join(parts))


def read_dataset(path, manifest: DatasetManifest) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, n_fields = _HEADER.unpack_from(buf, 0)
    if magic != DATA_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != DATA_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if n_fields != len(manifest.fields):
        raise DataError(f"{path}: {n_fields} fields but manifest declares {len(manifest.fields)}")
    cats, nums, multis = (_kind_fields(manifest.fields, k) for k in KINDS)
    off = _HEADER.size
    if not multis:
        dt = _row_dtype(len(cats), len(nums))
        if len(buf) - off != n * dt.itemsize:
            raise DataError(f"{path}: size does not match {n} rows")
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
        ds = Dataset(rec["label"].copy(), rec["cat"].astype(np.int64).reshape(n, len(cats)),
                     rec["num"].astype(np.float64).reshape(n, len(nums)), [])
    else:
        labels = np.empty(n, dtype=np.uint8)
        cat = np.empty((n, len(cats)), dtype=np.int64)
        num = np.empty((n, len(nums)), dtype=np.float64)
        multi = [np.full((n, f.max_values), -1, dtype=np.int64) for f in multis]
        try:
            for r in range(n):
                labels[r] = buf[off]
                off += 1
                cat[r] = np.frombuffer(buf, "<u4", len(cats), off)
                off += 4 * len(cats)
                num[r] = np.frombuffer(buf, "<f8", len(nums), off)
                off += 8 * len(nums)
                for k, f in enumerate(multis):
                    c = buf[off]
                    off += 1
                    if c > f.max_values:
                        raise DataError(f"{path}: row {r} field {f.name!r} has {c} values > cap")
                    multi[k][r, :c] = np.frombuffer(buf, "<u4", c, off)
                    off += 4 * c
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}: truncated or corrupt rows") from exc
        if off != len(buf):
            raise DataError(f"{path}: trailing bytes after {n} rows")
        ds = Dataset(labels, cat, num, multi)
    validate(ds, manifest)
    return ds


def validate(ds: Dataset, manifest: DatasetManifest) -> None:
    if ds.labels.size and ds.labels.max() > 1:
        raise DataError("labels must be 0 or 1")
    for k, f in enumerate(_kind_fields(manifest.fields, "categorical")):
        col = ds.cat[:, k]
        if col.size and (col.min() < 0 or col.max() >= f.vocab_size):
            raise DataError(f"field {f.name!r}: index out of range [0, {f.vocab_size})")
    for k, f in enumerate(_kind_fields(manifest.fields, "multivalent")):
        m = ds.multi[k]
        if m.size and (m.min() < -1 or m.max() >= f.vocab_size):
            raise DataError(f"field {f.name!r}: index out of range [0, {f.vocab_size})")


# ---------------------------------------------------------------------------
# splitting and batching


def split(n_rows: int, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> list[np.ndarray]:
    """Disjoint, exhaustive row-index partitions; each sorted in source order."""
    if n_rows <= 0:
        raise DataError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(round(ratios[0] * n_rows))
    n_val = min(int(round(ratios[1] * n_rows)), n_rows - n_train)
    cuts = [perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]]
    return [np.sort(c) for c in cuts]


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[MiniBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield ds.take(order[start : start + batch_size])


# ---------------------------------------------------------------------------
# end-to-end preparation


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


SPLIT_NAMES = ("train", "val", "test")


def prepare_rows(rows: Sequence[RawRow], schema: Sequence[FieldSchema], min_count: int = 10,
                 seed: int = 0, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[DatasetManifest, dict[str, Dataset]]:
    """Split rows, build the vocabulary on the training split, encode every split."""
    parts = split(len(rows), ratios, seed)
    train_rows = [rows[i] for i in parts[0]]
    manifest = build_vocab(train_rows, schema, min_count)
    manifest.seed = seed
    stats: dict = {}
    out = {}
    for name, idx in zip(SPLIT_NAMES, parts):
        out[name] = encode_rows([rows[i] for i in idx], manifest, stats)
        manifest.split_rows[name] = len(idx)
    manifest.numeric_stats = stats
    return manifest, out


def prepare_files(input_path, schema_path, out_dir, min_count: int = 10, seed: int = 0,
                  ratios: Sequence[float] = (0.8, 0.1, 0.1), max_malformed: float = 0.01) -> dict:
    """Run the whole pipeline on files. Returns a JSON-serializable summary."""
    schema = load_schema(schema_path)
    with open(input_path, encoding="utf-8") as f:
        rows, errors = read_raw(f, schema)
    total = len(rows) + len(errors)
    for err in errors[:20]:
        log.error("malformed %s", err)
    if total == 0:
        raise DataError(f"{input_path}: no rows")
    if len(errors) > max_malformed * total:
        raise DataError(f"{len(errors)} of {total} rows malformed (> {max_malformed:.0%})")
    manifest, parts = prepare_rows(rows, schema, min_count, seed, ratios)
    manifest.source_sha256 = file_sha256(input_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in parts.items():
        write_dataset(out / f"{name}.bin", ds, manifest)
    manifest.save(out / "manifest.json")
    return {
        "rows": len(rows),
        "malformed": len(errors),
        "split_rows": manifest.split_rows,
        "vocab_sizes": {f.name: f.vocab_size for f in manifest.fields if f.kind != "numeric"},
        "unknown_folds": manifest.unknown_folds,
        "numeric_stats": manifest.numeric_stats,
        "min_count": min_count,
        "seed": seed,
        "schema_hash": manifest.schema_hash,
    }


def manifest_for(data_path) -> Path:
    """Locate the sidecar manifest of an encoded dataset file."""
    p = Path(data_path)
    for cand in (p.with_suffix(".manifest.json"), p.parent / "manifest.json"):
        if cand.exists():
            return cand
    raise DataError(f"no manifest found next to {p}")


def load_split(data_path) -> tuple[Dataset, DatasetManifest]:
    manifest = DatasetManifest.load(manifest_for(data_path))
    return read_dataset(data_path, manifest), manifest


# ---------------------------------------------------------------------------
# synthetic planted-parity data


@dataclass
class SynthData:
    rows: list[RawRow]
    schema: list[FieldSchema]
    planted: dict


def synth_parity(num_rows: int, num_fields: int, cardinality: int, order: int,
                 noise_rate: float = 0.0, seed: int = 0) -> SynthData:
    """Uniform categorical fields; label is the XOR of ``order`` fields' parity bits.

    Each value ``v`` in ``0..cardinality-1`` projects to bit ``v % 2``. The
    label is flipped with probability ``noise_rate``.
    """
    if not 1 <= order <= num_fields:
        raise ValueError("need 1 <= order <= num_fields")
    if cardinality < 2:
        raise ValueError("cardinality must be >= 2")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    planted_fields = np.sort(rng.choice(num_fields, size=order, replace=False))
    values = rng.integers(0, cardinality, size=(num_rows, num_fields))
    parity = np.bitwise_xor.reduce(values[:, planted_fields] % 2, axis=1)
    flip = rng.random(num_rows) < noise_rate
    labels = parity ^ flip.astype(parity.dtype)
    schema = [FieldSchema(f"f{j}", "categorical") for j in range(num_fields)]
    rows = [RawRow(int(labels[r]), [f"v{x}" for x in values[r]]) for r in range(num_rows)]
    planted = {
        "kind": "parity",
        "fields": [f"f{j}" for j in planted_fields],
        "order": order,
        "cardinality": cardinality,
        "projection": "value % 2",
        "noise_rate": noise_rate,
        "seed": seed,
        "rows": num_rows,
    }
    return SynthData(rows, schema, planted)
