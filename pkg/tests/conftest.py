import numpy as np
import pytest

from fint import kernels, numkernel
from fint.data import FieldSchema, MiniBatch


@pytest.fixture(autouse=True)
def _restore_globals():
    precision, backend = numkernel.precision_name(), kernels.BACKEND
    yield
    numkernel.set_precision(precision)
    kernels.use_backend(backend)


def mixed_fields(n_cat=2, n_num=1, n_multi=1, vocab=6, max_values=3):
    fields = []
    for k in range(n_cat):
        fields.append(FieldSchema(f"c{k}", "categorical", vocab + k))
    for k in range(n_num):
        fields.append(FieldSchema(f"n{k}", "numeric"))
    for k in range(n_multi):
        fields.append(FieldSchema(f"m{k}", "multivalent", vocab, max_values=max_values))
    return fields


def random_batch(fields, rows, rng, labels=None):
    cats = [f for f in fields if f.kind == "categorical"]
    nums = [f for f in fields if f.kind == "numeric"]
    multis = [f for f in fields if f.kind == "multivalent"]
    cat = np.stack([rng.integers(0, f.vocab_size, rows) for f in cats], axis=1) if cats else np.zeros((rows, 0), np.int64)
    num = 1.0 + np.log1p(rng.exponential(1.0, size=(rows, len(nums))))
    multi = []
    for f in multis:
        m = np.full((rows, f.max_values), -1, dtype=np.int64)
        for r in range(rows):
            k = int(rng.integers(0, f.max_values + 1))
            m[r, :k] = rng.integers(0, f.vocab_size, k)
        multi.append(m)
    if labels is None:
        labels = rng.integers(0, 2, rows)
    return MiniBatch(np.asarray(labels, dtype=np.uint8), cat.astype(np.int64), num, multi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def memorization_set(out_dir, rows=256, fields=8, cardinality=64, seed=0):
    """Random features and random labels, every row in one training split (min count 1).

    Writes train.bin and manifest.json under ``out_dir``; returns (manifest, dataset, path).
    """
    from fint.data import RawRow, prepare_rows, write_dataset

    rng = np.random.default_rng(seed)
    schema = [FieldSchema(f"f{j}", "categorical") for j in range(fields)]
    vals = rng.integers(0, cardinality, (rows, fields))
    labels = rng.integers(0, 2, rows)
    raw = [RawRow(int(labels[r]), [f"v{x}" for x in vals[r]]) for r in range(rows)]
    manifest, parts = prepare_rows(raw, schema, min_count=1, seed=seed, ratios=(1.0, 0.0, 0.0))
    path = out_dir / "train.bin"
    write_dataset(path, parts["train"], manifest)
    manifest.save(out_dir / "manifest.json")
    return manifest, parts["train"], path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
