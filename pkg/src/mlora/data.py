"""Multi-domain datasets: CSV ingestion, vocabularies, bucketing, splits, batching
and a synthetic generator with a logistic ground truth.

CSV contract: UTF-8, comma separated, one header row.  The binary target is
the ``label`` column and the domain is the ``domain_id`` column; every other
column is an input field.  Sparse fields are mapped to indices through a
first-seen vocabulary (index 0 is reserved for values unseen when the
vocabulary was built); dense fields are quantile-bucketized.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, SchemaError
from .fileio import atomic_write_text
from .model import FeatureSchema
from .numerics import Rng, matmul

log = logging.getLogger(__name__)

LABEL = "label"
DOMAIN = "domain_id"
UNKNOWN = 0
DEFAULT_BUCKETS = 10


@dataclass
class Bucketizer:
    boundaries: np.ndarray
    k: int = DEFAULT_BUCKETS

    def bucket(self, x):
        out = np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="right")
        return out if np.ndim(out) else int(out)


def fit_buckets(values, k: int = DEFAULT_BUCKETS) -> Bucketizer:
    """Quantile boundaries at i/k, i = 1..k-1; bucket b holds values in
    ``[boundaries[b-1], boundaries[b])``."""
    if k < 2:
        raise ParameterError(f"bucket count must be >= 2, got {k}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("fit_buckets needs at least one value")
    qs = np.quantile(values, np.arange(1, k) / k)
    bounds = np.unique(qs)
    bounds = bounds[bounds > values.min()]
    return Bucketizer(bounds, k)


class Vocabulary:
    """Raw-string to index maps per field, plus bucketizers for dense fields."""

    def __init__(self, sparse_fields, dense_fields=(), domain_field=DOMAIN):
        self.sparse_fields = list(sparse_fields)
        self.dense_fields = list(dense_fields)
        self.domain_field = domain_field
        self.maps: dict[str, dict[str, int]] = {f: {} for f in self.sparse_fields}
        self.domains: dict[str, int] = {}
        self.buckets: dict[str, Bucketizer] = {}

    @property
    def fields(self):
        return self.sparse_fields + self.dense_fields

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            tuple((f, len(self.maps[f]) + 1) for f in self.sparse_fields),
            tuple((f, self.buckets[f].k) for f in self.dense_fields),
            max(len(self.domains), 1),
            self.domain_field,
        )

    def add(self, fname, raw):
        m = self.maps[fname]
        if raw not in m:
            m[raw] = len(m) + 1
        return m[raw]

    def add_domain(self, raw):
        if raw not in self.domains:
            self.domains[raw] = len(self.domains)
        return self.domains[raw]

    def domain_names(self):
        return {i: raw for raw, i in self.domains.items()}

    def reverse(self, fname):
        return {i: raw for raw, i in self.maps[fname].items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["field", "raw_value", "index"])
        for raw, i in self.domains.items():
            w.writerow([self.domain_field, raw, i])
        for f in self.sparse_fields:
            for raw, i in self.maps[f].items():
                w.writerow([f, raw, i])
        for f in self.dense_fields:
            b = self.buckets[f]
            w.writerow([f"#buckets:{f}", "*", b.k])
            for i, x in enumerate(b.boundaries, start=1):
                w.writerow([f"#bucket:{f}", repr(float(x)), i])
        return buf.getvalue()

    def save(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path, domain_field=DOMAIN) -> "Vocabulary":
        sparse, dense = [], []
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["field", "raw_value", "index"]:
                raise SchemaError(f"{path}: vocabulary header must be field,raw_value,index")
            for row in reader:
                if len(row) != 3:
                    raise SchemaError(f"{path}:{reader.line_num}: expected 3 columns")
                rows.append(row)
                f = row[0]
                if f.startswith("#buckets:"):
                    dense.append(f.split(":", 1)[1])
                elif not f.startswith("#bucket:") and f != domain_field and f not in sparse:
                    sparse.append(f)
        vocab = cls(sparse, dense, domain_field)
        bounds = {f: [] for f in dense}
        ks = {}
        try:
            for f, raw, i in rows:
                if f == domain_field:
                    vocab.domains[raw] = int(i)
                elif f.startswith("#buckets:"):
                    ks[f.split(":", 1)[1]] = int(i)
                elif f.startswith("#bucket:"):
                    bounds[f.split(":", 1)[1]].append(float(raw))
                else:
                    vocab.maps[f][raw] = int(i)
            for f in dense:
                vocab.buckets[f] = Bucketizer(np.array(bounds[f], dtype=np.float64), ks[f])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{path}: malformed vocabulary entry: {exc}") from None
        return vocab


@dataclass
class RowError:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class DomainDataset:
    """Encoded samples: ``X`` holds field indices in schema order, ``t`` the domain."""

    vocab: Vocabulary
    X: np.ndarray
    y: np.ndarray
    t: np.ndarray
    dense_raw: np.ndarray
    split: str = "all"
    row_errors: list[RowError] = field(default_factory=list)
    oracle_prob: np.ndarray | None = None

    def __len__(self):
        return int(self.y.shape[0])

    @property
    def schema(self):
        return self.vocab.schema()

    @property
    def domains(self):
        return sorted(int(t) for t in np.unique(self.t))

    @property
    def sizes(self) -> dict[int, int]:
        ts, counts = np.unique(self.t, return_counts=True)
        return {int(a): int(b) for a, b in zip(ts, counts)}

    def subset(self, rows, split=None) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return DomainDataset(self.vocab, self.X[rows], self.y[rows], self.t[rows],
                             self.dense_raw[rows], split or self.split,
                             oracle_prob=None if self.oracle_prob is None else self.oracle_prob[rows])

    def for_domains(self, domains) -> "DomainDataset":
        return self.subset(np.flatnonzero(np.isin(self.t, list(domains))))

    def rows(self, t):
        return np.flatnonzero(self.t == t)


def _encode(vocab, header, raw_rows, lines, grow, n_buckets):
    """Turn raw string rows into a DomainDataset, collecting row errors."""
    col = {name: j for j, name in enumerate(header)}
    errors = []
    good = []
    for line, row in zip(lines, raw_rows):
        if len(row) != len(header):
            errors.append(RowError(line, f"expected {len(header)} columns, got {len(row)}"))
            continue
        lab = row[col[LABEL]].strip()
        if lab not in ("0", "1"):
            errors.append(RowError(line, f"label {lab!r} is not 0 or 1"))
            continue
        try:
            dense = [float(row[col[f]]) for f in vocab.dense_fields]
        except ValueError as exc:
            errors.append(RowError(line, f"unparseable dense value: {exc}"))
            continue
        if not all(math.isfinite(v) for v in dense):
            errors.append(RowError(line, "non-finite dense value"))
            continue
        d = row[col[DOMAIN]]
        if not grow and d not in vocab.domains:
            errors.append(RowError(line, f"unknown domain {d!r}"))
            continue
        good.append((row, int(lab), dense))

    n = len(good)
    n_sparse, n_dense = len(vocab.sparse_fields), len(vocab.dense_fields)
    X = np.zeros((n, n_sparse + n_dense), dtype=np.int64)
    y = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.int64)
    dense_raw = np.zeros((n, n_dense))
    for i, (row, lab, dense) in enumerate(good):
        y[i] = lab
        t[i] = vocab.add_domain(row[col[DOMAIN]]) if grow else vocab.domains[row[col[DOMAIN]]]
        for j, f in enumerate(vocab.sparse_fields):
            raw = row[col[f]]
            X[i, j] = vocab.add(f, raw) if grow else vocab.maps[f].get(raw, UNKNOWN)
        dense_raw[i] = dense
    for j, f in enumerate(vocab.dense_fields):
        if f not in vocab.buckets:
            vals = dense_raw[:, j] if n else np.zeros(1)
            vocab.buckets[f] = fit_buckets(vals, n_buckets)
        X[:, n_sparse + j] = vocab.buckets[f].bucket(dense_raw[:, j])
    return DomainDataset(vocab, X, y, t, dense_raw, row_errors=errors)


def load_csv(path, vocab: Vocabulary | None = None, *, dense_fields=(), n_buckets=DEFAULT_BUCKETS,
             schema: FeatureSchema | None = None) -> DomainDataset:
    """Parse a CSV file into a dataset.

    Without ``vocab`` a fresh first-seen vocabulary is built (bucket boundaries
    fitted on this file).  Rows with bad labels or values are skipped and
    reported in ``dataset.row_errors``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, no header row")
        raw_rows, lines = [], []
        for row in reader:
            if not row:
                continue
            raw_rows.append(row)
            lines.append(reader.line_num)
    for required in (LABEL, DOMAIN):
        if required not in header:
            raise SchemaError(f"{path}: missing required column {required!r}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names")
    features = [h for h in header if h not in (LABEL, DOMAIN)]
    grow = vocab is None
    if grow:
        dense_fields = list(dense_fields)
        unknown = [f for f in dense_fields if f not in features]
        if unknown:
            raise SchemaError(f"{path}: missing dense column(s) {unknown}")
        vocab = Vocabulary([f for f in features if f not in dense_fields], dense_fields)
    else:
        missing = [f for f in vocab.fields if f not in features]
        extra = [f for f in features if f not in vocab.fields]
        if missing or extra:
            raise SchemaError(f"{path}: columns do not match vocabulary "
                              f"(missing {missing}, unexpected {extra})")
    if schema is not None:
        missing = [f for f in schema.field_names if f not in features]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing} required by the schema")
    ds = _encode(vocab, header, raw_rows, lines, grow, n_buckets)
    for err in ds.row_errors:
        log.warning("%s: %s", path, err)
    return ds


def to_csv_text(ds: DomainDataset) -> str:
    v = ds.vocab
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([DOMAIN, LABEL] + v.sparse_fields + v.dense_fields)
    dnames = v.domain_names()
    rev = [v.reverse(f) for f in v.sparse_fields]
    n_sparse = len(v.sparse_fields)
    for i in range(len(ds)):
        row = [dnames[int(ds.t[i])], int(ds.y[i])]
        row += [rev[j].get(int(ds.X[i, j]), "") for j in range(n_sparse)]
        row += [repr(float(x)) for x in ds.dense_raw[i]]
        w.writerow(row)
    return buf.getvalue()


def write_csv(ds: DomainDataset, path) -> None:
    atomic_write_text(path, to_csv_text(ds))


def split(ds: DomainDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Per-domain stratified random split into (train, validation, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    rng = Rng(seed)
    parts = ([], [], [])
    for t in ds.domains:
        rows = ds.rows(t)
        n = rows.size
        if n < 3:
            log.warning("domain %d has only %d samples; placing it wholly in train", t, n)
            parts[0].append(rows)
            continue
        perm = rows[rng.derive(t).permutation(n)]
        n_train = max(1, int(round(fractions[0] * n)))
        n_val = max(1, int(round(fractions[1] * n)))
        n_train = min(n_train, n - 2)
        n_val = min(n_val, n - n_train - 1)
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train:n_train + n_val])
        parts[2].append(perm[n_train + n_val:])
    names = ("train", "validation", "test")
    out = []
    for name, chunks in zip(names, parts):
        rows = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(ds.subset(rows, name))
    return tuple(out)


@dataclass
class Batch:
    rows: np.ndarray
    X: np.ndarray
    y: np.ndarray
    t: np.ndarray


def batches(ds: DomainDataset, batch_size: int, mode: str = "mixed", seed: int = 0, domains=None):
    """Yield minibatches.

    ``mixed`` shuffles the whole dataset; ``per_domain`` shuffles within each
    domain and interleaves single-domain batches round-robin.  Partial final
    batches are kept.  ``domains`` restricts per-domain iteration.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    rng = Rng(seed)

    def make(rows):
        return Batch(rows, ds.X[rows], ds.y[rows], ds.t[rows])

    if mode == "mixed":
        perm = rng.permutation(len(ds))
        for s in range(0, perm.size, batch_size):
            yield make(perm[s:s + batch_size])
        return
    if mode != "per_domain":
        raise ParameterError(f"unknown batching mode {mode!r}")
    queues = []
    for t in (ds.domains if domains is None else sorted(domains)):
        rows = ds.rows(t)
        if rows.size:
            rows = rows[rng.derive(t).permutation(rows.size)]
            queues.append([rows[s:s + batch_size] for s in range(0, rows.size, batch_size)])
    for k in range(max((len(q) for q in queues), default=0)):
        for q in queues:
            if k < len(q):
                yield make(q[k])


@dataclass
class SynthConfig:
    """Synthetic multi-domain CTR data with a per-domain logistic ground truth.

    Each field value owns a latent Gaussian vector; a sample's latent input is
    the concatenation of its values' vectors plus its raw dense features.
    Domain ``t`` scores it with ``w_t = w_0 + shift_t * u_t`` where ``w_0`` is a
    shared unit vector and ``u_t`` a random unit direction.  Domains are
    ordered largest first; ``shift_t`` grows linearly from
    ``shift * shift_floor`` for the largest domain to ``shift`` for the
    smallest one.
    """

    n_domains: int = 5
    n_samples: int = 20000
    power: float = 1.5
    sparse_fields: tuple = (("user", 300), ("item", 200), ("context", 20))
    n_dense: int = 1
    latent_dim: int = 4
    shift: float = 1.2
    shift_floor: float = 0.8
    logit_scale: float = 2.0
    bias_spread: float = 0.3
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_domains < 1:
            raise ParameterError("n_domains must be >= 1")
        if self.n_samples < self.n_domains:
            raise ParameterError("n_samples must be at least n_domains")
        if self.shift < 0:
            raise ParameterError("shift must be >= 0")
        if not 0.0 <= self.noise < 0.5:
            raise ParameterError("noise must be in [0, 0.5)")
        if self.power < 0:
            raise ParameterError("power must be >= 0")
        if not self.sparse_fields and not self.n_dense:
            raise ParameterError("need at least one feature")
        if not 0.0 <= self.shift_floor <= 1.0:
            raise ParameterError("shift_floor must be in [0, 1]")

    def domain_sizes(self):
        w = np.arange(1, self.n_domains + 1, dtype=np.float64) ** -self.power
        sizes = np.floor(self.n_samples * w / w.sum()).astype(np.int64)
        sizes = np.maximum(sizes, 1)
        sizes[0] += self.n_samples - sizes.sum()
        return [int(s) for s in sizes]

    def domain_shifts(self):
        if self.n_domains == 1:
            return [self.shift]
        steps = np.linspace(self.shift_floor, 1.0, self.n_domains)
        return [float(self.shift * s) for s in steps]


def _unit(v):
    return v / np.sqrt(np.sum(v * v))


def gen_synthetic(cfg: SynthConfig) -> DomainDataset:
    cfg.validate()
    root = Rng(cfg.seed)
    k = cfg.latent_dim
    latents = [root.derive(1, j).normal(v * k).reshape(v, k) for j, (_, v) in enumerate(cfg.sparse_fields)]
    dim = len(cfg.sparse_fields) * k + cfg.n_dense
    w0 = _unit(root.derive(2).normal(dim))
    fnames = [f for f, _ in cfg.sparse_fields]
    dnames = [f"dense{j}" if cfg.n_dense > 1 else "price" for j in range(cfg.n_dense)]
    header = [DOMAIN, LABEL] + fnames + dnames
    raw_rows, probs = [], []
    for t, (size, shift) in enumerate(zip(cfg.domain_sizes(), cfg.domain_shifts())):
        rng = root.derive(3, t)
        w_t = w0 + shift * _unit(rng.normal(dim))
        bias = float(rng.normal(1, 0.0, cfg.bias_spread)[0])
        idx = [rng.integers(v, size) for _, v in cfg.sparse_fields]
        dense = rng.normal(size * cfg.n_dense).reshape(size, cfg.n_dense)
        x = np.concatenate([lat[i] for lat, i in zip(latents, idx)] + [dense], axis=1)
        score = matmul(x, w_t.reshape(-1, 1))[:, 0]
        p = 1.0 / (1.0 + np.exp(-(cfg.logit_scale * score + bias)))
        y = (rng.uniform(size) < p).astype(np.int64)
        flip = rng.uniform(size) < cfg.noise
        y = np.where(flip, 1 - y, y)
        probs.append(p)
        for i in range(size):
            raw_rows.append([str(t), str(int(y[i]))] + [str(int(c[i])) for c in idx]
                            + [repr(float(d)) for d in dense[i]])
    vocab = Vocabulary(fnames, dnames)
    ds = _encode(vocab, header, raw_rows, range(2, len(raw_rows) + 2), True, DEFAULT_BUCKETS)
    ds.oracle_prob = np.concatenate(probs)
    return ds


def save_dataset(ds: DomainDataset, data_path, vocab_path=None) -> None:
    write_csv(ds, data_path)
    if vocab_path is not None:
        ds.vocab.save(vocab_path)


def read_dataset(data_path, vocab_path=None, dense_fields=(), n_buckets=DEFAULT_BUCKETS) -> DomainDataset:
    """Load ``data_path`` with the vocabulary at ``vocab_path`` (built and saved if absent)."""
    if vocab_path is not None and Path(vocab_path).exists():
        return load_csv(data_path, Vocabulary.load(vocab_path))
    ds = load_csv(data_path, dense_fields=dense_fields, n_buckets=n_buckets)
    if vocab_path is not None:
        ds.vocab.save(vocab_path)
    return ds
