"""Vertical partitioning, overlap sampling and mean imputation.

Parties are indexed from 0; party 0 is the active party and the only one
holding labels. Row ids are positions in the source table.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DataError, StaleMeansError

UNLABELED = -1


def _overlap_key(ids):
    ids = np.asarray(ids, dtype=np.int64)
    return hashlib.sha1(np.sort(ids).tobytes()).hexdigest()


@dataclass
class PartyDataset:
    """One party's attribute block restricted to the rows it holds."""

    party_id: int
    columns: np.ndarray  # column indices into the source table
    row_ids: np.ndarray  # ids of the rows in ``data``
    data: np.ndarray  # (len(row_ids), d_m)
    overlap_ids: np.ndarray
    nonoverlap_ids: np.ndarray
    labels: np.ndarray | None = None  # aligned with row_ids; UNLABELED where unknown
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(np.intersect1d(self.overlap_ids, self.nonoverlap_ids)):
            raise ContractViolation("overlap and non-overlap rows must be disjoint")
        if (self.labels is not None) != (self.party_id == 0):
            raise ContractViolation("labels are held by the active party (id 0) only")
        if self.data.shape != (len(self.row_ids), len(self.columns)):
            raise ContractViolation("data shape does not match row ids and columns")
        self._index = {int(r): i for i, r in enumerate(self.row_ids)}

    @property
    def dim(self):
        return len(self.columns)

    @property
    def n_overlap(self):
        return len(self.overlap_ids)

    @property
    def n_nonoverlap(self):
        return len(self.nonoverlap_ids)

    def rows(self, ids):
        return self.data[[self._index[int(i)] for i in ids]]

    def labels_of(self, ids):
        if self.labels is None:
            raise ContractViolation(f"party {self.party_id} holds no labels")
        return self.labels[[self._index[int(i)] for i in ids]]

    def overlap_block(self):
        return self.rows(self.overlap_ids)


def column_blocks(n_columns, fractions):
    """Split ``range(n_columns)`` into contiguous blocks by fraction."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or not np.isclose(fractions.sum(), 1.0):
        raise ContractViolation("column fractions must be positive and sum to 1")
    edges = np.rint(np.cumsum(fractions) * n_columns).astype(int)
    edges = np.concatenate([[0], edges])
    edges[-1] = n_columns
    blocks = [np.arange(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    if any(len(b) == 0 for b in blocks):
        raise ContractViolation("a party would receive no columns")
    return blocks


def vertical_split(table, labels, n_parties=None, fractions=None, columns=None,
                   overlap_ids=None, nonoverlap_ids=None, label_nonoverlap=True):
    """Distribute the columns of ``table`` over parties.

    Give either ``fractions`` (contiguous blocks) or explicit ``columns``
    (one index list per party, e.g. numeric fields to party 0 and
    categorical fields to party 1). Without ``overlap_ids`` every row is
    overlapping. ``nonoverlap_ids`` is a per-party list of the rows each
    party holds alone. With ``label_nonoverlap`` the active party keeps the
    labels of its own non-overlapping rows.
    """
    table = np.asarray(table, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = table.shape
    if columns is None:
        if fractions is None:
            if n_parties is None:
                raise ContractViolation("need n_parties, fractions or columns")
            fractions = np.full(n_parties, 1.0 / n_parties)
        columns = column_blocks(d, fractions)
    columns = [np.asarray(c, dtype=np.int64) for c in columns]
    if n_parties is not None and len(columns) != n_parties:
        raise ContractViolation("column groups do not match n_parties")
    if len(columns) < 2:
        raise ContractViolation("vertical split needs at least two parties")
    if any(len(c) == 0 for c in columns):
        raise ContractViolation("a party would receive no columns")
    flat = np.concatenate(columns)
    if len(flat) != d or len(np.unique(flat)) != d:
        raise ContractViolation("column groups must partition the table's columns")
    m = len(columns)
    if overlap_ids is None:
        overlap_ids = np.arange(n)
        nonoverlap_ids = [np.array([], dtype=np.int64) for _ in range(m)]
    overlap_ids = np.asarray(overlap_ids, dtype=np.int64)
    parties = []
    for p in range(m):
        own = np.asarray(nonoverlap_ids[p], dtype=np.int64)
        row_ids = np.concatenate([overlap_ids, own])
        party_labels = None
        if p == 0:
            party_labels = labels[row_ids].astype(np.int64)
            if not label_nonoverlap:
                party_labels[len(overlap_ids):] = UNLABELED
        parties.append(PartyDataset(
            party_id=p,
            columns=columns[p],
            row_ids=row_ids,
            data=table[np.ix_(row_ids, columns[p])],
            overlap_ids=overlap_ids,
            nonoverlap_ids=own,
            labels=party_labels,
        ))
    return parties


def sample_overlap(ids, overlap_fraction, seed, n_parties=2, ratios=None, n_classes=None,
                   total=None):
    """Choose the overlapping rows and hand every other row to one owner.

    ``ids`` is a row count or an array of candidate row ids. The overlap
    holds ``overlap_fraction`` of ``total`` rows (default: of the
    candidates). Returns the sorted overlap ids and one sorted array of
    owned non-overlap ids per party. ``ratios`` weights the owners
    (default: even).
    """
    ids = np.arange(ids) if np.isscalar(ids) else np.asarray(ids, dtype=np.int64)
    if not 0 < overlap_fraction <= 1:
        raise ConfigError("overlap fraction must lie in (0, 1]")
    n = len(ids)
    n_overlap = min(n, int(np.floor(overlap_fraction * (total or n) + 0.5)))
    if n_classes is not None and n_overlap < n_classes:
        raise ConfigError(
            f"{n_overlap} overlapping samples cannot cover {n_classes} classes"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ids)
    overlap = np.sort(perm[:n_overlap])
    rest = perm[n_overlap:]
    if ratios is None:
        ratios = np.ones(n_parties)
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != n_parties or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ConfigError("ownership ratios must be non-negative, one per party")
    counts = np.floor(ratios / ratios.sum() * len(rest)).astype(int)
    # hand out the remainder to the largest fractional parts, party order on ties
    frac = ratios / ratios.sum() * len(rest) - counts
    for p in np.argsort(-frac, kind="stable")[: len(rest) - counts.sum()]:
        counts[p] += 1
    bounds = np.concatenate([[0], np.cumsum(counts)])
    owned = [np.sort(rest[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return overlap, owned


@dataclass(frozen=True)
class MeanSnapshot:
    """Per-party means over the overlap rows of one particular split."""

    means: tuple
    overlap_key: str

    def check(self, overlap_ids):
        if _overlap_key(overlap_ids) != self.overlap_key:
            raise StaleMeansError("means were computed for a different overlap set")


def party_means(ds):
    """Column means of a party's overlapping rows."""
    if ds.n_overlap == 0:
        raise ContractViolation("cannot average an empty overlap set")
    return ds.overlap_block().mean(axis=0)


def compute_means(parties):
    return MeanSnapshot(tuple(party_means(p) for p in parties), _overlap_key(parties[0].overlap_ids))


@dataclass
class ImputedSample:
    sample_id: int
    owner: int
    x: np.ndarray
    observed: np.ndarray  # bool per party block


def impute_mean(sample_id, x_owner, owner, snapshot, overlap_ids=None):
    """Fill every block except the owner's with the overlap mean.

    Blocks are laid out in party order, the observed block sits in the
    owner's slot. Passing the current ``overlap_ids`` guards against means
    from an outdated split.
    """
    if overlap_ids is not None:
        snapshot.check(overlap_ids)
    x_owner = np.asarray(x_owner, dtype=np.float64)
    if x_owner.shape != snapshot.means[owner].shape:
        raise ContractViolation("observed block width does not match the owner's columns")
    blocks = [x_owner if p == owner else mu for p, mu in enumerate(snapshot.means)]
    observed = np.arange(len(blocks)) == owner
    return ImputedSample(int(sample_id), owner, np.concatenate(blocks), observed)


def impute_nonoverlap(parties, snapshot=None):
    """Impute every party's non-overlap rows at once.

    Returns ``(ids, owners, blocks)`` where ``blocks[p]`` is the
    ``(n_non, d_p)`` array for party slot ``p``.
    """
    if snapshot is None:
        snapshot = compute_means(parties)
    snapshot.check(parties[0].overlap_ids)
    ids, owners = [], []
    for p in parties:
        ids.append(p.nonoverlap_ids)
        owners.append(np.full(p.n_nonoverlap, p.party_id))
    ids = np.concatenate(ids).astype(np.int64)
    owners = np.concatenate(owners).astype(np.int64)
    blocks = []
    for p in parties:
        block = np.tile(snapshot.means[p.party_id], (len(ids), 1))
        mine = owners == p.party_id
        block[mine] = p.rows(ids[mine])
        blocks.append(block)
    return ids, owners, blocks


def overlap_blocks(parties):
    return [p.overlap_block() for p in parties]


def gen_synthetic(n_classes, n_parties, n, informative=2, noise_dims=0, separation=3.0,
                  noise=1.0, seed=0, clusters=1):
    """Gaussian class clusters spread over the parties' column blocks.

    Every party gets ``informative`` dimensions in which each class is a
    mixture of ``clusters`` blobs with random centres at distance
    ``separation`` from the origin, so each block alone is a weaker
    classifier than all of them together. ``informative``, ``clusters`` and
    ``separation`` take a scalar or one value per party. ``noise_dims``
    pure-noise columns are appended to every block. Returns ``(table, labels, columns)``.
    """
    informative, clusters, separation = (
        [v] * n_parties if np.isscalar(v) else list(v) for v in (informative, clusters, separation)
    )
    if not len(informative) == len(clusters) == len(separation) == n_parties:
        raise ContractViolation("per-party settings need one entry per party")
    if min(informative) < 1 or min(clusters) < 1:
        raise ContractViolation("every party needs at least one informative dimension and cluster")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    blocks, columns, start = [], [], 0
    for d, c, sep in zip(informative, clusters, separation):
        # blob membership is drawn per party so blocks are independent given the class
        blobs = rng.integers(0, c, size=n)
        centres = rng.normal(size=(n_classes, c, d))
        centres /= np.linalg.norm(centres, axis=-1, keepdims=True) + 1e-12
        x = sep * centres[labels, blobs] + noise * rng.normal(size=(n, d))
        if noise_dims:
            x = np.hstack([x, rng.normal(size=(n, noise_dims))])
        blocks.append(x)
        columns.append(np.arange(start, start + x.shape[1]))
        start += x.shape[1]
    return np.hstack(blocks), labels, columns


def train_test_split(n, test_fraction, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(np.floor(test_fraction * n + 0.5))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# file formats


def write_csv(path, table, labels, header=None):
    table = np.asarray(table)
    if header is None:
        header = [f"x{j}" for j in range(table.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) + ["label"])
        for row, y in zip(table, labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def read_csv(path):
    """Read a table with a header row and a ``label`` column.

    Columns whose values are all numeric are kept as floats; any other
    column is one-hot encoded. Returns ``(table, labels, header, groups)``
    where ``groups`` maps each original column name to its output columns.
    """
    if not os.path.isfile(path):
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if "label" not in header:
            raise DataError(f"{path}: no 'label' column")
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            if any(v == "" for v in row):
                raise DataError(f"{path}: line {reader.line_num} has a missing value")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    li = header.index("label")
    try:
        labels = np.array([int(float(r[li])) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: non-integer label ({exc})") from None
    cols, names, groups = [], [], {}
    for j, name in enumerate(header):
        if j == li:
            continue
        values = [r[j] for r in rows]
        try:
            numeric = np.array([float(v) for v in values])
            groups[name] = [len(names)]
            cols.append(numeric[:, None])
            names.append(name)
        except ValueError:
            cats = sorted(set(values))
            onehot = np.array([[v == c for c in cats] for v in values], dtype=np.float64)
            groups[name] = list(range(len(names), len(names) + len(cats)))
            cols.append(onehot)
            names.extend(f"{name}={c}" for c in cats)
    return np.hstack(cols), labels, names, groups


def split_manifest(columns, train_ids, test_ids, overlap_ids, nonoverlap_ids, seed, **extra):
    return {
        "seed": int(seed),
        "party_columns": [np.asarray(c).tolist() for c in columns],
        "train_ids": np.asarray(train_ids).tolist(),
        "test_ids": np.asarray(test_ids).tolist(),
        "overlap_ids": np.asarray(overlap_ids).tolist(),
        "nonoverlap_ids": [np.asarray(n).tolist() for n in nonoverlap_ids],
        **extra,
    }


def parties_from_manifest(table, labels, manifest):
    """Rebuild the training-side party datasets recorded in a manifest."""
    return vertical_split(
        table,
        labels,
        columns=manifest["party_columns"],
        overlap_ids=manifest["overlap_ids"],
        nonoverlap_ids=manifest["nonoverlap_ids"],
        label_nonoverlap=manifest.get("label_nonoverlap", True),
    )


def save_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)
