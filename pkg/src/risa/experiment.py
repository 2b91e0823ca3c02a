"""Dataset bundles: a source table plus the manifest describing its split."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import dataops
from .evfl import TrainingSet, VflConfig, concat_sets, overlap_set, train_evfl
from .errors import DataError

# The synthetic benchmark: a strong active block with two blobs per class, a
# weaker single-blob passive block, and many noise columns so that a model
# trained on few overlapping rows overfits.
SYNTHETIC_DEFAULTS = dict(n_classes=4, n_parties=2, n=4000, informative=[6, 4], noise_dims=80,
                          separation=[3.0, 2.0], noise=1.0, clusters=[2, 1])

# Training overrides used for every method in benchmark comparisons.
BENCHMARK_CONFIG = dict(tau_p=0.95, fst_epochs=10, hidden=32, depth=1, lr=0.02)


def benchmark_config(n_classes=4, seed=0, **overrides):
    return VflConfig(n_classes=n_classes, seed=seed, **{**BENCHMARK_CONFIG, **overrides})


@dataclass
class Bundle:
    table: np.ndarray
    labels: np.ndarray
    manifest: dict

    @property
    def n_classes(self):
        return int(self.manifest.get("n_classes", int(self.labels.max()) + 1))

    @property
    def n_parties(self):
        return len(self.manifest["party_columns"])

    def parties(self):
        return dataops.parties_from_manifest(self.table, self.labels, self.manifest)

    def test(self):
        """Fully observed held-out blocks, one per party, and their labels."""
        ids = np.asarray(self.manifest["test_ids"], dtype=np.int64)
        blocks = [self.table[np.ix_(ids, np.asarray(c))] for c in self.manifest["party_columns"]]
        return blocks, self.labels[ids]

    def save(self, out_dir):
        """Write ``table.csv``, ``manifest.json`` and one CSV per party."""
        os.makedirs(out_dir, exist_ok=True)
        dataops.write_csv(os.path.join(out_dir, "table.csv"), self.table, self.labels,
                          self.manifest.get("header"))
        dataops.save_manifest(os.path.join(out_dir, "manifest.json"), self.manifest)
        for p in self.parties():
            path = os.path.join(out_dir, f"party_{p.party_id}.csv")
            with open(path, "w") as fh:
                cols = ["row_id"] + [f"c{c}" for c in p.columns]
                if p.labels is not None:
                    cols.append("label")
                fh.write(",".join(cols) + "\n")
                for i, rid in enumerate(p.row_ids):
                    vals = [str(int(rid))] + [repr(float(v)) for v in p.data[i]]
                    if p.labels is not None:
                        vals.append(str(int(p.labels[i])))
                    fh.write(",".join(vals) + "\n")

    @classmethod
    def load(cls, out_dir):
        manifest_path = os.path.join(out_dir, "manifest.json")
        if not os.path.exists(manifest_path):
            raise DataError(f"no prepared bundle in {out_dir}")
        manifest = dataops.load_manifest(manifest_path)
        table, labels, _, _ = dataops.read_csv(os.path.join(out_dir, "table.csv"))
        return cls(table, labels, manifest)


def split_bundle(table, labels, columns, overlap, seed, test_fraction=0.2, ratios=None,
                 label_nonoverlap=True, **extra):
    """Hold out a test split, then choose overlap and owners among training rows.

    The overlap fraction counts against the whole table, so 10% of 100 rows
    is 10 overlapping rows whatever the test split.
    """
    n_classes = int(np.max(labels)) + 1
    train_ids, test_ids = dataops.train_test_split(len(labels), test_fraction, seed)
    overlap_ids, owned = dataops.sample_overlap(train_ids, overlap, seed, len(columns), ratios,
                                                n_classes, total=len(labels))
    manifest = dataops.split_manifest(columns, train_ids, test_ids, overlap_ids, owned, seed,
                                      overlap_fraction=overlap, n_classes=n_classes,
                                      label_nonoverlap=label_nonoverlap, **extra)
    return Bundle(np.asarray(table, dtype=np.float64), np.asarray(labels), manifest)


def synthetic_bundle(overlap, seed, data_seed=None, **kwargs):
    """Synthetic Gaussian benchmark split at the given overlap fraction.

    ``data_seed`` fixes the generated table independently of the split seed.
    """
    opts = {**SYNTHETIC_DEFAULTS, **kwargs}
    data_seed = seed if data_seed is None else data_seed
    table, labels, columns = dataops.gen_synthetic(
        opts["n_classes"], opts["n_parties"], opts["n"], opts["informative"],
        opts["noise_dims"], opts["separation"], opts["noise"], data_seed,
        opts["clusters"])
    return split_bundle(table, labels, columns, overlap, seed,
                        synthetic={**opts, "data_seed": data_seed})


def csv_bundle(path, overlap, seed, n_parties=2, fractions=None, column_names=None, **kwargs):
    """Bundle from a CSV file; ``column_names`` optionally lists field names per party."""
    table, labels, header, groups = dataops.read_csv(path)
    if column_names is not None:
        columns = [sorted(j for name in names for j in groups[name]) for names in column_names]
    else:
        # split whole fields so one-hot groups never straddle two parties
        fields = list(groups)
        blocks = dataops.column_blocks(len(fields), fractions or [1.0 / n_parties] * n_parties)
        columns = [sorted(j for f in blocks_f for j in groups[fields[f]]) for blocks_f in blocks]
    return split_bundle(table, labels, columns, overlap, seed, header=header, source=path,
                        **kwargs)


def planted_noise(seed, overlap=0.1, flip_fraction=0.2, config=None, **data):
    """Filter imputed samples whose labels were partly flipped on purpose.

    Imputed rows get their true labels, then ``flip_fraction`` of the
    passive-owned ones are moved to a random wrong class. Returns the
    flipped fraction among filtered and among retained imputed samples.
    """
    bundle = synthetic_bundle(overlap, seed, **data)
    parties = bundle.parties()
    config = config or benchmark_config(bundle.n_classes, seed)
    ids, owners, blocks = dataops.impute_nonoverlap(parties)
    labels = bundle.labels[ids].copy()
    rng = np.random.default_rng([seed, 1])
    passive = np.flatnonzero(owners != 0)
    flip = rng.choice(passive, size=int(round(flip_fraction * len(passive))), replace=False)
    labels[flip] = (labels[flip] + rng.integers(1, bundle.n_classes, size=len(flip))) % bundle.n_classes
    flipped = np.zeros(len(ids), dtype=bool)
    flipped[flip] = True
    imputed = TrainingSet(ids, blocks, labels, np.ones(len(ids), dtype=bool), flipped)
    train = concat_sets(overlap_set(parties), imputed)
    _, state = train_evfl(train, config)
    removed = np.zeros(len(train), dtype=bool)
    removed[list(state.removed_at)] = True
    retained = ~removed & train.filterable
    return {
        "seed": seed,
        "n_filtered": int(removed.sum()),
        "flipped_filtered": float(train.flipped[removed].mean()) if removed.any() else 0.0,
        "flipped_retained": float(train.flipped[retained].mean()),
    }
